"""File writers: 9-significant-digit CSVs, ASCII PGM heatmaps, run reports."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_rows_csv(path, rows: list[dict], columns: list[str]):
    lines = [",".join(columns)]
    lines += [",".join(fmt(row[c]) for c in columns) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_matrix_csv(path, M: np.ndarray):
    lines = [",".join(f"{v:.9g}" for v in row) for row in np.asarray(M, dtype=np.float64)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_matrix_csv(path) -> np.ndarray:
    return np.array([[float(c) for c in line.split(",")] for line in Path(path).read_text().splitlines() if line])


def to_gray(M: np.ndarray) -> np.ndarray:
    """Min-max scale to integers 0..255; a constant matrix maps to 0."""
    M = np.asarray(M, dtype=np.float64)
    lo, hi = M.min(), M.max()
    if hi <= lo:
        return np.zeros(M.shape, dtype=np.int64)
    return np.rint((M - lo) / (hi - lo) * 255).astype(np.int64)


def write_pgm(path, M: np.ndarray):
    g = to_gray(M)
    h, w = g.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in g]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise ValueError("not an ASCII PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if vals.size != w * h or vals.max(initial=0) > maxval:
        raise ValueError("malformed PGM payload")
    return vals.reshape(h, w)


LOSS_COLUMNS = ["epoch", "l_contrastive", "weighted_tfa", "l_total"]


def write_losses(path, history, multimodal=False):
    cols = LOSS_COLUMNS + (["l_a_to_b", "l_b_to_a"] if multimodal else [])
    write_rows_csv(path, history, cols)


def class_rows(report):
    support = report.confusion.sum(axis=1)
    return [
        {"class": c, "precision": report.precision[c], "recall": report.recall[c], "f1": report.f1[c],
         "support": int(support[c])}
        for c in range(len(report.f1))
    ]


def summary_text(report, title: str, extra: dict | None = None) -> str:
    lines = [title, f"seed = {report.seed}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {fmt(v)}")
    if report.confusion is not None:
        lines.append(f"macro_f1 = {fmt(report.macro_f1)}")
        lines.append("per-class (precision, recall, f1, support):")
        for row in class_rows(report):
            lines.append(f"  {row['class']}: {fmt(row['precision'])} {fmt(row['recall'])} {fmt(row['f1'])} {row['support']}")
        lines.append("confusion (rows = true, cols = predicted):")
        lines += ["  " + " ".join(str(int(v)) for v in row) for row in report.confusion]
    return "\n".join(lines) + "\n"
