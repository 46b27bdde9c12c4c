"""Distance and soft-alignment heatmaps for a same-class and a cross-class window pair.

Pretrains a small TFA encoder (or loads one with --checkpoint) and writes
D.csv / D.pgm / E.csv / E.pgm under <out>/positive and <out>/negative.

    python scripts/alignment_heatmaps.py --out heatmaps
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from tempalign.artifacts import write_matrix_csv, write_pgm
from tempalign.data import generate_synthetic, normalize_channels
from tempalign.engine import load_checkpoint
from tempalign.training import ContrastiveNet, ModelConfig, PretrainConfig, alignment_matrices, pretrain_unimodal

log = logging.getLogger("alignment_heatmaps")


@dataclass
class Config:
    windows_per_class: int = 500
    data_seed: int = 42
    epochs: int = 30
    seed: int = 0
    gamma: float = 0.1
    anchor: int = 0
    checkpoint: str = ""
    out: str = "heatmaps"


def parse_args(argv=None) -> Config:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    for f in fields(Config):
        p.add_argument(f"--{f.name}", type=type(f.default), default=f.default)
    return Config(**vars(p.parse_args(argv)))


def band_ratio(D: np.ndarray, width: int = 3) -> float:
    """Mean on-band over mean off-band distance; below 1 means the diagonal band is closer."""
    i, j = np.indices(D.shape)
    band = np.abs(i * (D.shape[1] - 1) - j * (D.shape[0] - 1)) <= width * max(D.shape)
    return float(D[band].mean() / D[~band].mean())


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = parse_args(argv)
    ds = normalize_channels(generate_synthetic(4, cfg.windows_per_class, 50, 6, seed=cfg.data_seed))
    if cfg.checkpoint:
        net = ContrastiveNet(6, ModelConfig(), params=load_checkpoint(cfg.checkpoint))
    else:
        net, _ = pretrain_unimodal(ds, PretrainConfig(epochs=cfg.epochs, gamma=cfg.gamma, seed=cfg.seed))
    test = np.flatnonzero(ds.split == "test")
    a = test[cfg.anchor]
    pos = next(i for i in test if i != a and ds.y[i] == ds.y[a])
    neg = next(i for i in test if ds.y[i] != ds.y[a])
    for name, other in (("positive", pos), ("negative", neg)):
        D, E = alignment_matrices(net, ds.X[a], ds.X[other], gamma=cfg.gamma)
        out = Path(cfg.out) / name
        out.mkdir(parents=True, exist_ok=True)
        write_matrix_csv(out / "D.csv", D)
        write_pgm(out / "D.pgm", D)
        write_matrix_csv(out / "E.csv", E)
        write_pgm(out / "E.pgm", E)
        log.info("%s pair (%d, %d): classes %d/%d, mean distance %.4f, band ratio %.3f",
                 name, a, other, ds.y[a], ds.y[other], D.mean(), band_ratio(D))


if __name__ == "__main__":
    main()
