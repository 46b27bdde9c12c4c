"""``tempalign <subcommand> [--config FILE] [--set key=value ...] [--seed N] [--out DIR] [--jobs N]``

Exit status: 0 on success, 1 on configuration errors, 2 on runtime or
numeric failures (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .augment import AugmentationError
from .config import ConfigError, RunConfig, parse_config
from .contrastive import ContrastiveError
from .data import CsvSchema, DataError, generate_synthetic, generate_synthetic_pair, load_manifest, \
    normalize_channels, write_dataset
from .engine import EngineError, ModelParams, Sequential, classifier_specs, fusion_specs, load_checkpoint, \
    merge_params, save_checkpoint, split_params
from .gradcheck import run_all
from .softdtw import AlignmentError
from .training import ContrastiveNet, FusionClassifier, TrainingError, alignment_matrices, derived_seed, \
    evaluate_macro_f1, finetune, finetune_multimodal, predict, pretrain_multimodal, pretrain_unimodal, \
    semi_supervised_protocol

log = logging.getLogger("tempalign")

SUBCOMMANDS = ("synth", "pretrain", "finetune", "eval", "semisup", "align", "gradcheck")
RUNTIME_ERRORS = (DataError, AugmentationError, TrainingError, EngineError, AlignmentError, ContrastiveError,
                  OSError, FloatingPointError)


def _require(cfg: RunConfig, key: str) -> str:
    if not cfg[key]:
        raise ConfigError(f"{key}: required by this subcommand")
    return cfg[key]


def _multimodal(cfg: RunConfig) -> bool:
    return cfg["pretrain.mode"] == "multimodal"


def load_data(cfg: RunConfig, normalize: bool | None = None):
    """Dataset(s) named by the config: manifest files, else synthetic data.

    Returns ``(ds_a, ds_b)``; ``ds_b`` is None for unimodal runs.
    """
    v = cfg.values
    multi = _multimodal(cfg)
    if v["data.manifest"]:
        schema = CsvSchema(label_column=v["data.label_column"] or None, sample_rate_hz=v["data.sample_rate"])
        ds_a = load_manifest(v["data.manifest"], v["data.window_len"], v["data.overlap"], schema, v["data.num_classes"])
        ds_b = None
        if multi:
            path_b = _require(cfg, "data.manifest_b")
            ds_b = load_manifest(path_b, v["data.window_len_b"], v["data.overlap"], schema, v["data.num_classes"])
    elif multi:
        ds_a, ds_b = generate_synthetic_pair(v["data.num_classes"], v["data.windows_per_class"], v["data.window_len"],
                                             v["data.channels"], v["data.window_len_b"], v["data.channels_b"],
                                             v["data.seed"], v["data.noise"], v["data.f0"],
                                             orientation=v["data.orientation"])
    else:
        ds_a = generate_synthetic(v["data.num_classes"], v["data.windows_per_class"], v["data.window_len"],
                                  v["data.channels"], v["data.seed"], v["data.noise"], v["data.f0"],
                                  orientation=v["data.orientation"])
        ds_b = None
    if v["data.normalize"] if normalize is None else normalize:
        ds_a = normalize_channels(ds_a)
        ds_b = None if ds_b is None else normalize_channels(ds_b)
    return ds_a, ds_b


def load_nets(cfg: RunConfig, ds_a, ds_b):
    params = load_checkpoint(_require(cfg, "io.checkpoint"))
    stored_multi = any(n.startswith("a/") for n in params.values)
    if stored_multi != _multimodal(cfg):
        kind = "multimodal" if stored_multi else "unimodal"
        raise ConfigError(f"pretrain.mode: checkpoint is {kind} but pretrain.mode = {cfg['pretrain.mode']}")
    if not stored_multi:
        return ContrastiveNet(ds_a.num_channels, cfg.model_config("a"), params)
    return (ContrastiveNet(ds_a.num_channels, cfg.model_config("a"), split_params(params, "a")),
            ContrastiveNet(ds_b.num_channels, cfg.model_config("b"), split_params(params, "b")))


def random_nets(cfg: RunConfig, ds_a, ds_b):
    seed = derived_seed(cfg["run.seed"], 99)
    if ds_b is None:
        return ContrastiveNet(ds_a.num_channels, cfg.model_config("a"), seed=seed)
    return (ContrastiveNet(ds_a.num_channels, cfg.model_config("a"), seed=seed),
            ContrastiveNet(ds_b.num_channels, cfg.model_config("b"), seed=seed + 1))


def _write_report(out: Path, report, title: str, extra: dict):
    rows = artifacts.class_rows(report)
    rows.append({"class": "macro", "precision": float(report.precision.mean()), "recall": float(report.recall.mean()),
                 "f1": report.macro_f1, "support": int(report.confusion.sum())})
    artifacts.write_rows_csv(out / "metrics.csv", rows, ["class", "precision", "recall", "f1", "support"])
    (out / "summary.txt").write_text(artifacts.summary_text(report, title, extra), encoding="utf-8")


# ---------------------------------------------------------------- subcommands


def cmd_synth(cfg: RunConfig, out: Path, args) -> int:
    ds_a, ds_b = load_data(cfg, normalize=False)
    manifest = write_dataset(out / "data", ds_a, cfg["data.sample_rate"])
    lines = ["synth", f"manifest = {manifest.relative_to(out)}", f"windows = {len(ds_a)}",
             f"window_len = {ds_a.window_len}", f"channels = {ds_a.num_channels}"]
    if ds_b is not None:
        manifest_b = write_dataset(out / "data", ds_b, cfg["data.sample_rate"], prefix="b_")
        lines += [f"manifest_b = {manifest_b.relative_to(out)}", f"window_len_b = {ds_b.window_len}",
                  f"channels_b = {ds_b.num_channels}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_pretrain(cfg: RunConfig, out: Path, args) -> int:
    ds_a, ds_b = load_data(cfg)
    pc = cfg.pretrain_config()

    def progress(row):
        log.info("epoch %d  l_contrastive %.4f  weighted_tfa %.4f", row["epoch"], row["l_contrastive"],
                 row["weighted_tfa"])

    if ds_b is None:
        net, report = pretrain_unimodal(ds_a, pc, on_epoch=progress)
        params = net.params
    else:
        (net_a, net_b), report = pretrain_multimodal(ds_a, ds_b, pc, on_epoch=progress)
        params = merge_params({"a": net_a.params, "b": net_b.params})
    log.info("pretraining took %.1f s", report.wall_clock)
    save_checkpoint(out / "checkpoint.bin", params)
    artifacts.write_losses(out / "losses.csv", report.history, multimodal=ds_b is not None)
    last = report.history[-1] if report.history else {}
    lines = [f"pretrain ({pc.mode})", f"seed = {pc.seed}", f"epochs = {pc.epochs}",
             f"train_windows = {int((ds_a.split == 'train').sum())}"]
    lines += [f"final_{k} = {artifacts.fmt(v)}" for k, v in last.items() if k != "epoch"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_finetune(cfg: RunConfig, out: Path, args) -> int:
    ds_a, ds_b = load_data(cfg)
    nets = load_nets(cfg, ds_a, ds_b)
    fc = cfg.finetune_config()
    if ds_b is None:
        clf, report = finetune(nets, ds_a, fc)
        params = clf.params
    else:
        model, report = finetune_multimodal(nets, ds_a, ds_b, fc)
        params = model.params
    log.info("fine-tuning took %.1f s, test macro-F1 %.4f", report.wall_clock, report.macro_f1)
    save_checkpoint(out / "classifier.bin", params)
    artifacts.write_rows_csv(out / "finetune_losses.csv", report.history, ["epoch", "l_classifier"])
    _write_report(out, report, "finetune", {"split": "test", "arch": fc.arch if ds_b is None else "fusion"})
    return 0


def _expected(specs_by_prefix) -> ModelParams:
    probe = ModelParams()
    rng = np.random.default_rng(0)
    for prefix, specs in specs_by_prefix:
        Sequential(specs, probe, prefix).init(rng)
    return probe


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    ds_a, ds_b = load_data(cfg)
    nets = load_nets(cfg, ds_a, ds_b)
    fc = cfg.finetune_config()
    path = _require(cfg, "io.classifier")
    test = ds_a.split == "test"
    C = ds_a.num_classes
    if ds_b is None:
        F = nets.features(ds_a.X[test], fc.flatten)
        specs = classifier_specs(F.shape[1], C, fc.arch, fc.dropout)
        clf = Sequential(specs, load_checkpoint(path, _expected([("cls.", specs)])), "cls.")
        pred = predict(clf, F)
    else:
        Fa, Fb = nets[0].features(ds_a.X[test], fc.flatten), nets[1].features(ds_b.X[test], fc.flatten)
        w = fc.fusion_width
        expect = _expected([("fuse_a.", fusion_specs(Fa.shape[1], w)), ("fuse_b.", fusion_specs(Fb.shape[1], w)),
                            ("cls.", classifier_specs(2 * w, C))])
        model = FusionClassifier(Fa.shape[1], Fb.shape[1], C, w, params=load_checkpoint(path, expect))
        pred = model.forward(Fa, Fb).argmax(axis=1)
    report = evaluate_macro_f1(ds_a.y[test], pred, C)
    report.seed = cfg["run.seed"]
    _write_report(out, report, "eval", {"split": "test", "windows": int(test.sum())})
    return 0


def cmd_semisup(cfg: RunConfig, out: Path, args) -> int:
    ds_a, ds_b = load_data(cfg)
    grid = cfg.grid()
    mode = cfg["semisup.mode"]
    fc = cfg.finetune_config()
    variants = [("semisup", load_nets(cfg, ds_a, ds_b))]
    if cfg["semisup.include_random"]:
        variants.append(("semisup_random", random_nets(cfg, ds_a, ds_b)))
    lines = ["semisup", f"seed = {cfg['run.seed']}", f"mode = {mode}", f"repeats = {cfg['semisup.repeats']}"]
    for name, nets in variants:
        rows = semi_supervised_protocol(nets, ds_a, grid, cfg["semisup.repeats"], cfg["run.seed"], fc, mode,
                                        args.jobs, ds_b)
        artifacts.write_rows_csv(out / f"{name}.csv", [dict(r, **{mode: r["k_or_p"]}) for r in rows],
                                 [mode, "mean_f1", "ci_low", "ci_high", "repeats"])
        runs = [{mode: r["k_or_p"], "repeat": i, "macro_f1": s} for r in rows for i, s in enumerate(r["scores"])]
        artifacts.write_rows_csv(out / f"{name}_runs.csv", runs, [mode, "repeat", "macro_f1"])
        lines += [f"{name} {mode}={artifacts.fmt(r['k_or_p'])}: {artifacts.fmt(r['mean_f1'])} "
                  f"[{artifacts.fmt(r['ci_low'])}, {artifacts.fmt(r['ci_high'])}]" for r in rows]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_align(cfg: RunConfig, out: Path, args) -> int:
    ds_a, ds_b = load_data(cfg)
    nets = load_nets(cfg, ds_a, ds_b)
    split = cfg["align.split"]
    part_a = ds_a.part(split)
    part_b = part_a if ds_b is None else ds_b.part(split)
    i, j = cfg["align.index_a"], cfg["align.index_b"]
    for key, idx, part in (("align.index_a", i, part_a), ("align.index_b", j, part_b)):
        if not 0 <= idx < len(part):
            raise ConfigError(f"{key}: index {idx} outside the {len(part)} windows of split {split!r}")
    gamma = cfg["loss.gamma"]
    if ds_b is None:
        D, E = alignment_matrices(nets, part_a.X[i], part_b.X[j], gamma)
    else:
        D, E = alignment_matrices(nets[0], part_a.X[i], part_b.X[j], gamma, net_b=nets[1])
    heat = out / "heatmaps"
    heat.mkdir(exist_ok=True)
    for name, M in (("D", D), ("E", E)):
        artifacts.write_matrix_csv(heat / f"{name}.csv", M)
        artifacts.write_pgm(heat / f"{name}.pgm", M)
    lines = ["align", f"split = {split}", f"index_a = {i}", f"index_b = {j}", f"gamma = {artifacts.fmt(gamma)}",
             f"shape = {D.shape[0]}x{D.shape[1]}", f"mean_distance = {artifacts.fmt(D.mean())}",
             f"expected_path_cost = {artifacts.fmt(float((D * E).sum()))}"]
    if part_a.y is not None:
        lines += [f"label_a = {int(part_a.y[i])}", f"label_b = {int(part_b.y[j])}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> int:
    results = run_all(cfg["run.seed"], cfg["gradcheck.epsilon"], cfg["gradcheck.tolerance"], cfg["gradcheck.max_coords"])
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}  tolerance={r.tolerance:.1e}  "
             f"{'PASS' if r.passed else 'FAIL'}" for r in results]
    worst = max(r.max_rel_error for r in results)
    ok = all(r.passed for r in results)
    lines.append(f"overall max_rel_error={worst:.3e}  {'PASS' if ok else 'FAIL'}")
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(lines[-1])
    return 0 if ok else 2


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "semisup": cmd_semisup,
    "align": cmd_align,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempalign", description="Temporally-aligned contrastive pretraining.")
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for semisup")
    parser.add_argument("--quiet", action="store_true", help="only log warnings")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        if args.config is not None and not Path(args.config).is_file():
            raise ConfigError(f"--config: cannot read {args.config}")
        if args.jobs < 1:
            raise ConfigError("--jobs: must be at least 1")
        overrides = list(args.set) + ([f"run.seed={args.seed}"] if args.seed is not None else [])
        cfg = parse_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo").write_text(cfg.echo(), encoding="utf-8")
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
