"""Probe macro-F1 of TFA, plain contrastive and random encoders over several seeds.

    python scripts/ssl_benefit.py --seeds 3 --epochs 30 --out ssl_benefit.csv
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import dataclass, fields

import numpy as np

from tempalign.artifacts import write_rows_csv
from tempalign.data import generate_synthetic, normalize_channels
from tempalign.training import ContrastiveNet, FinetuneConfig, ModelConfig, PretrainConfig, derived_seed, finetune, \
    pretrain_unimodal, triplet_alignment_scores

log = logging.getLogger("ssl_benefit")


@dataclass
class Config:
    num_classes: int = 4
    windows_per_class: int = 500
    window_len: int = 50
    channels: int = 6
    data_seed: int = 42
    orientation: bool = True
    seeds: int = 3
    epochs: int = 30
    batch_size: int = 32
    alpha: float = 0.1
    triplets: int = 500
    out: str = ""


def parse_args(argv=None) -> Config:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    for f in fields(Config):
        if f.type == "bool":
            p.add_argument(f"--{f.name}", type=lambda s: s.lower() in ("1", "true", "yes"), default=f.default)
        else:
            p.add_argument(f"--{f.name}", type=type(f.default), default=f.default)
    return Config(**vars(p.parse_args(argv)))


def run(cfg: Config) -> list[dict]:
    ds = normalize_channels(generate_synthetic(cfg.num_classes, cfg.windows_per_class, cfg.window_len, cfg.channels,
                                               seed=cfg.data_seed, orientation=cfg.orientation))
    rows = []
    for seed in range(cfg.seeds):
        nets = {"random": ContrastiveNet(cfg.channels, ModelConfig(), seed=derived_seed(seed, 99))}
        for name, alpha in (("contrastive", 0.0), ("tfa", cfg.alpha)):
            pc = PretrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, alpha=alpha, seed=seed)
            nets[name], _ = pretrain_unimodal(ds, pc, tfa_branch=alpha > 0)
        for name, net in nets.items():
            f1 = finetune(net, ds, FinetuneConfig())[1].macro_f1
            sc = triplet_alignment_scores(net, ds, n_triplets=cfg.triplets, seed=seed)
            rows.append({"seed": seed, "encoder": name, "macro_f1": f1,
                         "triplet_rate": float(np.mean(sc[:, 0] < sc[:, 1]))})
            log.info("seed %d %-11s f1 %.3f triplets %.3f", seed, name, f1, rows[-1]["triplet_rate"])
    return rows


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = parse_args(argv)
    rows = run(cfg)
    print(f"{'encoder':<12} {'macro_f1':>16} {'triplet_rate':>16}")
    for name in ("random", "contrastive", "tfa"):
        f1 = np.array([r["macro_f1"] for r in rows if r["encoder"] == name])
        tr = np.array([r["triplet_rate"] for r in rows if r["encoder"] == name])
        print(f"{name:<12} {f1.mean():>8.3f} +- {f1.std():.3f} {tr.mean():>8.3f} +- {tr.std():.3f}")
    if cfg.out:
        write_rows_csv(cfg.out, rows, ["seed", "encoder", "macro_f1", "triplet_rate"])


if __name__ == "__main__":
    main()
