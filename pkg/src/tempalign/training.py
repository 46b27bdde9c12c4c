"""Contrastive pretraining with temporal feature alignment, frozen-encoder
fine-tuning, metrics, the label-budget protocol, and alignment analysis."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import augment
from .augment import AugmentationSpec
from .contrastive import cmc_loss, ntxent_loss
from .data import DataError, WindowedDataset, select_labeled_subset
from .engine import (
    L2NormRows,
    LayerSpec,
    ModelParams,
    Sequential,
    adam_step,
    classifier_specs,
    encoder_specs,
    fusion_specs,
    projection_specs,
    softmax_cross_entropy,
)
from .softdtw import l2_normalize_rows, pairwise_sq_distances, softdtw_grad, softdtw_value, tfa_loss_and_feature_grads


class TrainingError(ValueError):
    pass


def default_pipeline(probability: float = 0.75) -> list[AugmentationSpec]:
    return [
        AugmentationSpec("scale", {"sigma": 0.1}, probability),
        AugmentationSpec("rotate", {}, probability),
        AugmentationSpec("jitter", {"sigma": 0.05}, probability),
        AugmentationSpec("shift", {}, probability),
    ]


@dataclass
class ModelConfig:
    hidden: int = 32
    layers: int = 3
    kernel: int = 5
    stride: int = 1
    padding: str = "same"
    proj_dim: int = 32


@dataclass
class PretrainConfig:
    mode: str = "unimodal"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    tau: float = 0.1
    gamma: float = 0.1
    alpha: float = 0.1
    tfa_enabled: bool = True
    literal_delta: bool = False
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    model_b: ModelConfig | None = None
    aug: list = field(default_factory=default_pipeline)
    aug_b: list = field(default_factory=default_pipeline)

    def __post_init__(self):
        if self.mode not in ("unimodal", "multimodal"):
            raise TrainingError(f"mode must be unimodal or multimodal, got {self.mode!r}")
        if not (self.tau > 0 and self.gamma > 0):
            raise TrainingError("tau and gamma must be positive")
        if self.alpha < 0:
            raise TrainingError("alpha must be non-negative")
        if self.batch_size < 2:
            raise TrainingError("batch_size must be at least 2")
        if self.epochs < 1:
            raise TrainingError("epochs must be at least 1")


@dataclass
class FinetuneConfig:
    arch: str = "linear"
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 64
    flatten: bool = False
    dropout: float = 0.2
    fusion_width: int = 128
    seed: int = 0


@dataclass
class MetricsReport:
    history: list = field(default_factory=list)
    macro_f1: float = float("nan")
    precision: np.ndarray | None = None
    recall: np.ndarray | None = None
    f1: np.ndarray | None = None
    confusion: np.ndarray | None = None
    wall_clock: float = 0.0
    seed: int = 0
    extra: dict = field(default_factory=dict)


class ContrastiveNet:
    """Convolutional encoder plus projection head over one ``ModelParams``."""

    def __init__(self, in_channels: int, cfg: ModelConfig = ModelConfig(), params: ModelParams | None = None,
                 seed: int = 0):
        self.in_channels = in_channels
        self.cfg = cfg
        fresh = params is None
        self.params = ModelParams() if fresh else params
        enc = encoder_specs(in_channels, cfg.hidden, cfg.layers, cfg.kernel, cfg.stride, cfg.padding)
        self.encoder = Sequential(enc, self.params, "enc.")
        self.head = Sequential(projection_specs(cfg.hidden, cfg.proj_dim), self.params, "proj.")
        if fresh:
            rng = np.random.default_rng(seed)
            self.encoder.init(rng)
            self.head.init(rng)
        else:
            probe = ModelParams()
            Sequential(enc, probe, "enc.").init(np.random.default_rng(0))
            Sequential(projection_specs(cfg.hidden, cfg.proj_dim), probe, "proj.").init(np.random.default_rng(0))
            for name, arr in probe.values.items():
                if name not in self.params.values or self.params.values[name].shape != arr.shape:
                    raise TrainingError(f"parameter {name!r} missing or mis-shaped for this model config")

    def encode(self, X, train=False):
        return self.encoder.forward(np.asarray(X, dtype=np.float64), train)

    def project(self, H, train=False):
        return self.head.forward(H, train)

    def features(self, X, flatten=False, chunk=256):
        """Frozen features: temporal mean (or flattened sequence) of the encoder output."""
        out = []
        for s in range(0, len(X), chunk):
            H = self.encode(X[s : s + chunk])
            self.encoder.layers[-1].cache = None
            out.append(H.reshape(len(H), -1) if flatten else H.mean(axis=1))
        for layer in self.encoder.layers:
            layer.cache = None
        return np.concatenate(out)


def _rng_streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[s : s + batch_size] for s in range(0, n - batch_size + 1, batch_size)]


def _views(X, pipeline, rng):
    """Interleaved two-view batch: rows 2k and 2k+1 are views of instance k."""
    V = np.empty((2 * len(X),) + X.shape[1:])
    for k, x in enumerate(X):
        V[2 * k], V[2 * k + 1] = augment.make_views(x, pipeline, rng) if pipeline else (x, x)
    return V


def _train_split(ds: WindowedDataset) -> np.ndarray:
    # labels are dropped before anything reaches the pretraining loop
    return ds.part("train").without_labels().X


def unimodal_step(net: ContrastiveNet, V: np.ndarray, cfg: PretrainConfig, tfa_branch: bool = True):
    """Forward + backward for one interleaved view batch; accumulates grads.

    Returns (contrastive, raw tfa or nan, total, gradient w.r.t. V).
    """
    H = net.encode(V, train=True)
    Z = net.project(H, train=True)
    l_c, gZ = ntxent_loss(Z, cfg.tau, cfg.literal_delta)
    gH = net.head.backward(gZ)
    l_tfa = float("nan")
    total = l_c
    if tfa_branch and cfg.tfa_enabled:
        norm = L2NormRows(LayerSpec("l2norm_rows"), "tfa.norm")
        Hn = norm.forward(H, net.params)
        l_tfa, ga, gb = tfa_loss_and_feature_grads(Hn[0::2], Hn[1::2], cfg.gamma)
        gHn = np.empty_like(Hn)
        gHn[0::2] = cfg.alpha * ga
        gHn[1::2] = cfg.alpha * gb
        gH = gH + norm.backward(gHn, net.params)
        total = l_c + cfg.alpha * l_tfa
    gX = net.encoder.backward(gH)
    return l_c, l_tfa, total, gX


def _epoch_row(epoch, rows, alpha, tfa_on):
    arr = np.array(rows)
    l_c = float(arr[:, 0].mean())
    l_tfa = float(arr[:, 1].mean()) if tfa_on else float("nan")
    return {
        "epoch": epoch,
        "l_contrastive": l_c,
        # + 0.0 turns the -0.0 of alpha = 0 times a negative cost into 0.0
        "weighted_tfa": alpha * l_tfa + 0.0 if tfa_on else 0.0,
        "l_total": float(arr[:, 2].mean()),
        "l_tfa": l_tfa,
    }


def pretrain_unimodal(ds: WindowedDataset, cfg: PretrainConfig, tfa_branch: bool = True, on_epoch=None):
    """Two augmented views per instance through one shared encoder.

    ``tfa_branch=False`` removes the alignment computation entirely, which
    is how alpha = 0 runs are compared against plain contrastive training.
    """
    if cfg.mode != "unimodal":
        raise TrainingError("pretrain_unimodal needs mode=unimodal")
    X = _train_split(ds)
    if cfg.batch_size > len(X):
        raise TrainingError(f"batch_size {cfg.batch_size} exceeds the {len(X)} training windows")
    init_rng, shuffle_rng, aug_rng = _rng_streams(cfg.seed, 3)
    net = ContrastiveNet(ds.num_channels, cfg.model, seed=int(init_rng.integers(2**63)))
    tfa_on = tfa_branch and cfg.tfa_enabled
    report = MetricsReport(seed=cfg.seed)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        rows = []
        for idx in _batches(len(X), cfg.batch_size, shuffle_rng):
            V = _views(X[idx], cfg.aug, aug_rng)
            l_c, l_tfa, total, _ = unimodal_step(net, V, cfg, tfa_branch)
            adam_step(net.params, cfg.lr)
            net.params.zero_grads()
            rows.append((l_c, l_tfa, total))
        report.history.append(_epoch_row(epoch, rows, cfg.alpha, tfa_on))
        if on_epoch is not None:
            on_epoch(report.history[-1])
    report.wall_clock = time.perf_counter() - t0
    return net, report


def multimodal_step(net_a: ContrastiveNet, net_b: ContrastiveNet, Xa, Xb, cfg: PretrainConfig, tfa_branch=True):
    Ha = net_a.encode(Xa, train=True)
    Hb = net_b.encode(Xb, train=True)
    Za = net_a.project(Ha, train=True)
    Zb = net_b.project(Hb, train=True)
    l_c, gZa, gZb, parts = cmc_loss(Za, Zb, cfg.tau, cfg.literal_delta, return_parts=True)
    gHa = net_a.head.backward(gZa)
    gHb = net_b.head.backward(gZb)
    l_tfa = float("nan")
    total = l_c
    if tfa_branch and cfg.tfa_enabled:
        na = L2NormRows(LayerSpec("l2norm_rows"), "tfa.a")
        nb = L2NormRows(LayerSpec("l2norm_rows"), "tfa.b")
        l_tfa, ga, gb = tfa_loss_and_feature_grads(na.forward(Ha, None), nb.forward(Hb, None), cfg.gamma)
        gHa = gHa + na.backward(cfg.alpha * ga, None)
        gHb = gHb + nb.backward(cfg.alpha * gb, None)
        total = l_c + cfg.alpha * l_tfa
    net_a.encoder.backward(gHa)
    net_b.encoder.backward(gHb)
    return l_c, l_tfa, total, parts


def pretrain_multimodal(ds_a: WindowedDataset, ds_b: WindowedDataset, cfg: PretrainConfig, tfa_branch=True,
                        on_epoch=None):
    if cfg.mode != "multimodal":
        raise TrainingError("pretrain_multimodal needs mode=multimodal")
    if len(ds_a) != len(ds_b) or not np.array_equal(ds_a.split, ds_b.split):
        raise TrainingError(f"streams are not index-aligned ({len(ds_a)} vs {len(ds_b)} windows)")
    Xa, Xb = _train_split(ds_a), _train_split(ds_b)
    if cfg.batch_size > len(Xa):
        raise TrainingError(f"batch_size {cfg.batch_size} exceeds the {len(Xa)} training windows")
    init_rng, shuffle_rng, aug_rng = _rng_streams(cfg.seed, 3)
    net_a = ContrastiveNet(ds_a.num_channels, cfg.model, seed=int(init_rng.integers(2**63)))
    net_b = ContrastiveNet(ds_b.num_channels, cfg.model_b or cfg.model, seed=int(init_rng.integers(2**63)))
    if net_a.cfg.proj_dim != net_b.cfg.proj_dim or net_a.cfg.hidden != net_b.cfg.hidden:
        raise TrainingError("both streams need the same projection size and feature width")
    tfa_on = tfa_branch and cfg.tfa_enabled
    report = MetricsReport(seed=cfg.seed)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        rows, directed = [], []
        for idx in _batches(len(Xa), cfg.batch_size, shuffle_rng):
            Va = augment.augment_batch(Xa[idx], cfg.aug, aug_rng)
            Vb = augment.augment_batch(Xb[idx], cfg.aug_b, aug_rng)
            l_c, l_tfa, total, parts = multimodal_step(net_a, net_b, Va, Vb, cfg, tfa_branch)
            adam_step(net_a.params, cfg.lr)
            adam_step(net_b.params, cfg.lr)
            net_a.params.zero_grads()
            net_b.params.zero_grads()
            rows.append((l_c, l_tfa, total))
            directed.append(parts)
        row = _epoch_row(epoch, rows, cfg.alpha, tfa_on)
        d = np.array(directed)
        row["l_a_to_b"] = float(d[:, 0].mean())
        row["l_b_to_a"] = float(d[:, 1].mean())
        report.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    report.wall_clock = time.perf_counter() - t0
    return (net_a, net_b), report


# ---------------------------------------------------------------- metrics


def evaluate_macro_f1(y_true, y_pred, num_classes: int) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise TrainingError("y_true and y_pred lengths differ")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise TrainingError(f"label outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_count = cm.sum(axis=0)
    true_count = cm.sum(axis=1)
    precision = np.divide(tp, pred_count, out=np.zeros(num_classes), where=pred_count > 0)
    recall = np.divide(tp, true_count, out=np.zeros(num_classes), where=true_count > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0)
    return MetricsReport(macro_f1=float(f1.mean()), precision=precision, recall=recall, f1=f1, confusion=cm)


# ---------------------------------------------------------------- fine-tuning


class FusionClassifier:
    """Per-stream affine + batchnorm + relu to a common width, concatenated,
    then a linear classifier."""

    def __init__(self, in_a: int, in_b: int, num_classes: int, width: int = 128, seed: int = 0,
                 params: ModelParams | None = None):
        fresh = params is None
        self.params = ModelParams() if fresh else params
        self.fuse_a = Sequential(fusion_specs(in_a, width), self.params, "fuse_a.")
        self.fuse_b = Sequential(fusion_specs(in_b, width), self.params, "fuse_b.")
        self.head = Sequential(classifier_specs(2 * width, num_classes), self.params, "cls.")
        if fresh:
            rng = np.random.default_rng(seed)
            for seq in (self.fuse_a, self.fuse_b, self.head):
                seq.init(rng)
        self.width = width

    def forward(self, Fa, Fb, train=False):
        return self.head.forward(np.concatenate([self.fuse_a.forward(Fa, train), self.fuse_b.forward(Fb, train)], 1), train)

    def backward(self, g):
        g = self.head.backward(g)
        self.fuse_a.backward(g[:, : self.width])
        self.fuse_b.backward(g[:, self.width :])


def _fit(forward, backward, params, inputs, y, cfg: FinetuneConfig, rng):
    n = len(y)
    bs = min(cfg.batch_size, n)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        losses = []
        for s in range(0, n, bs):
            idx = perm[s : s + bs]
            if len(idx) < 2 and n >= 2:
                continue
            logits = forward([x[idx] for x in inputs], True, rng)
            loss, g = softmax_cross_entropy(logits, y[idx])
            backward(g)
            adam_step(params, cfg.lr)
            params.zero_grads()
            losses.append(loss)
        history.append({"epoch": epoch, "l_classifier": float(np.mean(losses))})
    return history


def train_classifier(F: np.ndarray, y: np.ndarray, num_classes: int, cfg: FinetuneConfig):
    clf = Sequential(classifier_specs(F.shape[1], num_classes, cfg.arch, cfg.dropout), ModelParams(), "cls.")
    rng = np.random.default_rng(cfg.seed)
    clf.init(rng)
    history = _fit(lambda xs, train, r: clf.forward(xs[0], train, r), clf.backward, clf.params, [F], y, cfg, rng)
    return clf, history


def predict(clf: Sequential, F: np.ndarray) -> np.ndarray:
    return clf.forward(F, train=False).argmax(axis=1)


def _labeled(ds):
    if ds.y is None:
        raise DataError("fine-tuning needs a labeled dataset")


def finetune(net: ContrastiveNet, ds: WindowedDataset, cfg: FinetuneConfig = FinetuneConfig()):
    """Train a classifier on frozen encoder features; report test metrics."""
    _labeled(ds)
    t0 = time.perf_counter()
    F = net.features(ds.X, cfg.flatten)
    train = ds.split == "train"
    clf, history = train_classifier(F[train], ds.y[train], ds.num_classes, cfg)
    test = ds.split == "test"
    report = evaluate_macro_f1(ds.y[test], predict(clf, F[test]), ds.num_classes)
    report.history = history
    report.seed = cfg.seed
    report.wall_clock = time.perf_counter() - t0
    return clf, report


def _fit_fusion(Fa, Fb, y, num_classes, cfg: FinetuneConfig):
    rng = np.random.default_rng(cfg.seed)
    model = FusionClassifier(Fa.shape[1], Fb.shape[1], num_classes, cfg.fusion_width, int(rng.integers(2**63)))
    model.history = _fit(lambda xs, train_, r: model.forward(xs[0], xs[1], train_), model.backward, model.params,
                         [Fa, Fb], y, cfg, rng)
    return model


def finetune_multimodal(nets, ds_a: WindowedDataset, ds_b: WindowedDataset, cfg: FinetuneConfig = FinetuneConfig()):
    _labeled(ds_a)
    net_a, net_b = nets
    t0 = time.perf_counter()
    Fa, Fb = net_a.features(ds_a.X, cfg.flatten), net_b.features(ds_b.X, cfg.flatten)
    train = ds_a.split == "train"
    test = ds_a.split == "test"
    model = _fit_fusion(Fa[train], Fb[train], ds_a.y[train], ds_a.num_classes, cfg)
    history = model.history
    pred = model.forward(Fa[test], Fb[test]).argmax(axis=1)
    report = evaluate_macro_f1(ds_a.y[test], pred, ds_a.num_classes)
    report.history = history
    report.seed = cfg.seed
    report.wall_clock = time.perf_counter() - t0
    return model, report


# ---------------------------------------------------------------- label-budget protocol


def derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


def mean_ci(values) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(len(v)) if len(v) > 1 else 0.0
    return mean, mean - half, mean + half


def semi_supervised_protocol(net, ds: WindowedDataset, grid, repeats: int = 10, seed: int = 0,
                             cfg: FinetuneConfig = FinetuneConfig(), mode: str = "k", jobs: int = 1,
                             ds_b: WindowedDataset | None = None):
    """Fine-tune on ``repeats`` random labeled subsets per grid value.

    ``mode='k'`` draws k windows per class, ``mode='p'`` a fraction of the
    train split. ``net`` may be a pair of encoders, in which case ``ds_b``
    holds the second stream and the fusion classifier is trained. Returns
    one row per grid value, in grid order.
    """
    if repeats < 2:
        raise TrainingError("repeats must be at least 2")
    if mode not in ("k", "p"):
        raise TrainingError(f"mode must be 'k' or 'p', got {mode!r}")
    _labeled(ds)
    test = ds.split == "test"
    if ds_b is None:
        F = net.features(ds.X, cfg.flatten)

        def fit_eval(train_idx, run_cfg):
            clf, _ = train_classifier(F[train_idx], ds.y[train_idx], ds.num_classes, run_cfg)
            return predict(clf, F[test])
    else:
        Fa, Fb = net[0].features(ds.X, cfg.flatten), net[1].features(ds_b.X, cfg.flatten)

        def fit_eval(train_idx, run_cfg):
            model = _fit_fusion(Fa[train_idx], Fb[train_idx], ds.y[train_idx], ds.num_classes, run_cfg)
            return model.forward(Fa[test], Fb[test]).argmax(axis=1)

    def run(task):
        gi, rep, value = task
        sub = select_labeled_subset(ds, derived_seed(seed, gi, rep), **({"k": int(value)} if mode == "k" else {"p": float(value)}))
        train_idx = sub.meta["source_index"][sub.split == "train"]
        run_cfg = FinetuneConfig(**{**cfg.__dict__, "seed": derived_seed(seed, gi, rep, 1)})
        return evaluate_macro_f1(ds.y[test], fit_eval(train_idx, run_cfg), ds.num_classes).macro_f1

    tasks = [(gi, rep, value) for gi, value in enumerate(grid) for rep in range(repeats)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(run, tasks))
    else:
        scores = [run(t) for t in tasks]
    rows = []
    for gi, value in enumerate(grid):
        vals = scores[gi * repeats : (gi + 1) * repeats]
        mean, lo, hi = mean_ci(vals)
        rows.append({"k_or_p": value, "mean_f1": mean, "ci_low": lo, "ci_high": hi, "repeats": repeats,
                     "scores": vals})
    return rows


# ---------------------------------------------------------------- alignment analysis


def alignment_matrices(net: ContrastiveNet, w1: np.ndarray, w2: np.ndarray, gamma: float = 0.1,
                       net_b: ContrastiveNet | None = None):
    """Distance matrix between row-normalized encoder features of two windows
    and the corresponding soft alignment matrix. ``net_b`` encodes ``w2``
    when the windows come from different streams."""
    h1 = _encode_one(net, w1)
    h2 = _encode_one(net if net_b is None else net_b, w2)
    D = pairwise_sq_distances(l2_normalize_rows(h1), l2_normalize_rows(h2))
    _, table = softdtw_value(D, gamma)
    return D, softdtw_grad(D, table)


def _encode_one(net, w):
    H = net.encode(np.asarray(w, dtype=np.float64)[None])[0]
    for layer in net.encoder.layers:
        layer.cache = None
    return H


def triplet_alignment_scores(net: ContrastiveNet, ds: WindowedDataset, n_triplets: int = 50, seed: int = 0,
                             split: str = "test"):
    """Mean normalized feature distance for (anchor, positive, negative) triplets.

    Positives share the anchor's class, negatives do not. Returns an array of
    (positive mean distance, negative mean distance) rows.
    """
    _labeled(ds)
    rng = np.random.default_rng(seed)
    idx = np.flatnonzero(ds.split == split)
    y = ds.y[idx]
    Hn = l2_normalize_rows(net.encode(ds.X[idx]))
    for layer in net.encoder.layers:
        layer.cache = None
    out = []
    for _ in range(n_triplets):
        a = int(rng.integers(len(idx)))
        same = np.flatnonzero((y == y[a]) & (np.arange(len(idx)) != a))
        diff = np.flatnonzero(y != y[a])
        p, n = int(rng.choice(same)), int(rng.choice(diff))
        out.append((pairwise_sq_distances(Hn[a], Hn[p]).mean(), pairwise_sq_distances(Hn[a], Hn[n]).mean()))
    return np.array(out)
