import numpy as np
import pytest

from tempalign.contrastive import ntxent_loss
from tempalign.data import DataError, generate_synthetic, generate_synthetic_pair, normalize_channels
from tempalign.engine import serialize_params
from tempalign.gradcheck import TINY_MODEL, multimodal_pipeline_error, unimodal_pipeline_error
from tempalign.training import (
    ContrastiveNet,
    FinetuneConfig,
    ModelConfig,
    PretrainConfig,
    TrainingError,
    _epoch_row,
    alignment_matrices,
    evaluate_macro_f1,
    finetune,
    finetune_multimodal,
    mean_ci,
    multimodal_step,
    pretrain_multimodal,
    pretrain_unimodal,
    semi_supervised_protocol,
    triplet_alignment_scores,
    unimodal_step,
)

SMALL = ModelConfig(hidden=8, layers=2, kernel=3, proj_dim=8)


@pytest.fixture(scope="module")
def ds():
    return normalize_channels(generate_synthetic(3, 30, 16, 6, seed=0))


def quick(**kw):
    return PretrainConfig(**{"epochs": 2, "batch_size": 8, "model": SMALL, **kw})


def test_macro_f1_examples():
    assert evaluate_macro_f1([0, 1, 2], [0, 1, 2], 3).macro_f1 == 1.0
    r = evaluate_macro_f1([0, 0, 1, 1], [0, 0, 1, 0], 2)
    assert r.f1.tolist() == pytest.approx([0.8, 2 / 3])
    assert r.macro_f1 == pytest.approx(0.7333, abs=1e-4)
    assert evaluate_macro_f1([0, 0, 1, 1], [0, 0, 0, 0], 2).macro_f1 == pytest.approx(1 / 3)
    assert evaluate_macro_f1([0, 0], [0, 0], 3).macro_f1 == pytest.approx(1 / 3)  # absent classes count as 0
    assert evaluate_macro_f1([0, 1], [1, 0], 2).confusion.tolist() == [[0, 1], [1, 0]]
    with pytest.raises(TrainingError):
        evaluate_macro_f1([0, 3], [0, 0], 3)
    with pytest.raises(TrainingError):
        evaluate_macro_f1([0], [0, 1], 2)


def test_mean_ci():
    m, lo, hi = mean_ci([0.5, 0.7])
    assert m == pytest.approx(0.6)
    assert hi - m == pytest.approx(1.96 * np.std([0.5, 0.7], ddof=1) / np.sqrt(2))
    assert m - lo == pytest.approx(hi - m)


def test_alpha_zero_step_is_plain_ntxent():
    net = ContrastiveNet(6, SMALL, seed=0)
    V = np.random.default_rng(0).normal(size=(8, 16, 6))
    l_c, _, total, _ = unimodal_step(net, V, quick(alpha=0.0))
    Z = net.project(net.encode(V))
    assert total == l_c == ntxent_loss(Z, 0.1)[0]


def test_epoch_row_has_no_negative_zero():
    row = _epoch_row(1, [(2.0, -3.0, 2.0)], 0.0, True)
    assert str(row["weighted_tfa"]) == "0.0" and row["l_tfa"] == -3.0
    assert _epoch_row(1, [(2.0, 0.0, 2.0)], 0.5, False)["weighted_tfa"] == 0.0


def test_branch_gradients_add():
    V = np.random.default_rng(1).normal(size=(8, 16, 6))
    grads = {}
    for alpha in (0.0, 0.1, 1.0):
        net = ContrastiveNet(6, SMALL, seed=0)
        unimodal_step(net, V, quick(alpha=alpha))
        grads[alpha] = net.params.grads
    for name in grads[0.0]:
        tfa_only = grads[1.0][name] - grads[0.0][name]
        assert np.allclose(grads[0.1][name], grads[0.0][name] + 0.1 * tfa_only, atol=1e-12)


def test_tiny_pipeline_gradients():
    assert unimodal_pipeline_error(seed=1) <= 1e-3
    assert multimodal_pipeline_error(seed=1) <= 1e-3


def test_pretrain_deterministic_and_label_free(ds):
    net1, rep1 = pretrain_unimodal(ds, quick())
    net2, rep2 = pretrain_unimodal(ds.without_labels(), quick())
    assert serialize_params(net1.params) == serialize_params(net2.params)
    assert rep1.history == rep2.history
    assert [r["epoch"] for r in rep1.history] == [1, 2]


def test_tfa_disabled_matches_alpha_zero(ds):
    _, off = pretrain_unimodal(ds, quick(), tfa_branch=False)
    _, zero = pretrain_unimodal(ds, quick(alpha=0.0))
    for a, b in zip(off.history, zero.history):
        assert (a["l_contrastive"], a["weighted_tfa"], a["l_total"]) == (b["l_contrastive"], b["weighted_tfa"], b["l_total"])


def test_pretrain_errors(ds):
    with pytest.raises(TrainingError):
        pretrain_unimodal(ds, quick(batch_size=500))
    with pytest.raises(TrainingError):
        pretrain_unimodal(ds, quick(mode="multimodal"))
    with pytest.raises(TrainingError):
        PretrainConfig(tau=0.0)


def test_multimodal_symmetric_streams():
    net_a = ContrastiveNet(6, SMALL, seed=3)
    net_b = ContrastiveNet(6, SMALL, params=net_a.params.copy())
    X = np.random.default_rng(0).normal(size=(6, 16, 6))
    _, _, _, (ab, ba) = multimodal_step(net_a, net_b, X, X.copy(), quick(mode="multimodal"))
    assert ab == pytest.approx(ba, abs=1e-12)


def test_multimodal_unequal_lengths():
    a, b = generate_synthetic_pair(3, 20, 50, 6, 30, 6, seed=0)
    cfg = quick(mode="multimodal", epochs=1)
    (net_a, net_b), rep = pretrain_multimodal(a, b, cfg)
    row = rep.history[0]
    assert np.isfinite(row["l_total"]) and {"l_a_to_b", "l_b_to_a"} <= set(row)
    _, off = pretrain_multimodal(a, b, cfg, tfa_branch=False)
    _, zero = pretrain_multimodal(a, b, quick(mode="multimodal", epochs=1, alpha=0.0))
    assert off.history[0]["l_total"] == zero.history[0]["l_total"]
    with pytest.raises(TrainingError):
        pretrain_multimodal(a, b.select(np.arange(10)), cfg)

    model, report = finetune_multimodal((net_a, net_b), a, b, FinetuneConfig(epochs=3))
    assert model.fuse_a.specs[0].out_dim == 128 and model.fuse_b.specs[0].out_dim == 128
    assert 0 <= report.macro_f1 <= 1


def test_finetune_keeps_encoder_frozen(ds):
    net = ContrastiveNet(6, SMALL, seed=0)
    before = serialize_params(net.params)
    clf, report = finetune(net, ds, FinetuneConfig(epochs=5))
    assert serialize_params(net.params) == before
    assert len(report.history) == 5 and report.confusion.sum() == (ds.split == "test").sum()
    with pytest.raises(DataError):
        finetune(net, ds.without_labels(), FinetuneConfig(epochs=1))


def test_semisup_protocol_shape(ds):
    net = ContrastiveNet(6, SMALL, seed=0)
    cfg = FinetuneConfig(epochs=5)
    rows = semi_supervised_protocol(net, ds, [1, 2], repeats=3, seed=0, cfg=cfg)
    assert [r["k_or_p"] for r in rows] == [1, 2]
    assert all(len(r["scores"]) == 3 and r["ci_low"] <= r["mean_f1"] <= r["ci_high"] for r in rows)
    threaded = semi_supervised_protocol(net, ds, [1, 2], repeats=3, seed=0, cfg=cfg, jobs=3)
    assert [r["scores"] for r in threaded] == [r["scores"] for r in rows]
    pct = semi_supervised_protocol(net, ds, [0.5], repeats=2, seed=0, cfg=cfg, mode="p")
    assert len(pct) == 1
    with pytest.raises(TrainingError):
        semi_supervised_protocol(net, ds, [1], repeats=1)


def test_semisup_ci_shrinks_with_repeats(ds):
    net = ContrastiveNet(6, SMALL, seed=0)
    cfg = FinetuneConfig(epochs=5)
    width = {}
    for repeats in (10, 40):
        (row,) = semi_supervised_protocol(net, ds, [1], repeats=repeats, seed=0, cfg=cfg)
        width[repeats] = row["ci_high"] - row["ci_low"]
    assert width[40] < width[10]


def test_alignment_self_distance(ds):
    net = ContrastiveNet(6, SMALL, seed=0)
    D, E = alignment_matrices(net, ds.X[0], ds.X[0])
    assert np.allclose(np.diag(D), 0, atol=1e-12)
    assert E[0, 0] == pytest.approx(1.0) and E.shape == D.shape
    scores = triplet_alignment_scores(net, ds, n_triplets=7)
    assert scores.shape == (7, 2) and np.all(scores >= 0)


def test_tiny_model_constant():
    assert (TINY_MODEL.hidden, TINY_MODEL.proj_dim) == (4, 4)
