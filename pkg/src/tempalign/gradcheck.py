"""Finite-difference suites over every differentiable piece of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contrastive import cmc_loss, ntxent_loss
from .engine import (
    L2NormRows,
    LayerSpec,
    ModelParams,
    Sequential,
    check_input_gradient,
    finite_difference_check,
    relative_error,
)
from .softdtw import l2_normalize_rows, softdtw_forward_batch, softdtw_grad, softdtw_value, tfa_loss_and_feature_grads
from .training import ContrastiveNet, ModelConfig, PretrainConfig, multimodal_step, unimodal_step


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def layer_error(spec: LayerSpec, x_shape, seed=0, epsilon=1e-5, train=False, max_coords=200) -> float:
    """Worst error over parameters and input for loss = <R, layer(x)>."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    net = Sequential([spec], params, "L").init(rng)
    _jitter(params, rng)
    x = rng.normal(size=x_shape)
    R = rng.normal(size=net.forward(x, train, np.random.default_rng(seed)).shape)

    def loss_of_x(xv):
        return float(np.sum(R * net.forward(xv, train, np.random.default_rng(seed))))

    net.forward(x, train, np.random.default_rng(seed))
    gx = net.backward(R)
    worst = check_input_gradient(loss_of_x, x, gx, epsilon, max_coords, seed)
    if params.values:
        analytic = {n: g.copy() for n, g in params.grads.items()}
        rep = finite_difference_check(lambda: loss_of_x(x), params, analytic, epsilon, max_coords, seed)
        worst = max(worst, rep.max_rel_error)
    return worst


LAYER_CASES = [
    ("conv1d same k5", LayerSpec("conv1d", 3, 4, kernel=5), (2, 9, 3), False),
    ("conv1d same k4", LayerSpec("conv1d", 3, 2, kernel=4), (2, 7, 3), False),
    ("conv1d valid stride2", LayerSpec("conv1d", 2, 3, kernel=3, stride=2, padding="valid"), (2, 9, 2), False),
    ("affine", LayerSpec("affine", 5, 3), (4, 5), False),
    ("relu", LayerSpec("relu"), (3, 6, 4), False),
    ("mean_pool_time", LayerSpec("mean_pool_time"), (3, 6, 4), False),
    ("flatten", LayerSpec("flatten"), (3, 6, 4), False),
    ("l2norm_rows", LayerSpec("l2norm_rows"), (3, 6, 4), False),
    ("dropout train", LayerSpec("dropout", rate=0.3), (4, 6), True),
    ("batchnorm train", LayerSpec("batchnorm", 4), (6, 4), True),
    ("batchnorm eval", LayerSpec("batchnorm", 4), (6, 4), False),
]


def softdtw_error(seed=0, epsilon=1e-4, shape=(6, 7), gamma=0.1) -> float:
    """Alignment matrix vs central differences of the Soft-DTW value.

    The difference quotient is evaluated in long double: alignment entries
    can be ~1e-11, below what a float64 quotient at epsilon = 1e-4 resolves.
    """
    rng = np.random.default_rng(seed)
    D = rng.uniform(0, 2, shape)
    _, table = softdtw_value(D, gamma)
    E = softdtw_grad(D, table)
    Dl = D.astype(np.longdouble)
    worst = 0.0
    for idx in np.ndindex(D.shape):
        Dp, Dm = Dl.copy(), Dl.copy()
        Dp[idx] += epsilon
        Dm[idx] -= epsilon
        up = softdtw_forward_batch(Dp[None], gamma)[0, -1, -1]
        down = softdtw_forward_batch(Dm[None], gamma)[0, -1, -1]
        num = float((up - down) / (2 * np.longdouble(epsilon)))
        worst = max(worst, relative_error(float(E[idx]), num))
    return worst


def ntxent_error(seed=0, epsilon=1e-5, n=8, d=4, tau=0.1) -> float:
    Z = np.random.default_rng(seed).normal(size=(n, d))
    _, g = ntxent_loss(Z, tau)
    return check_input_gradient(lambda z: ntxent_loss(z, tau)[0], Z, g, epsilon, seed=seed)


def cmc_error(seed=0, epsilon=1e-5, n=6, d=4, tau=0.1) -> float:
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    _, gA, gB = cmc_loss(A, B, tau)
    ea = check_input_gradient(lambda a: cmc_loss(a, B, tau)[0], A, gA, epsilon, seed=seed)
    eb = check_input_gradient(lambda b: cmc_loss(A, b, tau)[0], B, gB, epsilon, seed=seed)
    return max(ea, eb)


def tfa_feature_error(seed=0, epsilon=1e-5, n=3, ta=5, tb=4, h=3, gamma=0.1) -> float:
    """Gradient of the batch alignment loss w.r.t. raw (un-normalized) features."""
    rng = np.random.default_rng(seed)
    Xa, Xb = rng.normal(size=(n, ta, h)), rng.normal(size=(n, tb, h))

    def loss(a, b):
        return tfa_loss_and_feature_grads(l2_normalize_rows(a, 1e-24), l2_normalize_rows(b, 1e-24), gamma)[0]

    na, nb = L2NormRows(LayerSpec("l2norm_rows"), "a"), L2NormRows(LayerSpec("l2norm_rows"), "b")
    _, ga, gb = tfa_loss_and_feature_grads(na.forward(Xa, None), nb.forward(Xb, None), gamma)
    gXa, gXb = na.backward(ga, None), nb.backward(gb, None)
    ea = check_input_gradient(lambda a: loss(a, Xb), Xa, gXa, epsilon, seed=seed)
    eb = check_input_gradient(lambda b: loss(Xa, b), Xb, gXb, epsilon, seed=seed)
    return max(ea, eb)


TINY_MODEL = ModelConfig(hidden=4, layers=2, kernel=3, proj_dim=4)


def _jitter(params: ModelParams, rng, scale=0.1):
    # moves biases off zero so no unit sits exactly on a relu kink
    for name in params.values:
        params.values[name] = params.values[name] + rng.normal(0, scale, params.values[name].shape)


def unimodal_pipeline_error(seed=0, epsilon=1e-5, alpha=0.1, T=8, S=3, batch=4, max_coords=200,
                            model: ModelConfig = TINY_MODEL) -> float:
    """Encoder -> {projection + NT-Xent, alignment} combined loss, all parameters."""
    rng = np.random.default_rng(seed)
    cfg = PretrainConfig(alpha=alpha, model=model, seed=seed)
    net = ContrastiveNet(S, model, seed=seed)
    _jitter(net.params, rng)
    V = rng.normal(size=(2 * batch, T, S))
    unimodal_step(net, V, cfg)
    analytic = {k: g.copy() for k, g in net.params.grads.items()}
    net.params.zero_grads()

    def loss():
        l_c, l_tfa, total, _ = unimodal_step(net, V, cfg)
        net.params.zero_grads()
        return total

    return finite_difference_check(loss, net.params, analytic, epsilon, max_coords, seed).max_rel_error


def multimodal_pipeline_error(seed=0, epsilon=1e-5, alpha=0.1, Ta=8, Tb=6, Sa=3, Sb=4, batch=4, max_coords=200,
                              model: ModelConfig = TINY_MODEL) -> float:
    rng = np.random.default_rng(seed)
    cfg = PretrainConfig(mode="multimodal", alpha=alpha, model=model, seed=seed)
    net_a, net_b = ContrastiveNet(Sa, model, seed=seed), ContrastiveNet(Sb, model, seed=seed + 1)
    _jitter(net_a.params, rng)
    _jitter(net_b.params, rng)
    Xa, Xb = rng.normal(size=(batch, Ta, Sa)), rng.normal(size=(batch, Tb, Sb))
    multimodal_step(net_a, net_b, Xa, Xb, cfg)
    analytic = [{k: g.copy() for k, g in net.params.grads.items()} for net in (net_a, net_b)]

    def loss():
        total = multimodal_step(net_a, net_b, Xa, Xb, cfg)[2]
        net_a.params.zero_grads()
        net_b.params.zero_grads()
        return total

    worst = 0.0
    for net, grads in zip((net_a, net_b), analytic):
        worst = max(worst, finite_difference_check(loss, net.params, grads, epsilon, max_coords, seed).max_rel_error)
    net_a.params.zero_grads()
    net_b.params.zero_grads()
    return worst


def run_all(seed=0, epsilon=1e-5, tolerance=1e-3, max_coords=200) -> list[SuiteResult]:
    results = []
    for name, spec, shape, train in LAYER_CASES:
        results.append(SuiteResult(name, layer_error(spec, shape, seed, epsilon, train, max_coords), tolerance))
    results.append(SuiteResult("softdtw 6x7", softdtw_error(seed), tolerance))
    results.append(SuiteResult("ntxent", ntxent_error(seed, epsilon), tolerance))
    results.append(SuiteResult("cmc", cmc_error(seed, epsilon), tolerance))
    results.append(SuiteResult("tfa raw features", tfa_feature_error(seed, epsilon), tolerance))
    results.append(SuiteResult("unimodal pipeline", unimodal_pipeline_error(seed, epsilon, max_coords=max_coords), tolerance))
    results.append(SuiteResult("multimodal pipeline", multimodal_pipeline_error(seed, epsilon, max_coords=max_coords),
                               tolerance))
    return results
