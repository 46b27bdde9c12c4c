"""Layers with hand-written backward passes, a parameter store, Adam, and
finite-difference checking.

Activations are numpy arrays laid out as (N, T, C) for sequences and (N, F)
for vectors. Each layer caches what its backward pass needs during
``forward``; parameter gradients accumulate into ``ModelParams.grads`` until
``zero_grads`` is called.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

LAYER_KINDS = ("conv1d", "affine", "relu", "mean_pool_time", "l2norm_rows", "dropout", "batchnorm", "flatten")
CHECKPOINT_MAGIC = b"TFA1"


class EngineError(RuntimeError):
    pass


class NumericError(EngineError, FloatingPointError):
    pass


@dataclass
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 1
    stride: int = 1
    padding: str = "same"
    rate: float = 0.0
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise EngineError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv1d", "affine") and (self.in_dim < 1 or self.out_dim < 1):
            raise EngineError(f"{self.kind}: dimensions must be positive")
        if self.kind == "conv1d":
            if self.kernel < 1 or self.stride < 1:
                raise EngineError("conv1d: kernel and stride must be positive")
            if self.padding not in ("same", "valid"):
                raise EngineError(f"conv1d: padding must be 'same' or 'valid', got {self.padding!r}")
        if self.kind == "batchnorm" and self.in_dim < 1:
            raise EngineError("batchnorm: in_dim must be positive")
        if self.kind == "dropout" and not 0 <= self.rate < 1:
            raise EngineError("dropout rate must lie in [0, 1)")


@dataclass
class ModelParams:
    values: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)  # non-trainable state (batchnorm running stats)
    step: int = 0

    def add(self, name, value):
        if name in self.values:
            raise EngineError(f"duplicate parameter name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def zero_grads(self):
        for g in self.grads.values():
            g.fill(0.0)

    def names(self):
        return list(self.values)

    def copy(self) -> "ModelParams":
        c = ModelParams(step=self.step)
        for name in self.values:
            c.values[name] = self.values[name].copy()
            c.grads[name] = self.grads[name].copy()
            c.m[name] = self.m[name].copy()
            c.v[name] = self.v[name].copy()
        c.buffers = {k: b.copy() for k, b in self.buffers.items()}
        return c

    def to_bytes(self) -> bytes:
        return serialize_params(self)


# ---------------------------------------------------------------- layers


class Layer:
    def __init__(self, spec: LayerSpec, name: str):
        self.spec = spec
        self.name = name
        self.cache = None

    def init(self, params: ModelParams, rng: np.random.Generator):
        pass

    def forward(self, x, params, train=False, rng=None):
        raise NotImplementedError

    def backward(self, g, params):
        raise NotImplementedError

    def _take_cache(self):
        if self.cache is None:
            raise EngineError(f"{self.name}: backward called without a preceding forward")
        cache, self.cache = self.cache, None
        return cache


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Layer):
    """Cross-correlation over time; weights are (kernel, C_in, C_out)."""

    def init(self, params, rng):
        s = self.spec
        params.add(self.name + ".w", _uniform_init(rng, s.kernel * s.in_dim, (s.kernel, s.in_dim, s.out_dim)))
        params.add(self.name + ".b", np.zeros(s.out_dim))

    def _pads(self):
        if self.spec.padding == "valid":
            return 0, 0
        total = self.spec.kernel - 1
        return total // 2, total - total // 2

    def output_len(self, T):
        left, right = self._pads()
        return (T + left + right - self.spec.kernel) // self.spec.stride + 1

    def forward(self, x, params, train=False, rng=None):
        s = self.spec
        if x.ndim != 3 or x.shape[2] != s.in_dim:
            raise EngineError(f"{self.name}: expected (N, T, {s.in_dim}) input, got {x.shape}")
        left, right = self._pads()
        xp = np.pad(x, ((0, 0), (left, right), (0, 0))) if left or right else x
        T_out = (xp.shape[1] - s.kernel) // s.stride + 1
        if T_out < 1:
            raise EngineError(f"{self.name}: input length {x.shape[1]} too short for kernel {s.kernel}")
        idx = s.stride * np.arange(T_out)[:, None] + np.arange(s.kernel)[None, :]
        cols = xp[:, idx, :].reshape(x.shape[0], T_out, s.kernel * s.in_dim)
        W = params.values[self.name + ".w"].reshape(s.kernel * s.in_dim, s.out_dim)
        self.cache = (cols, x.shape, xp.shape, idx)
        return cols @ W + params.values[self.name + ".b"]

    def backward(self, g, params):
        s = self.spec
        cols, x_shape, xp_shape, idx = self._take_cache()
        W = params.values[self.name + ".w"].reshape(s.kernel * s.in_dim, s.out_dim)
        params.grads[self.name + ".w"] += np.tensordot(cols, g, axes=([0, 1], [0, 1])).reshape(s.kernel, s.in_dim, s.out_dim)
        params.grads[self.name + ".b"] += g.sum(axis=(0, 1))
        gcols = (g @ W.T).reshape(g.shape[0], g.shape[1], s.kernel, s.in_dim)
        gxp = np.zeros(xp_shape)
        for k in range(s.kernel):
            gxp[:, idx[:, k], :] += gcols[:, :, k, :]
        left, _ = self._pads()
        return gxp[:, left : left + x_shape[1], :]


class Affine(Layer):
    def init(self, params, rng):
        s = self.spec
        params.add(self.name + ".w", _uniform_init(rng, s.in_dim, (s.in_dim, s.out_dim)))
        params.add(self.name + ".b", np.zeros(s.out_dim))

    def forward(self, x, params, train=False, rng=None):
        if x.shape[-1] != self.spec.in_dim:
            raise EngineError(f"{self.name}: expected last dim {self.spec.in_dim}, got {x.shape}")
        self.cache = x
        return x @ params.values[self.name + ".w"] + params.values[self.name + ".b"]

    def backward(self, g, params):
        x = self._take_cache()
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        params.grads[self.name + ".w"] += x2.T @ g2
        params.grads[self.name + ".b"] += g2.sum(axis=0)
        return g @ params.values[self.name + ".w"].T


class ReLU(Layer):
    def forward(self, x, params, train=False, rng=None):
        mask = x > 0
        self.cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, g, params):
        return np.where(self._take_cache(), g, 0.0)


class MeanPoolTime(Layer):
    def forward(self, x, params, train=False, rng=None):
        if x.ndim != 3:
            raise EngineError(f"{self.name}: expected (N, T, C) input, got {x.shape}")
        self.cache = x.shape
        return x.mean(axis=1)

    def backward(self, g, params):
        N, T, C = self._take_cache()
        return np.broadcast_to(g[:, None, :] / T, (N, T, C)).copy()


class Flatten(Layer):
    def forward(self, x, params, train=False, rng=None):
        self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g, params):
        return g.reshape(self._take_cache())


class L2NormRows(Layer):
    """Unit-normalizes the last axis; ``eps`` keeps all-zero rows finite."""

    eps = 1e-24

    def forward(self, x, params, train=False, rng=None):
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + self.eps)
        y = x / norm
        self.cache = (y, norm)
        return y

    def backward(self, g, params):
        y, norm = self._take_cache()
        return (g - y * np.sum(y * g, axis=-1, keepdims=True)) / norm


class Dropout(Layer):
    """Inverted dropout: surviving units are scaled by 1 / (1 - rate)."""

    def forward(self, x, params, train=False, rng=None):
        rate = self.spec.rate
        if not train or rate == 0.0:
            self.cache = 1.0
            return x
        if rng is None:
            raise EngineError(f"{self.name}: train-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
        self.cache = mask
        return x * mask

    def backward(self, g, params):
        return g * self._take_cache()


class BatchNorm(Layer):
    """Batch statistics in train mode, running averages in eval mode."""

    eps = 1e-5

    def init(self, params, rng):
        d = self.spec.in_dim
        params.add(self.name + ".gamma", np.ones(d))
        params.add(self.name + ".beta", np.zeros(d))
        params.buffers[self.name + ".mean"] = np.zeros(d)
        params.buffers[self.name + ".var"] = np.ones(d)

    def forward(self, x, params, train=False, rng=None):
        gamma = params.values[self.name + ".gamma"]
        beta = params.values[self.name + ".beta"]
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            mom = self.spec.momentum
            rm, rv = params.buffers[self.name + ".mean"], params.buffers[self.name + ".var"]
            rm *= mom
            rm += (1 - mom) * mean
            rv *= mom
            rv += (1 - mom) * var
        else:
            mean = params.buffers[self.name + ".mean"]
            var = params.buffers[self.name + ".var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self.cache = (xhat, inv, train)
        return gamma * xhat + beta

    def backward(self, g, params):
        xhat, inv, train = self._take_cache()
        gamma = params.values[self.name + ".gamma"]
        params.grads[self.name + ".gamma"] += np.sum(g * xhat, axis=0)
        params.grads[self.name + ".beta"] += g.sum(axis=0)
        gx = g * gamma
        if not train:
            return gx * inv
        return inv * (gx - gx.mean(axis=0) - xhat * np.mean(gx * xhat, axis=0))


_LAYERS = {
    "conv1d": Conv1d,
    "affine": Affine,
    "relu": ReLU,
    "mean_pool_time": MeanPoolTime,
    "flatten": Flatten,
    "l2norm_rows": L2NormRows,
    "dropout": Dropout,
    "batchnorm": BatchNorm,
}


class Sequential:
    """A chain of layers sharing one ``ModelParams`` under a name prefix."""

    def __init__(self, specs, params: ModelParams, prefix: str, check_finite: bool = True):
        self.specs = list(specs)
        self.params = params
        self.prefix = prefix
        self.check_finite = check_finite
        self.layers = [_LAYERS[s.kind](s, f"{prefix}{i}") for i, s in enumerate(self.specs)]

    def init(self, rng):
        for layer in self.layers:
            layer.init(self.params, rng)
        return self

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, self.params, train, rng)
            if self.check_finite and not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite activations after {layer.name} ({layer.spec.kind})")
        return x

    __call__ = forward

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g, self.params)
        return g

    def param_names(self):
        return [n for n in self.params.values if any(n.startswith(l.name + ".") for l in self.layers)]


def init_params(specs, seed: int, prefix: str = "") -> ModelParams:
    params = ModelParams()
    Sequential(specs, params, prefix).init(np.random.default_rng(seed))
    return params


# ---------------------------------------------------------------- builders


def encoder_specs(in_channels: int, hidden: int = 32, layers: int = 3, kernel: int = 5, stride: int = 1,
                  padding: str = "same", final_relu: bool = False) -> list[LayerSpec]:
    """Conv stack with relu between layers.

    The last conv stays linear by default: a relu there can zero a whole
    timestep, and row normalization is discontinuous at the zero vector.
    """
    specs = []
    c = in_channels
    for i in range(layers):
        specs.append(LayerSpec("conv1d", c, hidden, kernel=kernel, stride=stride, padding=padding))
        if i < layers - 1 or final_relu:
            specs.append(LayerSpec("relu"))
        c = hidden
    return specs


def projection_specs(hidden: int, out_dim: int) -> list[LayerSpec]:
    return [
        LayerSpec("mean_pool_time"),
        LayerSpec("affine", hidden, hidden),
        LayerSpec("relu"),
        LayerSpec("affine", hidden, out_dim),
    ]


MLP_HIDDEN = (256, 128)


def classifier_specs(in_dim: int, num_classes: int, arch: str = "linear", dropout: float = 0.2,
                     hidden=MLP_HIDDEN) -> list[LayerSpec]:
    if arch == "linear":
        return [LayerSpec("affine", in_dim, num_classes)]
    if arch != "mlp":
        raise EngineError(f"unknown classifier arch {arch!r}")
    specs, d = [], in_dim
    for h in hidden:
        specs += [LayerSpec("affine", d, h), LayerSpec("relu"), LayerSpec("dropout", rate=dropout)]
        d = h
    specs.append(LayerSpec("affine", d, num_classes))
    return specs


def fusion_specs(in_dim: int, width: int = 128) -> list[LayerSpec]:
    return [LayerSpec("affine", in_dim, width), LayerSpec("batchnorm", width), LayerSpec("relu")]


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return float(loss), g / n


# ---------------------------------------------------------------- optimizer


def adam_step(params: ModelParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, step: int | None = None,
              names=None):
    """Bias-corrected Adam update in place. ``step`` defaults to the stored count + 1."""
    step = params.step + 1 if step is None else step
    if step < 1:
        raise EngineError("adam step must be >= 1")
    b1, b2 = betas
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name in params.values if names is None else names:
        g = params.grads[name]
        m, v = params.m[name], params.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params.values[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.step = step
    return params


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_name: str
    worst_index: tuple
    checked: int

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error <= tol


def relative_error(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def finite_difference_check(loss_fn, params: ModelParams, analytic: dict, epsilon: float = 1e-5,
                            max_coords: int = 200, seed: int = 0, names=None) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn()``.

    ``loss_fn`` reads ``params.values`` and returns a float; at most
    ``max_coords`` coordinates are sampled, spread over the named parameters.
    """
    rng = np.random.default_rng(seed)
    names = list(params.values if names is None else names)
    coords = [(n, i) for n in names for i in np.ndindex(params.values[n].shape)]
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = (0.0, "", ())
    for name, idx in coords:
        arr = params.values[name]
        orig = arr[idx]
        arr[idx] = orig + epsilon
        up = loss_fn()
        arr[idx] = orig - epsilon
        down = loss_fn()
        arr[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing {name}{idx}")
        num = (up - down) / (2 * epsilon)
        err = relative_error(float(analytic[name][idx]), num)
        if err > worst[0] or not worst[1]:
            worst = (err, name, idx)
    return GradCheckReport(worst[0], worst[1], worst[2], len(coords))


def check_input_gradient(fn, x: np.ndarray, analytic: np.ndarray, epsilon: float = 1e-5, max_coords: int = 200,
                         seed: int = 0) -> float:
    """Worst relative error of ``analytic`` vs central differences of ``fn(x)`` over sampled entries of ``x``."""
    rng = np.random.default_rng(seed)
    flat = list(np.ndindex(x.shape))
    if len(flat) > max_coords:
        flat = [flat[i] for i in sorted(rng.choice(len(flat), size=max_coords, replace=False))]
    worst = 0.0
    for idx in flat:
        orig = x[idx]
        x[idx] = orig + epsilon
        up = fn(x)
        x[idx] = orig - epsilon
        down = fn(x)
        x[idx] = orig
        worst = max(worst, relative_error(float(analytic[idx]), (up - down) / (2 * epsilon)))
    return worst


# ---------------------------------------------------------------- checkpoints


def serialize_params(params: ModelParams) -> bytes:
    """Little-endian: magic, count, per-parameter (name, rank, dims, float64 values),
    then buffers in the same layout, then the Adam step and (m, v) per parameter."""
    out = [CHECKPOINT_MAGIC]

    def records(d):
        out.append(struct.pack("<I", len(d)))
        for name, arr in d.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)) + raw)
            out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    records(params.values)
    records(params.buffers)
    out.append(struct.pack("<Q", params.step))
    for name in params.values:
        out.append(np.ascontiguousarray(params.m[name], dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(params.v[name], dtype="<f8").tobytes())
    return b"".join(out)


def deserialize_params(data: bytes) -> ModelParams:
    if data[:4] != CHECKPOINT_MAGIC:
        raise EngineError("not a checkpoint file (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise EngineError("truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def records():
        (count,) = struct.unpack("<I", take(4))
        d = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(shape)) if rank else 1
            d[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        return d

    params = ModelParams()
    for name, arr in records().items():
        params.add(name, arr)
    params.buffers = records()
    (params.step,) = struct.unpack("<Q", take(8))
    for name, arr in params.values.items():
        params.m[name] = np.frombuffer(take(8 * arr.size), dtype="<f8").reshape(arr.shape).astype(np.float64)
        params.v[name] = np.frombuffer(take(8 * arr.size), dtype="<f8").reshape(arr.shape).astype(np.float64)
    if pos != len(data):
        raise EngineError("trailing bytes after checkpoint payload")
    return params


def save_checkpoint(path, params: ModelParams):
    with open(path, "wb") as fh:
        fh.write(serialize_params(params))


def load_checkpoint(path, expect: ModelParams | None = None) -> ModelParams:
    with open(path, "rb") as fh:
        params = deserialize_params(fh.read())
    if expect is not None:
        for name, arr in expect.values.items():
            if name not in params.values:
                raise EngineError(f"checkpoint lacks parameter {name!r}")
            if params.values[name].shape != arr.shape:
                raise EngineError(f"{name}: checkpoint shape {params.values[name].shape} != model shape {arr.shape}")
    return params


def merge_params(parts: dict) -> ModelParams:
    """Combine several parameter stores under ``<key>/`` prefixes."""
    out = ModelParams()
    for key, p in parts.items():
        for name in p.values:
            out.add(f"{key}/{name}", p.values[name].copy())
            out.m[f"{key}/{name}"] = p.m[name].copy()
            out.v[f"{key}/{name}"] = p.v[name].copy()
        for name, b in p.buffers.items():
            out.buffers[f"{key}/{name}"] = b.copy()
        out.step = max(out.step, p.step)
    return out


def split_params(params: ModelParams, key: str) -> ModelParams:
    out = ModelParams(step=params.step)
    pre = key + "/"
    for name in params.values:
        if name.startswith(pre):
            out.add(name[len(pre):], params.values[name].copy())
            out.m[name[len(pre):]] = params.m[name].copy()
            out.v[name[len(pre):]] = params.v[name].copy()
    for name, b in params.buffers.items():
        if name.startswith(pre):
            out.buffers[name[len(pre):]] = b.copy()
    if not out.values:
        raise EngineError(f"no parameters under prefix {key!r}")
    return out
