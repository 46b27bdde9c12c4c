"""Line-oriented ``key = value`` run configuration.

Every key has a declared type; unknown keys, duplicates and type mismatches
raise ``ConfigError`` naming the key. Augmentation pipelines use indexed
keys ``aug.<N>.kind``, ``aug.<N>.prob`` and ``aug.<N>.<param>`` (``aug_b``
for the second stream).
"""

from __future__ import annotations

import re
from pathlib import Path

from .augment import DEFAULT_PARAMS, AugmentationError, AugmentationSpec
from .training import FinetuneConfig, ModelConfig, PretrainConfig, default_pipeline


class ConfigError(ValueError):
    pass


SCHEMA = {
    "run.seed": (int, 0),
    "data.manifest": (str, ""),
    "data.manifest_b": (str, ""),
    "data.label_column": (str, "label"),
    "data.num_classes": (int, 4),
    "data.windows_per_class": (int, 500),
    "data.window_len": (int, 50),
    "data.window_len_b": (int, 30),
    "data.channels": (int, 6),
    "data.channels_b": (int, 6),
    "data.noise": (float, 0.1),
    "data.f0": (float, 1.0),
    "data.orientation": (bool, True),
    "data.overlap": (float, 0.5),
    "data.sample_rate": (float, 50.0),
    "data.seed": (int, 42),
    "data.normalize": (bool, True),
    "model.hidden": (int, 32),
    "model.layers": (int, 3),
    "model.kernel": (int, 5),
    "model.stride": (int, 1),
    "model.padding": (str, "same"),
    "model.proj_dim": (int, 32),
    "model_b.layers": (int, 3),
    "model_b.kernel": (int, 5),
    "pretrain.mode": (str, "unimodal"),
    "pretrain.epochs": (int, 30),
    "pretrain.batch_size": (int, 32),
    "pretrain.lr": (float, 1e-3),
    "pretrain.tfa_enabled": (bool, True),
    "loss.tau": (float, 0.1),
    "loss.gamma": (float, 0.1),
    "loss.alpha": (float, 0.1),
    "loss.literal_delta": (bool, False),
    "finetune.arch": (str, "linear"),
    "finetune.epochs": (int, 100),
    "finetune.lr": (float, 1e-2),
    "finetune.batch_size": (int, 64),
    "finetune.flatten": (bool, False),
    "finetune.dropout": (float, 0.2),
    "finetune.fusion_width": (int, 128),
    "semisup.mode": (str, "k"),
    "semisup.grid": (str, "1,2,5,10,25,50,100"),
    "semisup.repeats": (int, 10),
    "semisup.include_random": (bool, False),
    "align.index_a": (int, 0),
    "align.index_b": (int, 1),
    "align.split": (str, "test"),
    "io.checkpoint": (str, ""),
    "io.classifier": (str, ""),
    "gradcheck.epsilon": (float, 1e-5),
    "gradcheck.tolerance": (float, 1e-3),
    "gradcheck.max_coords": (int, 200),
}

CHOICES = {
    "model.padding": ("same", "valid"),
    "pretrain.mode": ("unimodal", "multimodal"),
    "finetune.arch": ("linear", "mlp"),
    "semisup.mode": ("k", "p"),
    "align.split": ("train", "val", "test"),
}

_AUG_KEY = re.compile(r"^(aug|aug_b)\.(\d+)\.([a-z_]+)$")
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(key, raw, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def _aug_param_type(kind, param):
    return type(DEFAULT_PARAMS[kind][param])


def _parse_line(line, lineno, source):
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


class RunConfig:
    """Typed flat configuration plus raw augmentation entries."""

    def __init__(self, values: dict, aug_raw: dict):
        self.values = values
        self.aug_raw = aug_raw

    def __getitem__(self, key):
        return self.values[key]

    def pipeline(self, prefix: str = "aug") -> list[AugmentationSpec]:
        entries = {int(n): d for (p, n), d in self.aug_raw.items() if p == prefix}
        if not entries:
            return default_pipeline()
        specs = []
        for n in sorted(entries):
            d = dict(entries[n])
            key = f"{prefix}.{n}"
            if "kind" not in d:
                raise ConfigError(f"{key}.kind: missing")
            kind = d.pop("kind")
            if kind not in DEFAULT_PARAMS:
                raise ConfigError(f"{key}.kind: unknown augmentation {kind!r}")
            prob = _coerce(f"{key}.prob", d.pop("prob"), float) if "prob" in d else 1.0
            params = {}
            for p, raw in d.items():
                if p not in DEFAULT_PARAMS[kind]:
                    raise ConfigError(f"{key}.{p}: not a parameter of {kind}")
                params[p] = _coerce(f"{key}.{p}", raw, _aug_param_type(kind, p))
            try:
                specs.append(AugmentationSpec(kind, params, prob))
            except AugmentationError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        return specs

    # -------------------------------------------------------------- typed views

    def model_config(self, stream: str = "a") -> ModelConfig:
        v = self.values
        return ModelConfig(
            hidden=v["model.hidden"],
            layers=v["model.layers"] if stream == "a" else v["model_b.layers"],
            kernel=v["model.kernel"] if stream == "a" else v["model_b.kernel"],
            stride=v["model.stride"],
            padding=v["model.padding"],
            proj_dim=v["model.proj_dim"],
        )

    def pretrain_config(self) -> PretrainConfig:
        v = self.values
        return PretrainConfig(
            mode=v["pretrain.mode"],
            epochs=v["pretrain.epochs"],
            batch_size=v["pretrain.batch_size"],
            lr=v["pretrain.lr"],
            tau=v["loss.tau"],
            gamma=v["loss.gamma"],
            alpha=v["loss.alpha"],
            tfa_enabled=v["pretrain.tfa_enabled"],
            literal_delta=v["loss.literal_delta"],
            seed=v["run.seed"],
            model=self.model_config("a"),
            model_b=self.model_config("b"),
            aug=self.pipeline("aug"),
            aug_b=self.pipeline("aug_b"),
        )

    def finetune_config(self) -> FinetuneConfig:
        v = self.values
        return FinetuneConfig(
            arch=v["finetune.arch"],
            epochs=v["finetune.epochs"],
            lr=v["finetune.lr"],
            batch_size=v["finetune.batch_size"],
            flatten=v["finetune.flatten"],
            dropout=v["finetune.dropout"],
            fusion_width=v["finetune.fusion_width"],
            seed=v["run.seed"],
        )

    def grid(self):
        typ = int if self.values["semisup.mode"] == "k" else float
        try:
            return [typ(x) for x in self.values["semisup.grid"].split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"semisup.grid: expected comma-separated {typ.__name__} values") from None

    def echo(self) -> str:
        """Effective configuration, including the expanded augmentation pipelines."""
        lines = [f"{k} = {_fmt(self.values[k])}" for k in sorted(self.values)]
        for prefix in ("aug", "aug_b"):
            for n, spec in enumerate(self.pipeline(prefix)):
                lines.append(f"{prefix}.{n}.kind = {spec.kind}")
                lines.append(f"{prefix}.{n}.prob = {_fmt(spec.probability)}")
                for p in sorted(spec.params):
                    lines.append(f"{prefix}.{n}.{p} = {_fmt(spec.params[p])}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _assign(values, aug_raw, key, raw, source):
    m = _AUG_KEY.match(key)
    if m:
        prefix, n, field = m.group(1), m.group(2), m.group(3)
        aug_raw.setdefault((prefix, n), {})[field] = raw
        return
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r} ({source})")
    typ, _ = SCHEMA[key]
    val = _coerce(key, raw, typ)
    if key in CHOICES and val not in CHOICES[key]:
        raise ConfigError(f"{key}: expected one of {CHOICES[key]}, got {val!r}")
    values[key] = val


def parse_config(path=None, overrides=()) -> RunConfig:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    aug_raw: dict = {}
    if path is not None:
        seen = set()
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            kv = _parse_line(line, lineno, path)
            if kv is None:
                continue
            key, raw = kv
            if key in seen:
                raise ConfigError(f"duplicate key {key!r} at {path}:{lineno}")
            seen.add(key)
            _assign(values, aug_raw, key, raw, f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _assign(values, aug_raw, key.strip(), raw.strip(), "--set")
    cfg = RunConfig(values, aug_raw)
    cfg.pipeline("aug")
    cfg.pipeline("aug_b")
    return cfg
