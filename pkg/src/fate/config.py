"""Flat ``key = value`` experiment configs.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected. Keys
left unset take the variant's default (vision or vl), so a config that only
says ``variant = vl`` reproduces the published vision-language settings.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .augment import DEFAULT_RANGES, STRONG_OPS, AugmentPolicy


class ConfigError(ValueError):
    code = "config"


VARIANT_DEFAULTS = {
    "vision": dict(mu=1.0, B=32, tau=0.5, theta=0.95, lam=1.0, n_dp=12, n_cp=12,
                   adapt_lr=0.03, cls_lr=0.03, adapt_epochs=10, cls_epochs=50, k=16),
    "vl": dict(mu=16.0, B=4, tau=0.5, theta=0.95, lam=1.0, n_dp=12, n_cp=16,
               adapt_lr=0.1, cls_lr=0.0025, adapt_epochs=20, cls_epochs=20, k=16),
}


@dataclass
class ExperimentConfig:
    variant: str = "vision"
    # data
    data_format: str = "toy"            # toy | idx-binary | png-dir
    toy_seed: int = 0
    aux_per_class: int = 200
    train_per_class: int = 400
    test_per_class: int = 100
    aux_path: str = ""
    train_path: str = ""
    test_path: str = ""
    labels_per_class: int = 1
    # checkpoints and outputs
    backbone_dir: str = "checkpoints/backbone"
    out_dir: str = "runs/default"
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    ks: tuple = (1, 2, 4, 8, 16, 32)
    # backbone / dual-encoder pretraining
    image_size: int = 28
    patch: int = 7
    d: int = 64
    depth: int = 4
    heads: int = 4
    pretrain_epochs: int = 25
    pretrain_lr: float = 2e-3
    dual_epochs: int = 4
    text_depth: int = 2
    text_length: int = 32
    scale: float = 30.0
    # FATE stages (None -> variant default)
    mu: float | None = None
    B: int | None = None
    tau: float | None = None
    theta: float | None = None
    lam: float | None = None
    n_dp: int | None = None
    n_cp: int | None = None
    adapt_lr: float | None = None
    cls_lr: float | None = None
    adapt_epochs: int | None = None
    cls_epochs: int | None = None
    k: int | None = None
    d_proj: int = 32
    adapt_batch: int = 32               # vl: top-k set minibatch
    ctx_init: str = "random"
    use_dp: bool = True
    use_cp: bool = True
    dp_on_strong: bool = False
    noisy_dp: bool = False
    # augmentation
    strong_ops: tuple = STRONG_OPS
    strong_n_ops: int = 2
    cutout: int = 7
    adapt_n_ops: int | None = None      # None -> strong_n_ops
    adapt_cutout: int | None = None     # None -> cutout
    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    # logging
    eval_every: int = 1
    log_wall_time: bool = False

    def __post_init__(self):
        if self.variant not in VARIANT_DEFAULTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANT_DEFAULTS)}, got {self.variant!r}")
        for key, value in VARIANT_DEFAULTS[self.variant].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.ks = tuple(int(k) for k in self.ks)
        self.strong_ops = tuple(self.strong_ops)
        self.validate()

    def validate(self) -> None:
        if self.data_format not in ("toy", "idx-binary", "png-dir"):
            raise ConfigError(f"unknown data_format {self.data_format!r}")
        if not 0.0 < self.theta:
            raise ConfigError("theta must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        ub = self.mu * self.B
        if abs(ub - round(ub)) > 1e-9 or round(ub) < 1:
            raise ConfigError(f"mu * B must be a positive integer, got {ub}")
        if self.k < 1 or any(k < 1 for k in self.ks):
            raise ConfigError("k must be at least 1")
        if self.n_cp < 1 and self.use_cp:
            raise ConfigError("n_cp must be at least 1 when use_cp is set")
        if self.n_dp < 0:
            raise ConfigError("n_dp must be non-negative")
        if self.ctx_init not in ("random", "template"):
            raise ConfigError(f"ctx_init must be random or template, got {self.ctx_init!r}")
        unknown = set(self.strong_ops) - set(STRONG_OPS)
        if unknown:
            raise ConfigError(f"unknown augmentation ops {sorted(unknown)}")

    def strong_policy(self) -> AugmentPolicy:
        return AugmentPolicy(kind="strong", n_ops=self.strong_n_ops, ops=self.strong_ops,
                             ranges=dict(self.ranges), cutout=self.cutout)

    def adapt_policy(self) -> AugmentPolicy:
        n_ops = self.strong_n_ops if self.adapt_n_ops is None else self.adapt_n_ops
        size = self.cutout if self.adapt_cutout is None else self.adapt_cutout
        return AugmentPolicy(kind="strong", n_ops=n_ops, ops=self.strong_ops, ranges=dict(self.ranges), cutout=size)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        out["ks"] = list(self.ks)
        out["strong_ops"] = list(self.strong_ops)
        out["ranges"] = {k: list(v) for k, v in self.ranges.items()}
        return out

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "ranges":
                lines.extend(f"range.{op} = {lo!r}, {hi!r}" for op, (lo, hi) in value.items())
            elif value is not None:
                lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


_BOOL = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}


def _coerce(name: str, raw: str, default):
    kind = _FIELD_TYPES[name]
    try:
        if "bool" in kind:
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        if kind.startswith("tuple"):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if isinstance(default, tuple) and default and isinstance(default[0], str):
                return tuple(items)
            return tuple(int(x) for x in items)
        if "int" in kind and "float" not in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


_FIELD_TYPES = {f.name: str(f.type) for f in fields(ExperimentConfig)}


def parse_config(text: str) -> ExperimentConfig:
    values: dict = {}
    ranges = dict(DEFAULT_RANGES)
    defaults = ExperimentConfig()
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.startswith("range."):
            op = key[len("range."):]
            if op not in DEFAULT_RANGES:
                raise ConfigError(f"line {line_no}: unknown augmentation op {op!r}")
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != 2:
                raise ConfigError(f"line {line_no}: range needs 'lo, hi'")
            try:
                ranges[op] = (float(parts[0]), float(parts[1]))
            except ValueError as exc:
                raise ConfigError(f"line {line_no}: bad range {raw!r}") from exc
            continue
        if key not in _FIELD_TYPES or key == "ranges":
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, getattr(defaults, key))
    return ExperimentConfig(**values, ranges=ranges)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))
