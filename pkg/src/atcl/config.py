"""Run configuration: nested dataclasses, JSON files, presets, overrides.

A config file is a JSON object whose keys mirror the dataclass fields,
e.g. ``{"attack": {"eps": 0.3}, "warmup": {"Es": 50}}``.  Unknown keys,
wrong types and violated constraints raise :class:`ConfigError` naming the
dotted key path.  ``"preset"`` at the top level selects a base preset
before the file's own values are applied.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [256, 256])
    dtype: str = "float32"


@dataclass
class OptimConfig:
    kind: str = "sgd"  # sgd | adam
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_milestones: list = field(default_factory=list)
    lr_decay: float = 0.1


@dataclass
class AttackConfig:
    eps: float = 0.3
    alpha: float = 0.01
    steps: int = 40
    init: str = "natural"
    value_range: list | None = field(default_factory=lambda: [0.0, 1.0])


@dataclass
class EvalConfig:
    eps: float = 0.3
    alpha: float = 0.01
    steps: int = 20
    init: str = "natural"
    every: int = 1
    batch_size: int = 500


@dataclass
class WarmupConfig:
    enabled: bool = True
    kind: str = "warmup_cos"
    Es: int = 50
    Ei: int = 10
    variant: str = "eps_alpha"


@dataclass
class PlaConfig:
    enabled: bool = True
    gamma_max: float = 1.0
    gamma: float | None = None  # fixed gamma overrides the schedule


@dataclass
class EmaConfig:
    beta: float = 0.9
    freeze_ratio: float = 0.5


@dataclass
class TwoStageConfig:
    stage1_epochs: int = 50
    stage1_loss: str = "log"
    val_fraction: float = 0.1


@dataclass
class SyntheticConfig:
    style: str = "gaussian"  # gaussian | prototype
    d: int = 64
    separation: float = 4.0
    sigma: float = 0.5
    density: float = 0.3


@dataclass
class DataConfig:
    source: str = "auto"  # auto | idx | synthetic
    data_dir: str | None = None
    K: int = 10
    n_train: int = 10000
    n_test: int = 2000
    cl_mode: str = "scl"
    mcl_size: int | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class DiagnosticsConfig:
    grad_stats: bool = True
    raw_directions: bool = False


@dataclass
class OutputConfig:
    dir: str | None = None
    checkpoint: bool = True
    csv: bool = True


@dataclass
class RunConfig:
    preset: str = "mnist-desk"
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    loss: str = "pla_log"
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    pla: PlaConfig = field(default_factory=PlaConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    two_stage: TwoStageConfig = field(default_factory=TwoStageConfig)
    data: DataConfig = field(default_factory=DataConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


PRESETS = {
    # MNIST/Kuzushiji setups: SGD 0.01, momentum 0.9, eps 0.3, alpha 0.01, k 40, Ei 10, Es 50
    "mnist-desk": {},
    "cifar-like": {
        "epochs": 120,
        "batch_size": 128,
        "optim": {"weight_decay": 5e-4, "lr_milestones": [30, 60]},
        "attack": {"eps": 8 / 255, "alpha": 2 / 255, "steps": 10},
        "eval": {"eps": 8 / 255, "alpha": 2 / 255, "steps": 20},
        "warmup": {"Ei": 40, "Es": 40},
    },
    # the desk-scale comparison: 30 epochs, k 20, schedule compressed by 0.3
    "accept-desk": {
        "epochs": 30,
        "attack": {"steps": 20},
        "warmup": {"Ei": 3, "Es": 15},
    },
}


def _check(cfg: RunConfig):
    def need(ok, path, msg):
        if not ok:
            raise ConfigError(f"{path}: {msg}")

    need(cfg.preset in PRESETS, "preset", f"unknown preset {cfg.preset!r}")
    need(cfg.epochs >= 1, "epochs", "must be >= 1")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    from atcl.losses import KINDS

    need(cfg.loss in KINDS, "loss", f"unknown loss kind {cfg.loss!r}")
    need(cfg.two_stage.stage1_loss in KINDS, "two_stage.stage1_loss", "unknown loss kind")
    need(all(h >= 1 for h in cfg.model.hidden), "model.hidden", "widths must be >= 1")
    need(cfg.model.dtype in ("float32", "float64"), "model.dtype", "float32 or float64")
    need(cfg.optim.kind in ("sgd", "adam"), "optim.kind", "sgd or adam")
    need(cfg.optim.lr > 0, "optim.lr", "must be > 0")
    need(0 <= cfg.optim.momentum < 1, "optim.momentum", "must be in [0, 1)")
    need(cfg.optim.weight_decay >= 0, "optim.weight_decay", "must be >= 0")
    for name in ("attack", "eval"):
        a = getattr(cfg, name)
        need(a.eps >= 0, f"{name}.eps", "must be >= 0")
        need(a.steps >= 0, f"{name}.steps", "must be >= 0")
        need(a.alpha > 0 or a.steps == 0, f"{name}.alpha", "must be > 0")
        need(a.init in ("natural", "random"), f"{name}.init", "natural or random")
    vr = cfg.attack.value_range
    need(vr is None or (len(vr) == 2 and vr[0] <= vr[1]), "attack.value_range", "expected [lo, hi]")
    need(cfg.eval.every >= 1, "eval.every", "must be >= 1")
    need(cfg.warmup.kind == "warmup_cos", "warmup.kind", "only warmup_cos is defined")
    need(cfg.warmup.Es >= 1, "warmup.Es", "must be >= 1")
    need(cfg.warmup.Ei >= 0, "warmup.Ei", "must be >= 0")
    need(cfg.warmup.variant in ("eps_alpha", "eps_k", "k_only"), "warmup.variant", "eps_alpha, eps_k or k_only")
    need(0 <= cfg.pla.gamma_max <= 1, "pla.gamma_max", "must be in [0, 1]")
    need(cfg.pla.gamma is None or 0 <= cfg.pla.gamma <= 1, "pla.gamma", "must be in [0, 1]")
    need(0 <= cfg.ema.beta < 1, "ema.beta", "must be in [0, 1)")
    need(0 < cfg.ema.freeze_ratio <= 1, "ema.freeze_ratio", "must be in (0, 1]")
    need(cfg.two_stage.stage1_epochs >= 0, "two_stage.stage1_epochs", "must be >= 0")
    need(0 < cfg.two_stage.val_fraction < 1, "two_stage.val_fraction", "must be in (0, 1)")
    need(cfg.data.source in ("auto", "idx", "synthetic"), "data.source", "auto, idx or synthetic")
    need(cfg.data.K > 2, "data.K", "must be > 2")
    need(cfg.data.n_train >= 1 and cfg.data.n_test >= 1, "data.n_train", "sizes must be >= 1")
    need(cfg.data.cl_mode in ("scl", "mcl"), "data.cl_mode", "scl or mcl")
    need(cfg.data.mcl_size is None or 1 <= cfg.data.mcl_size < cfg.data.K, "data.mcl_size", "must be in [1, K-1]")
    s = cfg.data.synthetic
    need(s.style in ("gaussian", "prototype"), "data.synthetic.style", "gaussian or prototype")
    need(s.separation > 0, "data.synthetic.separation", "must be > 0")
    need(s.sigma > 0, "data.synthetic.sigma", "must be > 0")
    need(s.d >= 1, "data.synthetic.d", "must be >= 1")


def _coerce(tp, value, path):
    """Validate ``value`` against annotation ``tp`` (as a string or a type)."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, path)
            except ConfigError:
                pass
        raise ConfigError(f"{path}: cannot interpret {value!r} as {tp}")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _apply(obj, values: dict, prefix: str = ""):
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected an object, got {values!r}")
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"{path}: unknown key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value, path + ".")
        else:
            setattr(obj, key, _coerce(hints[key], value, path))


def build_config(values: dict | None = None, preset: str | None = None) -> RunConfig:
    values = copy.deepcopy(values or {})
    name = preset or values.pop("preset", None) or "mnist-desk"
    values.pop("preset", None)
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r}")
    cfg = RunConfig(preset=name)
    _apply(cfg, copy.deepcopy(PRESETS[name]))
    _apply(cfg, values)
    _check(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    with open(path) as f:
        text = f.read()
    try:
        values = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return build_config(values)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def loads(text: str) -> RunConfig:
    values = json.loads(text)
    # a fully serialised config already contains the preset's values
    cfg = RunConfig(preset=values.get("preset", "mnist-desk"))
    _apply(cfg, values)
    _check(cfg)
    return cfg


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()[:16]


def parse_override_value(text: str):
    """CLI override values are JSON when they parse, bare strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{"attack.eps": 0.1, ...}`` dotted overrides and re-validate."""
    cfg = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        nested: dict = {}
        node = nested
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
        _apply(cfg, nested)
    _check(cfg)
    return cfg
