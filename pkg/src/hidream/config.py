"""Run configuration: nested dataclasses, strict JSON loading and a canonical hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 0
    n_train: int = 200
    n_test: int = 64
    test_seed: int = 1000
    image_size: int = 64


@dataclass
class ModelConfig:
    # ascending; scale s wires to the U-Net block at resolution s x s
    scales: tuple = (8, 16, 32, 64)
    # condition-map channels d_s and U-Net widths, both listed shallow -> deep
    channels: tuple = (16, 8, 8, 4)
    widths: tuple = (32, 64, 96, 128)
    hint_hidden: int = 0  # 0 means max(8, width // 2)
    temb_dim: int = 64
    T: int = 1000
    sigma0: float = 1.0
    # latent statistics of the training images; the noise predictor is preconditioned around them
    latent_mean: float = -0.75
    latent_std: float = 0.3
    bandpass: bool = False
    adapter: str = "hierarchical"  # or "flat"
    keep: tuple = ("early", "mid", "late")
    mhla: bool = True
    mhla_heads: int = 2
    mhla_width: int = 32
    film_first: bool = True
    init_seed: int = 0


@dataclass
class GuidanceConfig:
    lambda_max: tuple = (0.8, 0.7, 0.6, 0.5)  # shallow -> deep
    rho: tuple = (0.5, 1.0, 1.5, 2.0)  # shallow -> deep
    eta: float = 4.0
    sparsity: str = "off"


@dataclass
class TrainConfig:
    seed: int = 0
    batch: int = 16
    pretrain_steps: int = 1500
    pretrain_lr: float = 2e-3
    steps_a: int = 500
    steps_b: int = 200
    lr_adapter: float = 1e-4
    lr_unet: float = 1e-5
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-2
    ramp: int = 100
    reg_alpha: float = 1e-3
    reg_w: float = 1e-2
    reg_tv: float = 1e-3
    log_every: int = 1


@dataclass
class SampleConfig:
    steps: int = 50
    seed: int = 0


@dataclass
class EvalConfig:
    k: int = 10
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(train={"seed": 2})``."""
        d = self.to_dict()
        for sec, vals in sections.items():
            if sec not in d:
                raise ConfigError(f"unknown section {sec!r}")
            d[sec].update(vals)
        return from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {unknown}")
    kwargs = {}
    default = cls()
    for name, f in known.items():
        if name not in data:
            continue
        cur = getattr(default, name)
        val = data[name]
        if is_dataclass(cur):
            kwargs[name] = _build(type(cur), val, f"{path}{name}.")
        elif isinstance(cur, tuple):
            if not isinstance(val, (list, tuple)):
                raise ConfigError(f"{path}{name}: expected a list")
            kwargs[name] = tuple(val)
        elif isinstance(cur, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{path}{name}: expected a boolean")
            kwargs[name] = val
        elif isinstance(cur, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{path}{name}: expected an integer")
            kwargs[name] = val
        elif isinstance(cur, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{path}{name}: expected a number")
            kwargs[name] = float(val)
        else:
            kwargs[name] = val
    if cls is RunConfig:
        return RunConfig(**kwargs)
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load(path) -> RunConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_dict(data)


def validate(cfg: RunConfig) -> None:
    m, g = cfg.model, cfg.guidance
    n = len(m.scales)
    if list(m.scales) != sorted(set(m.scales)):
        raise ConfigError(f"model.scales must be strictly increasing: {m.scales}")
    if m.scales[-1] != cfg.data.image_size:
        raise ConfigError("largest scale must equal data.image_size")
    for a, b in zip(m.scales, m.scales[1:]):
        if b != 2 * a:
            raise ConfigError(f"consecutive scales must differ by a factor of 2: {m.scales}")
    for name, seq in (("model.channels", m.channels), ("model.widths", m.widths),
                      ("guidance.lambda_max", g.lambda_max), ("guidance.rho", g.rho)):
        if len(seq) != n:
            raise ConfigError(f"{name} needs {n} entries (one per scale), got {len(seq)}")
    if m.adapter not in ("hierarchical", "flat"):
        raise ConfigError(f"model.adapter must be 'hierarchical' or 'flat', got {m.adapter!r}")
    if m.adapter == "flat" and m.mhla:
        raise ConfigError("MHLA needs per-group ROI latents; it cannot run with the flat conditioner")
    bad = set(m.keep) - {"early", "mid", "late"}
    if bad or not m.keep:
        raise ConfigError(f"model.keep must be a non-empty subset of early/mid/late, got {m.keep}")
    if m.mhla and m.mhla_width % m.mhla_heads:
        raise ConfigError(f"{m.mhla_heads} heads do not divide MHLA width {m.mhla_width}")
    if cfg.sample.steps < 1:
        raise ConfigError("sample.steps must be >= 1")
    if g.eta <= 0:
        raise ConfigError("guidance.eta must be positive")
    if m.latent_std <= 0:
        raise ConfigError("model.latent_std must be positive")


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def preset(name: str) -> RunConfig:
    if name == "default":
        return RunConfig()
    if name == "desk":
        # laptop-scale: 32 px, four wired depths, sized so an ablation grid fits in minutes
        return from_dict({
            "data": {"image_size": 32, "n_train": 200, "n_test": 64},
            "model": {"scales": [4, 8, 16, 32], "channels": [8, 8, 12, 16], "widths": [16, 24, 32, 48],
                      "temb_dim": 32, "mhla_width": 16},
            # ten times the full-scale rates: the step budget here is a few hundred steps per stage
            "train": {"batch": 16, "lr_adapter": 1e-3, "lr_unet": 1e-4},
        })
    if name == "micro":
        return from_dict({
            "data": {"image_size": 8, "n_train": 4, "n_test": 2},
            "model": {"scales": [2, 4, 8], "channels": [2, 2, 3], "widths": [3, 4, 4], "hint_hidden": 2,
                      "temb_dim": 4, "T": 20, "mhla_heads": 2, "mhla_width": 4},
            "guidance": {"lambda_max": [0.8, 0.6, 0.5], "rho": [0.5, 1.0, 2.0]},
            "train": {"batch": 2, "pretrain_steps": 2, "steps_a": 2, "steps_b": 2, "ramp": 1},
            "sample": {"steps": 2},
        })
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = ("default", "desk", "micro")


def diff(a: RunConfig, b: RunConfig, prefix: str = "") -> list[str]:
    """Flattened key paths whose values differ."""
    out = []

    def walk(x, y, p):
        if isinstance(x, dict):
            for k in sorted(set(x) | set(y)):
                walk(x.get(k), y.get(k), f"{p}{k}.")
        elif x != y:
            out.append(f"{p[:-1]}: {x!r} != {y!r}")

    walk(a.to_dict(), b.to_dict(), prefix)
    return out


def copy_config(cfg: RunConfig) -> RunConfig:
    return copy.deepcopy(cfg)
