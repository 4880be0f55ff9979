"""Training configuration and its sectioned ``key = value`` text format."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace

from xda.segnet import PERTURBATIONS, ModelConfig
from xda.synthdata import DataConfig

LOSS_NAMES = ("sup", "tgt", "t2s", "s2t", "attn")


@dataclass(frozen=True)
class Toggles:
    sup: bool = True
    tgt: bool = True
    t2s: bool = True
    s2t: bool = True
    attn: bool = True
    stop_query_grad: bool = True
    perturbation: str = "none"

    @property
    def needs_target(self):
        return self.tgt or self.s2t or self.t2s or self.attn


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(height=64, width=64))
    data: DataConfig = field(default_factory=DataConfig)
    losses: Toggles = field(default_factory=Toggles)
    lambda_attn: float = 1.0
    ema_alpha: float = 0.99
    tau: float = 0.968
    lr_encoder: float = 6e-4
    lr_decoder: float = 6e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 2000
    batch_size: int = 2
    warmup: int = 100
    poly_power: float = 1.0
    seed: int = 0
    precision: int = 32
    eval_every: int = 0
    oracle: bool = False

    def __post_init__(self):
        t = self.losses
        if not any(getattr(t, n) for n in LOSS_NAMES):
            raise ValueError("at least one loss must be enabled")
        if t.perturbation not in PERTURBATIONS:
            raise ValueError(f"perturbation must be one of {PERTURBATIONS}")
        for name in ("lambda_attn", "lr_encoder", "lr_decoder", "weight_decay", "poly_power"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.iterations < 0 or self.batch_size < 1 or self.warmup < 0:
            raise ValueError("iterations, batch_size and warmup must be non-negative (batch >= 1)")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if (self.model.height, self.model.width) != (self.data.height, self.data.width):
            raise ValueError("model input size must match the data size")
        if self.model.classes != self.data.classes:
            raise ValueError("model and data class counts differ")
        if self.oracle and t.needs_target:
            raise ValueError("oracle mode trains on labelled target images with the supervised loss only")

    @property
    def dtype(self):
        return "float32" if self.precision == 32 else "float64"

    def with_losses(self, **kw):
        return replace(self, losses=replace(self.losses, **kw))

    # -- text format -----------------------------------------------------------

    def to_text(self):
        """Canonical text form; the config hash is taken over this string."""
        sections = {
            "model": asdict(self.model),
            "data": {k: v for k, v in asdict(self.data).items() if k != "shift"},
            "shift": asdict(self.data.shift),
            "losses": asdict(self.losses),
            "train": {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("model", "data", "losses")},
        }
        lines = []
        for sec, values in sections.items():
            lines.append(f"[{sec}]")
            for k, v in values.items():
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    @classmethod
    def from_text(cls, text):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        known = {"model", "data", "shift", "losses", "train"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        get = lambda sec: dict(cp[sec]) if cp.has_section(sec) else {}
        base = cls()
        model = _build(base.model, get("model"))
        shift = _build(base.data.shift, get("shift"))
        data = _build(replace(base.data, shift=shift), get("data"))
        losses = _build(base.losses, get("losses"))
        return _build(replace(base, model=model, data=data, losses=losses), get("train"))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_text(f.read())

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(","))
    return raw


def _build(base, values):
    """Copy of dataclass instance ``base`` with ``values`` parsed over it."""
    names = {f.name for f in fields(base)}
    kw = {}
    for k, raw in values.items():
        if k not in names:
            raise ValueError(f"unknown key {k!r} for {type(base).__name__}")
        kw[k] = _parse(raw, getattr(base, k))
    return replace(base, **kw)


# -- ablation rows ------------------------------------------------------------

SOURCE_ONLY = dict(sup=True, tgt=False, t2s=False, s2t=False, attn=False, stop_query_grad=True)

ABLATION_ROWS = {
    "S&T": dict(sup=True, tgt=True, t2s=False, s2t=False, attn=False, stop_query_grad=True),
    "+T2S": dict(sup=True, tgt=True, t2s=True, s2t=False, attn=False, stop_query_grad=True),
    "+S2T": dict(sup=True, tgt=True, t2s=False, s2t=True, attn=False, stop_query_grad=True),
    "+T2S+S2T": dict(sup=True, tgt=True, t2s=True, s2t=True, attn=False, stop_query_grad=True),
    "+Attn": dict(sup=True, tgt=True, t2s=False, s2t=False, attn=True, stop_query_grad=True),
    "+all w/o stop-grad": dict(sup=True, tgt=True, t2s=True, s2t=True, attn=True, stop_query_grad=False),
    "full": dict(sup=True, tgt=True, t2s=True, s2t=True, attn=True, stop_query_grad=True),
}

LAMBDA_SWEEP = (0.1, 1.0, 10.0)
