"""Training configuration and its flat ``key = value`` text format."""

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class TrainConfig:
    # data
    data_dir: Optional[str] = None
    test_dir: Optional[str] = None
    n_images: int = 200
    n_test: int = 100
    image_size: int = 32
    data_seed: int = 0
    labeled_fraction: float = 0.1
    # batching / optimisation
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_iterations: int = 2000
    seed: int = 0
    dtype: str = "float32"
    # model
    num_classes: int = 2
    in_channels: int = 1
    base_width: int = 8
    depth: int = 3
    spatial_rank: int = 2
    patch: int = 4
    use_value_proj: bool = False
    # method
    upg: bool = True
    ife: bool = True
    ic: bool = True
    unsup: bool = True
    tau: float = 0.5
    bank_capacity: int = 32
    lambda_q: float = 0.2
    lambda_c: float = 0.5
    lambda_f: float = 0.1
    beta_warm: float = 15.0
    beta_0: float = 0.01
    copy_paste_prob: float = 0.5
    copy_paste_ratio: float = 0.25
    # output
    out_dir: str = "runs/default"
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0.0 < self.labeled_fraction < 1.0:
            raise ConfigError("labeled_fraction must be in (0, 1)")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0.0 <= self.copy_paste_ratio <= 1.0 or not 0.0 <= self.copy_paste_prob <= 1.0:
            raise ConfigError("copy-paste ratio and probability must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def baseline(self):
        """Labeled-only baseline: every method component switched off."""
        return self.replace(upg=False, ife=False, ic=False, unsup=False)


def _coerce(name, kind, raw):
    text = raw.strip()
    if kind in (Optional[str],) and text.lower() in ("", "none", "null"):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return text


def parse_config_text(text, base=None):
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else (":" if ":" in line else None)
        if sep is None:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split(sep, 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], value)
    base = base or TrainConfig()
    return base.replace(**values)


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def dump_config(cfg):
    lines = []
    for key, value in cfg.to_dict().items():
        if value is None:
            value = "none"
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}\n")
    return "".join(lines)
