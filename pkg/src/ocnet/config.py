"""Run configuration: one flat record, stored as ``key = value`` text.

File format
-----------
One setting per line, ``key = value``. Blank lines and lines starting with
``#`` are ignored. Lists are comma separated (``stage_widths = 32,64,128``),
booleans are ``true``/``false``. Unknown keys are an error so typos do not
silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # paths
    data_root: str = "runs/data"
    out_dir: str = "runs/out"

    # synthetic data
    num_identities: int = 20
    images_per_identity: int = 40
    train_identities: int = 10
    queries_per_identity: int = 10
    num_cameras: int = 6
    image_height: int = 64
    image_width: int = 32
    occlusion_fraction: float = 0.3
    occlusion_object_share: float = 0.5
    occlusion_pi_share: float = 0.5
    data_seed: int = 0

    # backbone
    stage_widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    stage_strides: list[int] = field(default_factory=lambda: [2, 2, 2])

    # heads; 0 means "derive" (d = C/4, ram_hidden = d)
    feat_dim: int = 0
    groups: int = 4
    ram_hidden: int = 0
    center_size: int = 2
    num_parts: int = 2

    # objective
    lambda1: float = 0.8
    lambda2: float = 0.5
    lambda3: float = 0.25
    lambda4: float = 0.25
    gamma: float = 1.0
    margin: float = 0.3
    label_smooth: float = 0.1
    triplet_on_bn: bool = False

    # retrieval
    alpha: float = 1.0
    normalize_features: bool = False

    # ablation toggles; use_concat = false is the F_BB-only baseline
    use_concat: bool = True
    use_cfm: bool = True
    use_sl: bool = True
    use_ram: bool = True

    # optimisation
    lr: float = 3.5e-4
    weight_decay: float = 5e-4
    steps: int = 300
    warmup_steps: int = 30
    decay_steps: list[int] = field(default_factory=lambda: [200, 260])
    decay_factor: float = 0.1
    batch_p: int = 4
    batch_k: int = 4

    # augmentation
    aug_flip: bool = True
    aug_pad: int = 10
    aug_erase: bool = True

    seed: int = 0
    num_threads: int = 1

    def validate(self) -> "RunConfig":
        if self.num_identities <= 0 or self.images_per_identity <= 0:
            raise ConfigError("num_identities and images_per_identity must be positive")
        if not 0 < self.train_identities < self.num_identities:
            raise ConfigError("train_identities must leave at least one evaluation identity")
        if not 0 < self.queries_per_identity < self.images_per_identity:
            raise ConfigError("queries_per_identity must be in [1, images_per_identity)")
        if not 0.0 <= self.occlusion_fraction <= 1.0:
            raise ConfigError(f"occlusion_fraction must be in [0, 1], got {self.occlusion_fraction}")
        for name in ("occlusion_object_share", "occlusion_pi_share"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if abs(self.occlusion_object_share + self.occlusion_pi_share - 1.0) > 1e-9:
            raise ConfigError("occlusion_object_share + occlusion_pi_share must equal 1")
        if len(self.stage_widths) != len(self.stage_strides) or not self.stage_widths:
            raise ConfigError("stage_widths and stage_strides must be non-empty and equally long")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "gamma", "alpha", "margin"):
            v = getattr(self, name)
            if not (v >= 0.0 and v < float("inf")):
                raise ConfigError(f"{name} must be finite and nonnegative, got {v}")
        if not 0.0 <= self.label_smooth < 1.0:
            raise ConfigError("label_smooth must be in [0, 1)")
        if self.batch_k < 2:
            raise ConfigError("batch_k must be >= 2 for batch-hard triplet mining")
        if self.batch_p < 2:
            raise ConfigError("batch_p must be >= 2 so every anchor has a negative")
        return self

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.use_sl else 0.0

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(p) for p in raw.split(",") if p.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None


def dumps(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    known = {f.name: f for f in fields(cfg)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _parse(raw, getattr(cfg, key), key)
    return dataclasses.replace(cfg, **updates)


def load(path) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8")).validate()


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
