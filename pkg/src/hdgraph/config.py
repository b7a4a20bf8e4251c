"""Run configuration: defaults, ``key = value`` config files and validation."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional

from .errors import ConfigError
from .graph import METRICS, TRANSFER_MODES
from .io import FORMATS
from .rerank import GRAPH_MODES, MISSING_HEAD_POLICIES, FusionConfig, PipelineConfig


@dataclass(frozen=True)
class RunConfig:
    k: int = 5
    lam: float = 0.5
    metric: str = "one-minus-cosine"
    graph_mode: str = "head"
    transfer_mode: str = "replace"
    missing_head_policy: str = "fallback_to_update"
    powers: tuple[int, ...] = (0, 1, 2)
    depth: int = 3
    hidden_width: int = 128
    lr: float = 0.5
    epochs: int = 100
    seed: int = 0
    min_head_score: Optional[float] = None
    iou_threshold: float = 0.5
    exclude_same_frame: bool = True
    normalize: bool = True
    format: str = "binary"
    out_dir: str = "."
    train: Optional[str] = None
    query: Optional[str] = None
    gallery: Optional[str] = None
    net: Optional[str] = None
    rankings: Optional[str] = None
    dets: Optional[str] = None
    gts: Optional[str] = None

    def validate(self) -> "RunConfig":
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        choices = {
            "metric": METRICS,
            "graph_mode": GRAPH_MODES,
            "transfer_mode": TRANSFER_MODES,
            "missing_head_policy": MISSING_HEAD_POLICIES,
            "format": FORMATS,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not self.powers or min(self.powers) < 0:
            raise ConfigError(f"powers must be non-negative integers, got {self.powers}")
        if self.depth < 1 or self.hidden_width < 1:
            raise ConfigError("depth and hidden_width must be >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.min_head_score is not None and not 0.0 <= self.min_head_score <= 1.0:
            raise ConfigError("min_head_score must lie in [0, 1]")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError("iou_threshold must lie in (0, 1]")
        return self

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            k=self.k, metric=self.metric, graph_mode=self.graph_mode,
            transfer_mode=self.transfer_mode, powers=self.powers, depth=self.depth,
            hidden_width=self.hidden_width, lr=self.lr, epochs=self.epochs, seed=self.seed,
            fusion=FusionConfig(self.lam, self.missing_head_policy),
            exclude_same_frame=self.exclude_same_frame,
        )

    def merged(self, overrides: dict) -> "RunConfig":
        known = {f.name for f in fields(self)}
        clean = {k: v for k, v in overrides.items() if v is not None and k in known}
        return replace(self, **clean)


ALIASES = {"lambda": "lam", "out-dir": "out_dir"}
_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _coerce(name: str, raw: str):
    field_type = {f.name: f.type for f in fields(RunConfig)}[name]
    if field_type.startswith("Optional") and raw.lower() in ("none", ""):
        return None
    try:
        if name == "powers":
            return tuple(int(p) for p in raw.replace(",", " ").split())
        if field_type == "bool":
            return _BOOL[raw.lower()]
        if field_type == "int":
            return int(raw)
        if "float" in field_type:
            return float(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = ALIASES.get(key, key.replace("-", "_"))
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                cfg = cfg.merged(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return cfg.merged(overrides or {}).validate()
