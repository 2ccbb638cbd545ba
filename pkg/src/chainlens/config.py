"""Pipeline configuration: a flat ``key = value`` file plus command-line overrides."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Mapping

from .features import DEFAULT_STATS, DEFAULT_WINDOW, STAT_FUNCS
from .graphs import GRANULARITIES
from .synthgen import read_kv

_TUPLE_INT = ("variants",)
_TUPLE_STR = ("granularities", "heuristics", "stats")
_SECRET = ("rpc_pass",)
_NOT_HASHED = ("out",) + _SECRET


@dataclass(frozen=True)
class PipelineConfig:
    input: str = "txs.jsonl"
    labels: str = ""
    out: str = "chainlens-out"
    rpc_url: str = ""
    rpc_user: str = ""
    rpc_pass: str = ""
    from_height: int = 0
    to_height: int = 0
    granularities: tuple[str, ...] = GRANULARITIES
    variants: tuple[int, ...] = (1, 2, 3)
    heuristics: tuple[str, ...] = ("multi_input", "change")
    growth_cap: int = 100
    k: int = 10
    epsilon: float = 12.0
    seed: int = 0
    stats: tuple[str, ...] = DEFAULT_STATS
    window: int = DEFAULT_WINDOW
    x_min: float = 2.3
    reference: str = ""

    def __post_init__(self):
        if not self.granularities:
            raise ValueError("at least one granularity is required")
        bad = [g for g in self.granularities if g not in GRANULARITIES]
        if bad:
            raise ValueError(f"unknown granularities {bad}; choose from {list(GRANULARITIES)}")
        if not self.variants or any(v not in (1, 2, 3) for v in self.variants):
            raise ValueError("variants must be a non-empty subset of {1, 2, 3}")
        if not 0 <= self.epsilon <= 20:
            raise ValueError("epsilon must lie in [0, 20]")
        if self.k < 1 or self.window < 1 or self.growth_cap < 1:
            raise ValueError("k, window and growth_cap must be >= 1")
        if not self.stats or any(s not in STAT_FUNCS for s in self.stats):
            raise ValueError(f"stats must be drawn from {sorted(STAT_FUNCS)}")
        if self.x_min <= 0:
            raise ValueError("x_min must be positive")

    @classmethod
    def from_mapping(cls, kv: Mapping[str, object], base: "PipelineConfig | None" = None) -> "PipelineConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        cur = dataclasses.asdict(base) if base is not None else {}
        for k, v in kv.items():
            if k not in fields:
                raise ValueError(f"unknown config key {k!r}")
            cur[k] = _coerce(k, v, fields[k].default)
        return cls(**cur)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_mapping(read_kv(path))

    def to_lines(self, redact: bool = True) -> list[str]:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if redact and f.name in _SECRET and v:
                v = "***"
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name} = {v}")
        return out

    def digest(self) -> str:
        """Hash of everything that affects results (not the output path or secrets)."""
        lines = [ln for ln in self.to_lines(redact=False) if ln.split(" = ")[0] not in _NOT_HASHED]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


def _coerce(key, value, default):
    if key in _TUPLE_INT:
        items = value if isinstance(value, (list, tuple)) else str(value).split(",")
        return tuple(sorted({int(x) for x in items if str(x).strip()}))
    if key in _TUPLE_STR:
        items = value if isinstance(value, (list, tuple)) else str(value).split(",")
        return tuple(dict.fromkeys(str(x).strip() for x in items if str(x).strip()))
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)
