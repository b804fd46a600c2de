"""Visual sink tokens, the Visual Non-Sink Ratio, and top-K head selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import AttentionRow, TokenLayout
from .errors import DegenerateDistribution, DegenerateHidden, EmptyInput, ShapeError
from .grounding import vision_centricity

DEFAULT_K = 5
DEFAULT_SINK_THRESHOLD = 20.0


@dataclass(frozen=True)
class SinkConfig:
    sink_dims: frozenset[int]
    threshold: float = DEFAULT_SINK_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "sink_dims", frozenset(int(d) for d in self.sink_dims))
        if not self.sink_dims:
            raise ValueError("sink_dims must be nonempty")
        if not self.threshold > 0:
            raise ValueError("sink threshold must be positive")


@dataclass(frozen=True)
class HiddenStates:
    """Residual-stream input to ``layer``: one row per sequence position."""

    layer: int
    states: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 2:
            raise ShapeError("hidden states must be a (seq_len, D) matrix")
        if np.isnan(s).any():
            raise ValueError("hidden states contain NaN")
        object.__setattr__(self, "states", s)


@dataclass(frozen=True)
class HeadSelection:
    layer: int
    heads: tuple[int, ...]
    vnsr: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"layer": self.layer, "heads": list(self.heads), "vnsr": list(self.vnsr)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSelection":
        return cls(int(d["layer"]), tuple(int(h) for h in d["heads"]), tuple(float(v) for v in d["vnsr"]))


def sink_dimension_value(x: np.ndarray, cfg: SinkConfig) -> float:
    """Largest RMS-normalized magnitude across the sink dimensions."""
    x = np.asarray(x, dtype=float)
    rms = np.sqrt(np.mean(x * x))
    if not rms > 0:
        raise DegenerateHidden("hidden vector has zero RMS")
    if max(cfg.sink_dims) >= x.size:
        raise ShapeError(f"sink dimension {max(cfg.sink_dims)} outside hidden size {x.size}")
    dims = np.fromiter(sorted(cfg.sink_dims), dtype=int)
    return float(np.max(np.abs(x[dims] / rms)))


def sink_dimension_values(states: np.ndarray, cfg: SinkConfig) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    rms = np.sqrt(np.mean(states * states, axis=-1))
    if np.any(rms <= 0):
        raise DegenerateHidden("a hidden vector has zero RMS")
    dims = np.fromiter(sorted(cfg.sink_dims), dtype=int)
    return np.max(np.abs(states[..., dims]), axis=-1) / rms


def detect_sink_tokens(h: HiddenStates, layout: TokenLayout, cfg: SinkConfig) -> frozenset[int]:
    """Absolute positions of visual tokens whose sink dimension value reaches the threshold."""
    if h.states.shape[0] != layout.seq_len:
        raise ShapeError(f"hidden states cover {h.states.shape[0]} positions, seq_len is {layout.seq_len}")
    vis = layout.visual_indices
    phi = sink_dimension_values(h.states[vis], cfg)
    return frozenset(int(p) for p in vis[phi >= cfg.threshold])


def vnsr_values(weights: np.ndarray, layout: TokenLayout, sinks: Iterable[int] = ()) -> np.ndarray:
    """VNSR of every row of a ``(heads, seq_len)`` weight matrix."""
    w = np.asarray(weights, dtype=float)[..., layout.visual_indices]
    total = w.sum(axis=-1)
    if not np.all(total > 0):
        raise DegenerateDistribution(f"row {int(np.argmin(total > 0))} has no visual attention mass")
    non_sink = ~np.isin(layout.visual_indices, np.fromiter(set(sinks), dtype=int))
    return np.minimum(1.0, w[..., non_sink].sum(axis=-1) / total)


def vnsr(row: AttentionRow, layout: TokenLayout, sinks: Iterable[int] = ()) -> float:
    """Fraction of visual attention mass on non-sink visual positions.

    ``sinks`` are absolute sequence positions; non-visual entries are ignored.
    """
    if not row.weights[layout.visual_indices].sum() > 0:
        raise DegenerateDistribution(f"layer {row.layer} head {row.head} has no visual attention mass")
    return float(vnsr_values(row.weights[None], layout, sinks)[0])


def top_k_by_key(heads: Sequence[int], keys: Sequence[float], k: int, layer: int) -> HeadSelection:
    """The ``k`` heads with the largest keys; ties go to the lower head index."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(heads) == 0:
        raise EmptyInput("no heads to select from")
    order = sorted(range(len(heads)), key=lambda i: (-keys[i], heads[i]))[: min(k, len(heads))]
    return HeadSelection(layer, tuple(int(heads[i]) for i in order), tuple(float(keys[i]) for i in order))


def select_top_k_heads(rows: Sequence[AttentionRow], layout: TokenLayout, sinks: Iterable[int] = (),
                       k: int = DEFAULT_K) -> HeadSelection:
    """Top-``k`` heads by VNSR; ties go to the lower head index."""
    if not rows:
        raise EmptyInput("no heads to select from")
    weights = np.stack([r.weights for r in rows])
    empty = weights[:, layout.visual_indices].sum(axis=1) <= 0
    if empty.any():
        r = rows[int(np.argmax(empty))]
        raise DegenerateDistribution(f"layer {r.layer} head {r.head} has no visual attention mass")
    keys = vnsr_values(weights, layout, sinks)
    return top_k_by_key([r.head for r in rows], keys, k, rows[0].layer)


def select_top_k_by_attention_sum(rows: Sequence[AttentionRow], layout: TokenLayout,
                                  k: int = DEFAULT_K) -> HeadSelection:
    """Baseline: top-``k`` heads by total visual attention mass.

    The ``vnsr`` field of the result carries the ranking key (visual mass).
    """
    if not rows:
        raise EmptyInput("no heads to select from")
    return top_k_by_key([r.head for r in rows], [vision_centricity(r, layout) for r in rows], k, rows[0].layer)
