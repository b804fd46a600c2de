"""Token layouts, attention rows and the distribution math used everywhere else.

All logarithms are natural logs, so entropies and divergences are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import DegenerateDistribution, ShapeError

ROLES = ("system", "text", "visual")
KL_EPSILON = 1e-8
ROW_ATOL = 1e-6
PROB_ATOL = 1e-9


@dataclass(frozen=True)
class TokenLayout:
    """Partition of sequence positions into system/text/visual roles.

    ``frame_spans`` holds ``(frame_index, start, stop)`` triples with ``stop``
    exclusive; together they must cover exactly the visual positions.
    """

    seq_len: int
    roles: tuple[str, ...]
    frame_spans: tuple[tuple[int, int, int], ...]
    last_prompt_index: int

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(self.roles))
        object.__setattr__(self, "frame_spans", tuple(tuple(int(v) for v in s) for s in self.frame_spans))
        if len(self.roles) != self.seq_len:
            raise ShapeError(f"roles has {len(self.roles)} entries, seq_len is {self.seq_len}")
        bad = [r for r in self.roles if r not in ROLES]
        if bad:
            raise ValueError(f"unknown role {bad[0]!r}")
        if not 0 <= self.last_prompt_index < self.seq_len:
            raise ValueError("last_prompt_index must lie inside the sequence")
        covered: list[int] = []
        prev_stop = -1
        prev_frame = None
        for frame, start, stop in self.frame_spans:
            if start >= stop:
                raise ValueError(f"frame {frame} has an empty span")
            if start < prev_stop:
                raise ValueError("frame spans overlap or are out of order")
            if prev_frame is not None and frame <= prev_frame:
                raise ValueError("frame indices must be increasing")
            covered.extend(range(start, stop))
            prev_stop, prev_frame = stop, frame
        visual = [i for i, r in enumerate(self.roles) if r == "visual"]
        if covered != visual:
            raise ValueError("frame spans do not cover exactly the visual positions")

    @classmethod
    def build(cls, n_system: int, n_frames: int, tokens_per_frame: int, n_text: int) -> "TokenLayout":
        """System tokens, then ``n_frames`` equal frame blocks, then the text prompt."""
        roles = ["system"] * n_system + ["visual"] * (n_frames * tokens_per_frame) + ["text"] * n_text
        spans = [
            (f, n_system + f * tokens_per_frame, n_system + (f + 1) * tokens_per_frame)
            for f in range(n_frames)
        ]
        return cls(len(roles), tuple(roles), tuple(spans), len(roles) - 1)

    @property
    def visual_indices(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == "visual"], dtype=int)

    @property
    def n_visual(self) -> int:
        return sum(stop - start for _, start, stop in self.frame_spans)

    @property
    def n_frames(self) -> int:
        return len(self.frame_spans)

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "roles": list(self.roles),
            "frame_spans": [list(s) for s in self.frame_spans],
            "last_prompt_index": self.last_prompt_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenLayout":
        return cls(int(d["seq_len"]), tuple(d["roles"]), tuple(tuple(s) for s in d["frame_spans"]),
                   int(d["last_prompt_index"]))


@dataclass(frozen=True)
class AttentionRow:
    """Attention of one head from the last prompt token over the whole sequence."""

    layer: int
    head: int
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ShapeError("attention weights must be a vector")
        if not np.all(np.isfinite(w)):
            raise ValueError("attention weights must be finite")
        if np.any(w < 0):
            raise ValueError("attention weights must be nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def is_normalized(self, atol: float = ROW_ATOL) -> bool:
        return abs(float(self.weights.sum()) - 1.0) <= atol


@dataclass(frozen=True)
class ProbVec:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ShapeError("ProbVec must be a nonempty vector")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("ProbVec entries must be finite and nonnegative")
        if abs(v.sum() - 1.0) > PROB_ATOL:
            raise ValueError(f"ProbVec sums to {v.sum()!r}, not 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def support_size(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.size


Distribution = Union[ProbVec, Sequence[float], np.ndarray]


def as_array(p: Distribution) -> np.ndarray:
    if isinstance(p, ProbVec):
        return p.values
    return np.asarray(p, dtype=float)


def normalize(v: Sequence[float] | np.ndarray) -> ProbVec:
    v = np.asarray(v, dtype=float)
    s = v.sum()
    if not s > 0:
        raise DegenerateDistribution("cannot normalize a vector with no mass")
    return ProbVec(v / s)


def restrict_to_visual(row: AttentionRow, layout: TokenLayout, renormalize: bool = True):
    """Weights of ``row`` at the visual positions of ``layout``.

    With ``renormalize`` the result is a ``ProbVec``; otherwise the raw
    visual weights are returned as an array.
    """
    if row.weights.size != layout.seq_len:
        raise ShapeError(f"row has length {row.weights.size}, layout seq_len is {layout.seq_len}")
    vis = row.weights[layout.visual_indices]
    if not renormalize:
        return vis.copy()
    if not vis.sum() > 0:
        raise DegenerateDistribution(f"layer {row.layer} head {row.head} has no visual attention mass")
    return normalize(vis)


def entropy(p: Distribution) -> float:
    """Shannon entropy in nats with ``0 ln 0 = 0``."""
    p = as_array(p)
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


def smooth(q: Distribution, eps: float = KL_EPSILON) -> np.ndarray:
    """Clamp entries to at least ``eps`` and renormalize."""
    q = np.maximum(as_array(q), eps)
    return q / q.sum()


def kl_divergence(p: Distribution, q: Distribution, eps: float = KL_EPSILON) -> float:
    """D(p || q) in nats, with ``q`` smoothed before evaluation."""
    p, q = as_array(p), as_array(q)
    if p.shape != q.shape:
        raise ShapeError(f"support sizes differ: {p.size} vs {q.size}")
    if np.array_equal(p, q):
        # smoothing would otherwise leave a rounding-level residue
        return 0.0
    q = smooth(q, eps)
    mask = p > 0
    return float(max(0.0, np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))))


def sharpen(p: Distribution, tau: float) -> ProbVec:
    """Temperature sharpening ``p ** (1/tau)`` renormalized; i.e. log-probabilities divided by tau."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    p = as_array(p)
    if not p.sum() > 0:
        raise DegenerateDistribution("cannot sharpen an all-zero vector")
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    z = logp / tau
    z = z - z.max()
    e = np.exp(z)
    return ProbVec(e / e.sum())


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    m = np.max(z, axis=axis, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)
