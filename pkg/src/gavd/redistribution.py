"""Inference-time attention interventions on recorded attention rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AttentionRow, TokenLayout
from .errors import DegenerateRedistribution, EmptyKeyframes, TargetNotFound
from .grounding import KeyframeAnnotation
from .sinks import HeadSelection

PROPORTIONAL = "proportional_keyframes"
UNIFORM = "uniform_all_frames"
NONE = "none"
STRATEGIES = (PROPORTIONAL, UNIFORM, NONE)


@dataclass(frozen=True)
class RedistributionPlan:
    strategy: str
    target: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        target = self.target
        if isinstance(target, HeadSelection):
            target = tuple((target.layer, h) for h in target.heads)
        object.__setattr__(self, "target", tuple((int(l), int(h)) for l, h in target))
        if self.strategy == NONE and self.target:
            raise ValueError("strategy 'none' takes no targets")


def _proportional(w: np.ndarray, layout: TokenLayout, ann: KeyframeAnnotation) -> np.ndarray:
    vis = layout.visual_indices
    key = ann.token_flags(layout) == 1
    if not key.any():
        raise EmptyKeyframes("no keyframe tokens to redistribute onto")
    key_mass = w[vis[key]].sum()
    # summed in two parts so an already-redistributed row rescales by exactly 1
    total = key_mass + w[vis[~key]].sum()
    if not key_mass > 0:
        raise DegenerateRedistribution("no attention mass on keyframe tokens")
    out = w.copy()
    out[vis[key]] = w[vis[key]] * (total / key_mass)
    out[vis[~key]] = 0.0
    return out


def redistribute_proportional(row: AttentionRow, layout: TokenLayout, ann: KeyframeAnnotation) -> AttentionRow:
    """Move all visual mass onto keyframe tokens, keeping within-keyframe ratios.

    Text and system positions are copied unchanged.
    """
    return AttentionRow(row.layer, row.head, _proportional(row.weights, layout, ann))


def redistribute_uniform(row: AttentionRow, layout: TokenLayout) -> AttentionRow:
    """Spread the row's visual mass evenly over every visual token."""
    vis = layout.visual_indices
    out = row.weights.copy()
    out[vis] = row.weights[vis].sum() / vis.size
    return AttentionRow(row.layer, row.head, out)


def apply_plan(dump, plan: RedistributionPlan, ann: KeyframeAnnotation | None = None):
    """New dump with the targeted rows replaced; every other row is left as is."""
    if plan.strategy == NONE:
        return dump
    if ann is None:
        ann = dump.keyframes
    if plan.strategy == PROPORTIONAL and ann is None:
        raise EmptyKeyframes("proportional redistribution needs a keyframe annotation")
    rows = dump.rows.copy()
    for layer, head in plan.target:
        if not (0 <= layer < dump.layers and 0 <= head < dump.heads):
            raise TargetNotFound(f"dump has no layer {layer} head {head}")
        row = dump.row(layer, head)
        if plan.strategy == PROPORTIONAL:
            new = redistribute_proportional(row, dump.layout, ann)
        else:
            new = redistribute_uniform(row, dump.layout)
        rows[layer, head] = new.weights
    return dump.with_rows(rows)
