"""Visual attention quality: selectiveness, vision-centricity and keyframe AUROC."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import AttentionRow, TokenLayout, entropy, restrict_to_visual
from .errors import DegenerateLabels, EmptyInput, ShapeError

CSV_COLUMNS = ("layer", "head", "selectiveness", "centricity", "auroc", "score")


@dataclass(frozen=True)
class KeyframeAnnotation:
    """Binary keyframe flag per frame, in the order of ``layout.frame_spans``."""

    frame_flags: tuple[int, ...]

    def __post_init__(self):
        flags = tuple(int(f) for f in self.frame_flags)
        if any(f not in (0, 1) for f in flags):
            raise ValueError("frame flags must be 0 or 1")
        object.__setattr__(self, "frame_flags", flags)

    def token_flags(self, layout: TokenLayout) -> np.ndarray:
        if len(self.frame_flags) != layout.n_frames:
            raise ShapeError(f"{len(self.frame_flags)} frame flags for {layout.n_frames} frames")
        return np.concatenate([
            np.full(stop - start, flag, dtype=int)
            for flag, (_, start, stop) in zip(self.frame_flags, layout.frame_spans)
        ])

    @property
    def is_degenerate(self) -> bool:
        return len(set(self.frame_flags)) < 2

    def keyframe_positions(self, layout: TokenLayout) -> np.ndarray:
        """Absolute sequence positions of keyframe tokens."""
        return layout.visual_indices[self.token_flags(layout) == 1]

    def to_dict(self) -> dict:
        return {"frame_flags": list(self.frame_flags)}

    @classmethod
    def from_dict(cls, d: dict) -> "KeyframeAnnotation":
        return cls(tuple(d["frame_flags"]))


@dataclass(frozen=True)
class QualityReport:
    layer: int
    head: int | None
    selectiveness: float
    vision_centricity: float
    keyframe_auroc: float | None
    score: float

    def to_dict(self) -> dict:
        return asdict(self)


def mean_attention(rows: Sequence[AttentionRow]) -> AttentionRow:
    """Elementwise mean; the result carries the first row's layer and ``head=-1``
    unless all rows come from the same head."""
    rows = list(rows)
    if not rows:
        raise EmptyInput("mean_attention needs at least one row")
    n = rows[0].weights.size
    if any(r.weights.size != n for r in rows):
        raise ShapeError("rows have different lengths")
    w = np.mean([r.weights for r in rows], axis=0)
    heads = {r.head for r in rows}
    return AttentionRow(rows[0].layer, rows[0].head if len(heads) == 1 else -1, w)


def selectiveness(row: AttentionRow, layout: TokenLayout) -> float:
    """One minus the visual entropy normalized by ``ln N_vis``."""
    p = restrict_to_visual(row, layout, renormalize=True)
    n = layout.n_visual
    if n == 1:
        return 1.0
    return float(min(1.0, max(0.0, 1.0 - entropy(p) / np.log(n))))


def vision_centricity(row: AttentionRow, layout: TokenLayout) -> float:
    # a normalized row can sum a few ulps past 1
    return float(min(1.0, restrict_to_visual(row, layout, renormalize=False).sum()))


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUROC with mid-rank ties (half credit per tied pair)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUROC needs at least one positive and one negative token")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def keyframe_auroc(row: AttentionRow, layout: TokenLayout, ann: KeyframeAnnotation) -> float:
    scores = restrict_to_visual(row, layout, renormalize=True).values
    return auroc(scores, ann.token_flags(layout))


def combine_components(sel: float, cent: float, auc: float | None, score_mode: str = "sum") -> float:
    """Sum (or product) of the available quality components."""
    parts = [sel, cent] + ([auc] if auc is not None else [])
    if score_mode == "sum":
        return float(sum(parts))
    if score_mode == "product":
        return float(np.prod(parts))
    raise ValueError(f"unknown score mode {score_mode!r}")


def quality_score(row: AttentionRow, layout: TokenLayout, ann: KeyframeAnnotation | None,
                  score_mode: str = "sum") -> QualityReport:
    """Quality report for one (possibly head-averaged) row.

    Without an annotation the AUROC component is ``None`` and the score
    combines only the other two components.
    """
    sel = selectiveness(row, layout)
    cent = vision_centricity(row, layout)
    auc = keyframe_auroc(row, layout, ann) if ann is not None else None
    head = None if row.head < 0 else row.head
    return QualityReport(row.layer, head, sel, cent, auc, combine_components(sel, cent, auc, score_mode))


def _average_reports(reports: Sequence[QualityReport], score_mode: str) -> QualityReport:
    first = reports[0]
    sel = float(np.mean([r.selectiveness for r in reports]))
    cent = float(np.mean([r.vision_centricity for r in reports]))
    aucs = [r.keyframe_auroc for r in reports]
    auc = None if any(a is None for a in aucs) else float(np.mean(aucs))
    return QualityReport(first.layer, first.head, sel, cent, auc, combine_components(sel, cent, auc, score_mode))


def _sort_key(r: QualityReport):
    return (-r.score, r.layer, -1 if r.head is None else r.head)


def rank_layers_heads(dumps, ann: KeyframeAnnotation | None = None, score_mode: str = "sum"
                      ) -> tuple[list[QualityReport], list[QualityReport]]:
    """Rank layers (head-averaged) and individual heads by quality score.

    ``dumps`` is one dump or a sequence of dumps (one per sample). With several
    samples the per-sample reports are averaged. ``ann`` overrides each dump's
    own keyframes. Returns ``(layer_reports, head_reports)``, each sorted by
    descending score with ties broken by ascending (layer, head).
    """
    if hasattr(dumps, "rows"):
        dumps = [dumps]
    dumps = list(dumps)
    if not dumps:
        raise EmptyInput("no dumps to rank")
    per_layer: dict[int, list[QualityReport]] = {}
    per_head: dict[tuple[int, int], list[QualityReport]] = {}
    for dump in dumps:
        a = ann if ann is not None else dump.keyframes
        if dump.layers < 1:
            raise EmptyInput("dump has no layers")
        for layer in range(dump.layers):
            rows = [dump.row(layer, h) for h in range(dump.heads)]
            per_layer.setdefault(layer, []).append(
                quality_score(mean_attention(rows), dump.layout, a, score_mode))
            for row in rows:
                per_head.setdefault((layer, row.head), []).append(quality_score(row, dump.layout, a, score_mode))
    layer_reports = [_average_reports(v, score_mode) for v in per_layer.values()]
    layer_reports = [QualityReport(r.layer, None, r.selectiveness, r.vision_centricity, r.keyframe_auroc, r.score)
                     for r in layer_reports]
    head_reports = [_average_reports(v, score_mode) for v in per_head.values()]
    return sorted(layer_reports, key=_sort_key), sorted(head_reports, key=_sort_key)


def reports_to_json(reports: Iterable[QualityReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, allow_nan=False)


def reports_to_csv(reports: Iterable[QualityReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow([
            r.layer, "" if r.head is None else r.head, repr(r.selectiveness), repr(r.vision_centricity),
            "" if r.keyframe_auroc is None else repr(r.keyframe_auroc), repr(r.score),
        ])
    return buf.getvalue()
