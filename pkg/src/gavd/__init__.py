"""Attention grounding analysis and dual-pathway attention training tools.

Core pieces: visual attention quality metrics, sink-aware head selection,
cross-pathway head matching, the grounding objectives, inference-time
attention redistribution, and a small numpy model that exercises them.
"""

from .core import AttentionRow, ProbVec, TokenLayout, entropy, kl_divergence, restrict_to_visual, sharpen
from .dump import AttentionDump, load_dump, save_dump
from .grounding import KeyframeAnnotation, QualityReport, keyframe_auroc, quality_score, rank_layers_heads
from .matching import MatchResult, hungarian_solve, match_heads
from .objectives import LossBundle, LossConfig, total_loss
from .redistribution import RedistributionPlan, apply_plan, redistribute_proportional
from .sinks import HeadSelection, SinkConfig, detect_sink_tokens, select_top_k_heads, vnsr

__version__ = "0.1.0"

__all__ = [
    "AttentionDump", "AttentionRow", "HeadSelection", "KeyframeAnnotation", "LossBundle", "LossConfig",
    "MatchResult", "ProbVec", "QualityReport", "RedistributionPlan", "SinkConfig", "TokenLayout",
    "apply_plan", "detect_sink_tokens", "entropy", "hungarian_solve", "keyframe_auroc", "kl_divergence",
    "load_dump", "match_heads", "quality_score", "rank_layers_heads", "redistribute_proportional",
    "restrict_to_visual", "save_dump", "select_top_k_heads", "sharpen", "total_loss", "vnsr",
]
