"""Training objective: cross-entropy, sharpened-entropy regularizer, and the
stop-gradient attention consistency loss, with gradients w.r.t. attention logits.

Attention maps here are visual-only distributions. A map restricted to the
visual tokens and renormalized is ``softmax`` of the visual attention logits,
so every gradient is returned w.r.t. those visual logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import KL_EPSILON, as_array, log_softmax
from .errors import SelectionMismatch
from .matching import MatchResult

VERIFICATION_FIXED = "verification_fixed"
GENERATION_FIXED = "generation_fixed"
SG_DIRECTIONS = (VERIFICATION_FIXED, GENERATION_FIXED)
DEFAULT_TAU_ENTROPY = 0.03


@dataclass(frozen=True)
class LossConfig:
    tau_entropy: float = DEFAULT_TAU_ENTROPY
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sg_direction: str = VERIFICATION_FIXED
    epsilon: float = KL_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not self.tau_entropy > 0:
            raise ValueError("tau_entropy must be positive")
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise ValueError("weights must be three nonnegative numbers (ce, entropy, consistency)")
        if self.sg_direction not in SG_DIRECTIONS:
            raise ValueError(f"sg_direction must be one of {SG_DIRECTIONS}")

    @property
    def trainable_pathway(self) -> str:
        return "generation" if self.sg_direction == VERIFICATION_FIXED else "verification"


@dataclass
class LossBundle:
    l_ce: float
    l_entropy: float
    l_consistency: float
    l_total: float
    # pathway name -> head -> gradient of (w_ent * L_entropy + w_con * L_consistency)
    # w.r.t. that head's visual attention logits
    grad_logits: dict[str, dict[int, np.ndarray]] = field(default_factory=dict, repr=False)

    def values(self) -> dict[str, float]:
        return {"l_ce": self.l_ce, "l_entropy": self.l_entropy,
                "l_consistency": self.l_consistency, "l_total": self.l_total}


def weighted_total(l_ce: float, l_entropy: float, l_consistency: float, weights=(1.0, 1.0, 1.0)) -> float:
    w_ce, w_ent, w_con = weights
    return float(w_ce * l_ce + w_ent * l_entropy + w_con * l_consistency)


def _logits_from_probs(p) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(as_array(p))


def cross_entropy_loss(logits, targets) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over steps and its gradient w.r.t. ``logits``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    targets = np.atleast_1d(np.asarray(targets, dtype=int))
    steps, vocab = logits.shape
    if targets.shape != (steps,):
        raise ValueError(f"expected {steps} targets, got {targets.size}")
    if np.any(targets < 0) or np.any(targets >= vocab):
        raise IndexError(f"target outside vocabulary of size {vocab}")
    logp = log_softmax(logits, axis=-1)
    loss = -float(np.mean(logp[np.arange(steps), targets]))
    grad = np.exp(logp)
    grad[np.arange(steps), targets] -= 1.0
    return loss, grad / steps


def _entropy_and_grad(z: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    logq = log_softmax(np.asarray(z, dtype=float) / tau)
    q = np.exp(logq)
    qlogq = q * np.where(q > 0, logq, 0.0)
    h = float(max(0.0, -qlogq.sum()))
    grad = -(qlogq + q * h) / tau
    return h, grad


def entropy_loss_logits(logits: Sequence[np.ndarray], tau: float) -> tuple[float, list[np.ndarray]]:
    """Mean over heads of H(softmax(z / tau)) and the per-head gradients w.r.t. ``z``."""
    if len(logits) == 0:
        raise ValueError("entropy loss needs at least one head")
    k = len(logits)
    parts = [_entropy_and_grad(z, tau) for z in logits]
    return float(sum(h for h, _ in parts) / k), [g / k for _, g in parts]


def entropy_loss(rows, cfg: LossConfig = LossConfig()) -> tuple[float, list[np.ndarray]]:
    """Sharpened-entropy regularizer on probability maps (logits taken as ``log p``)."""
    return entropy_loss_logits([_logits_from_probs(p) for p in rows], cfg.tau_entropy)


def _kl_to_softmax(target: np.ndarray, z: np.ndarray, eps: float) -> tuple[float, np.ndarray]:
    """KL(target || smooth(softmax(z))) and its gradient w.r.t. ``z``.

    Smoothing clamps entries below ``eps`` and renormalizes; clamped entries
    pass no gradient.
    """
    q = np.exp(log_softmax(np.asarray(z, dtype=float)))
    m = np.maximum(q, eps)
    s = m.sum()
    log_qs = np.log(m) - np.log(s)
    pos = target > 0
    value = float(max(0.0, np.sum(target[pos] * (np.log(target[pos]) - log_qs[pos]))))
    g = np.where(q > eps, -target / m + target.sum() / s, 0.0)
    return value, q * (g - np.dot(q, g))


def _pair_rows(train: Mapping[int, np.ndarray], fixed: Mapping[int, np.ndarray], match: MatchResult, cfg):
    side = 0 if cfg.sg_direction == VERIFICATION_FIXED else 1
    out = []
    for pair in match.pairs:
        g, v = pair[0], pair[1]
        t_head, f_head = (g, v) if side == 0 else (v, g)
        if t_head not in train or f_head not in fixed:
            raise SelectionMismatch(f"no attention row for matched pair ({g}, {v})")
        out.append((t_head, train[t_head], fixed[f_head]))
    return out


def consistency_loss_logits(gen_logits: Mapping[int, np.ndarray], ver_logits: Mapping[int, np.ndarray],
                            match: MatchResult, cfg: LossConfig = LossConfig()
                            ) -> tuple[float, dict[int, np.ndarray]]:
    """Mean KL over matched pairs with the stop-gradient side held fixed.

    ``verification_fixed``: KL(sg(ver) || gen), gradients keyed by generation head.
    ``generation_fixed``: KL(sg(gen) || ver), gradients keyed by verification head.
    """
    if cfg.sg_direction == VERIFICATION_FIXED:
        train, fixed = gen_logits, ver_logits
    else:
        train, fixed = ver_logits, gen_logits
    triples = _pair_rows(train, fixed, match, cfg)
    if not triples:
        return 0.0, {}
    k = len(triples)
    total = 0.0
    grads: dict[int, np.ndarray] = {}
    for head, z, z_fixed in triples:
        target = np.exp(log_softmax(np.asarray(z_fixed, dtype=float)))
        value, g = _kl_to_softmax(target, z, cfg.epsilon)
        total += value
        grads[head] = grads.get(head, 0.0) + g / k
    return total / k, grads


def consistency_loss(gen_rows: Mapping[int, object], ver_rows: Mapping[int, object], match: MatchResult,
                     cfg: LossConfig = LossConfig()) -> tuple[float, dict[int, np.ndarray]]:
    """Probability-map front end of :func:`consistency_loss_logits` (logits = ``log p``)."""
    return consistency_loss_logits({h: _logits_from_probs(p) for h, p in gen_rows.items()},
                                   {h: _logits_from_probs(p) for h, p in ver_rows.items()}, match, cfg)


def total_loss_logits(l_ce: float, gen_logits: Mapping[int, np.ndarray], ver_logits: Mapping[int, np.ndarray],
                      match: MatchResult, cfg: LossConfig = LossConfig()) -> LossBundle:
    """Weighted objective. The entropy term covers the matched heads of the
    trainable pathway; a term whose weight is zero is skipped and reported as 0."""
    w_ce, w_ent, w_con = cfg.weights
    trainable = cfg.trainable_pathway
    grads: dict[int, np.ndarray] = {}
    l_ent = l_con = 0.0
    if w_ent > 0 and match.pairs:
        if trainable == "generation":
            heads, source = [p[0] for p in match.pairs], gen_logits
        else:
            heads, source = [p[1] for p in match.pairs], ver_logits
        l_ent, g_ent = entropy_loss_logits([source[h] for h in heads], cfg.tau_entropy)
        for h, g in zip(heads, g_ent):
            grads[h] = grads.get(h, 0.0) + w_ent * g
    if w_con > 0:
        l_con, g_con = consistency_loss_logits(gen_logits, ver_logits, match, cfg)
        for h, g in g_con.items():
            grads[h] = grads.get(h, 0.0) + w_con * g
    total = weighted_total(l_ce, l_ent, l_con, cfg.weights)
    return LossBundle(float(l_ce), l_ent, l_con, total, {trainable: grads})


def total_loss(l_ce: float, gen_rows: Mapping[int, object], ver_rows: Mapping[int, object],
               match: MatchResult, cfg: LossConfig = LossConfig()) -> LossBundle:
    return total_loss_logits(l_ce, {h: _logits_from_probs(p) for h, p in gen_rows.items()},
                             {h: _logits_from_probs(p) for h, p in ver_rows.items()}, match, cfg)
