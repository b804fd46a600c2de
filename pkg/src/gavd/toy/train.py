"""Dual-pathway training of the toy model.

Every step runs the generation and verification prompts over the same clips,
selects the top-K heads of each pathway by VNSR at the target layer, matches
them, and descends the weighted objective. Gradients are backpropagated only
through the pathway that is not under the stop-gradient.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import AttentionRow
from ..dump import AttentionDump
from ..errors import DegenerateDistribution, TrainingDiverged
from ..grounding import auroc
from ..matching import MatchResult, match_heads, match_heads_discard, match_heads_random
from ..objectives import LossBundle, cross_entropy_loss, total_loss_logits, weighted_total
from ..sinks import HeadSelection, HiddenStates, SinkConfig, detect_sink_tokens, top_k_by_key, vnsr_values
from .config import FIRST_CLASS_TOKEN, ToyConfig
from .data import SyntheticSample, generate_dataset, stack_tokens
from .model import ForwardCache, ToyModel

log = logging.getLogger(__name__)

RELATED_TASKS = ("verification", "diffuse_summary")


@dataclass(frozen=True)
class SamplePlan:
    """Discrete choices made for one sample: head selections and the matching."""

    gen_sel: HeadSelection
    ver_sel: HeadSelection
    match: MatchResult


@dataclass
class TrainReport:
    steps: list[dict[str, float]]
    initial_auroc: float
    final_auroc: float
    initial_accuracy: float
    final_accuracy: float
    seed: int
    config: dict
    related_task: str = "verification"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "initial_keyframe_auroc": self.initial_auroc,
            "final_keyframe_auroc": self.final_auroc,
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
            "seed": self.seed,
            "related_task": self.related_task,
            "config": self.config,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    def trace(self, key: str) -> np.ndarray:
        return np.array([s[key] for s in self.steps])


def _ver_pathway(related_task: str) -> str:
    if related_task not in RELATED_TASKS:
        raise ValueError(f"related_task must be one of {RELATED_TASKS}")
    return "verification" if related_task == "verification" else "summary"


def _ver_layer(cfg: ToyConfig) -> int:
    if cfg.matching == "flexible" and cfg.ver_layer is not None:
        return cfg.ver_layer
    return cfg.target_layer


def _rows(cache: ForwardCache, b: int, sel: HeadSelection) -> dict[int, AttentionRow]:
    a = cache.last_rows(sel.layer)[b]
    return {h: AttentionRow(sel.layer, h, a[h]) for h in sel.heads}


def _select(model: ToyModel, cache: ForwardCache, b: int, layer: int) -> HeadSelection:
    """Top-K heads by VNSR, sinks detected from the residual stream entering ``layer``."""
    sink_cfg = SinkConfig(model.sink_dims, model.cfg.sink_threshold)
    sinks = detect_sink_tokens(HiddenStates(layer, cache.hidden[layer][b]), model.layout, sink_cfg)
    weights = cache.last_rows(layer)[b]
    return top_k_by_key(range(weights.shape[0]), vnsr_values(weights, model.layout, sinks), model.cfg.k_heads, layer)


def _plan(model: ToyModel, gen: ForwardCache, ver: ForwardCache, b: int, step_seed: int) -> SamplePlan:
    cfg = model.cfg
    gen_sel = _select(model, gen, b, cfg.target_layer)
    ver_sel = _select(model, ver, b, _ver_layer(cfg))
    if cfg.matching == "hungarian":
        match = match_heads(gen_sel, ver_sel, _rows(gen, b, gen_sel), _rows(ver, b, ver_sel),
                            model.layout, cfg.loss.epsilon)
    elif cfg.matching == "flexible":
        match = match_heads(gen_sel, ver_sel, _rows(gen, b, gen_sel), _rows(ver, b, ver_sel),
                            model.layout, cfg.loss.epsilon, exact_stage=False)
    elif cfg.matching == "random":
        match = match_heads_random(gen_sel, ver_sel, seed=step_seed)
    else:
        match = match_heads_discard(gen_sel, ver_sel)
    return SamplePlan(gen_sel, ver_sel, match)


@dataclass
class ObjectiveResult:
    value: float
    bundle: LossBundle
    grads: dict[str, np.ndarray] | None
    plans: list[SamplePlan]


def objective(model: ToyModel, samples: Sequence[SyntheticSample], params: dict | None = None,
              target_params: dict | None = None, plans: list[SamplePlan] | None = None,
              related_task: str = "verification", with_grads: bool = True, step: int = 0,
              ver_offsets: dict[int, np.ndarray] | None = None) -> ObjectiveResult:
    """Batch-mean objective and its parameter gradient under the stop-gradient.

    ``target_params`` evaluates the stop-gradient side of the consistency
    loss (defaults to ``params``); finite-difference checks perturb ``params``
    while holding it fixed. ``plans`` freezes the discrete head choices.
    ``ver_offsets`` perturbs the verification-pathway residual stream (see
    :meth:`ToyModel.forward_batch`).
    """
    cfg = model.cfg
    lc = cfg.loss
    params = model.params if params is None else params
    w_ce, w_ent, w_con = lc.weights
    ver_path = _ver_pathway(related_task)
    trainable = lc.trainable_pathway
    gen_tokens = stack_tokens(samples, "generation")
    ver_tokens = stack_tokens(samples, ver_path)
    gen = model.forward_batch(gen_tokens, params)
    ver = model.forward_batch(ver_tokens, params, ver_offsets)
    if target_params is None or target_params is params:
        gen_t, ver_t = gen, ver
    elif trainable == "generation":
        gen_t, ver_t = gen, model.forward_batch(ver_tokens, target_params, ver_offsets)
    else:
        gen_t, ver_t = model.forward_batch(gen_tokens, target_params), ver
    b_size = len(samples)
    vis = model.layout.visual_indices
    lg, lv = cfg.target_layer, _ver_layer(cfg)

    if plans is None:
        seeds = np.random.default_rng([cfg.seed, step, 31337]).integers(2**31, size=b_size)
        plans = [_plan(model, gen_t, ver_t, b, int(seeds[b])) for b in range(b_size)]

    l_ce = 0.0
    d_logits = {"generation": None, "verification": None}
    if w_ce > 0:
        if cfg.ce_placement in ("generation_only", "both"):
            value, g = cross_entropy_loss(gen.logits, [s.gen_target for s in samples])
            l_ce += value
            d_logits["generation"] = w_ce * g
        if cfg.ce_placement in ("verification_only", "both") and ver_path == "verification":
            value, g = cross_entropy_loss(ver.logits, [s.ver_target for s in samples])
            l_ce += value
            d_logits["verification"] = w_ce * g

    live = {"generation": gen, "verification": ver}[trainable]
    train_layer = lg if trainable == "generation" else lv
    d_scores = np.zeros((b_size, cfg.heads_per_layer, model.layout.seq_len))
    ent = con = 0.0
    for b, plan in enumerate(plans):
        if trainable == "generation":
            z_gen = {h: live.last_scores(lg)[b, h, vis] for h in plan.gen_sel.heads}
            z_ver = {h: ver_t.last_scores(lv)[b, h, vis] for h in plan.ver_sel.heads}
        else:
            z_gen = {h: gen_t.last_scores(lg)[b, h, vis] for h in plan.gen_sel.heads}
            z_ver = {h: live.last_scores(lv)[b, h, vis] for h in plan.ver_sel.heads}
        if ver_path == "summary":
            # the summary task's correct behaviour is uniform attention over the clip
            z_ver = {h: np.zeros(vis.size) for h in z_ver}
        bundle = total_loss_logits(0.0, z_gen, z_ver, plan.match, lc)
        ent += bundle.l_entropy
        con += bundle.l_consistency
        for h, g in bundle.grad_logits.get(trainable, {}).items():
            d_scores[b, h, vis] += g / b_size
    ent /= b_size
    con /= b_size
    total = weighted_total(l_ce, ent, con, lc.weights)
    result_bundle = LossBundle(l_ce, ent, con, total)

    grads = None
    if with_grads:
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        attn_upstream = {"generation": None, "verification": None}
        if w_ent > 0 or w_con > 0:
            attn_upstream[trainable] = {train_layer: d_scores}
        for name, cache in (("generation", gen), ("verification", ver)):
            if d_logits[name] is None and attn_upstream[name] is None:
                continue
            g = model.backward(cache, d_logits[name], attn_upstream[name], params)
            for k in grads:
                grads[k] += g[k]
    return ObjectiveResult(total, result_bundle, grads, plans)


def evaluate(model: ToyModel, samples: Sequence[SyntheticSample]) -> dict[str, float]:
    """Generation accuracy (argmax over class tokens) and mean keyframe AUROC of
    the VNSR-selected generation heads at the target layer."""
    cfg = model.cfg
    gen = model.forward_batch(stack_tokens(samples, "generation"))
    ver = model.forward_batch(stack_tokens(samples, "verification"))
    class_logits = gen.logits[:, FIRST_CLASS_TOKEN:FIRST_CLASS_TOKEN + cfg.num_classes]
    acc = float(np.mean(np.argmax(class_logits, axis=1) == np.array([s.label for s in samples])))
    vis = model.layout.visual_indices
    gen_auc, ver_auc = [], []
    for b, s in enumerate(samples):
        labels = s.keyframes.token_flags(model.layout)
        for cache, out, layer in ((gen, gen_auc, cfg.target_layer), (ver, ver_auc, _ver_layer(cfg))):
            sel = _select(model, cache, b, layer)
            rows = cache.last_rows(layer)[b]
            out.append(np.mean([auroc(rows[h, vis], labels) for h in sel.heads]))
    return {"accuracy": acc, "keyframe_auroc": float(np.mean(gen_auc)),
            "ver_keyframe_auroc": float(np.mean(ver_auc))}


def _batches(cfg: ToyConfig, n: int):
    rng = np.random.default_rng([cfg.seed, 2718])
    if cfg.batch_size is None or cfg.batch_size >= n:
        while True:
            yield np.arange(n)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            yield order[i:i + cfg.batch_size]


def train(cfg: ToyConfig, dataset: Sequence[SyntheticSample] | None = None,
          eval_dataset: Sequence[SyntheticSample] | None = None, related_task: str = "verification",
          model: ToyModel | None = None, callback=None) -> TrainReport:
    """Plain gradient descent on the dual-pathway objective.

    ``dataset`` defaults to ``cfg.n_train`` generated samples; evaluation uses
    ``eval_dataset`` (default: ``cfg.n_eval`` samples from a disjoint seed).
    ``callback(step, model, result)`` runs after each objective evaluation,
    before the update.
    """
    _ver_pathway(related_task)
    if dataset is None:
        dataset = generate_dataset(cfg, cfg.n_train)
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    if eval_dataset is None:
        eval_dataset = generate_dataset(cfg, cfg.n_eval, seed=cfg.seed + 1_000_003)
    model = ToyModel(cfg) if model is None else model
    before = evaluate(model, eval_dataset)
    steps: list[dict[str, float]] = []
    batches = _batches(cfg, len(dataset))
    for step in range(cfg.steps):
        idx = next(batches)
        try:
            res = objective(model, [dataset[i] for i in idx], related_task=related_task, step=step)
        except (DegenerateDistribution, FloatingPointError) as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        if callback is not None:
            callback(step, model, res)
        values = res.bundle.values()
        if not all(np.isfinite(v) for v in values.values()):
            raise TrainingDiverged(step)
        for k, g in res.grads.items():
            model.params[k] -= cfg.learning_rate * g
        if not all(np.all(np.isfinite(p)) for p in model.params.values()):
            raise TrainingDiverged(step, "non-finite parameters")
        steps.append(values)
        if step % 50 == 0:
            log.debug("step %d %s", step, values)
    after = evaluate(model, eval_dataset)
    return TrainReport(steps, before["keyframe_auroc"], after["keyframe_auroc"], before["accuracy"],
                       after["accuracy"], cfg.seed, cfg.to_dict(), related_task,
                       {"initial_ver_keyframe_auroc": before["ver_keyframe_auroc"],
                        "final_ver_keyframe_auroc": after["ver_keyframe_auroc"]})


def run_related_task_ablation(cfg: ToyConfig, dataset=None, related_task: str = "verification",
                              eval_dataset=None) -> TrainReport:
    """Train with the verification prompt or with a diffuse summary task as the related task."""
    return train(cfg, dataset, eval_dataset, related_task=related_task)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    grad_norm: float
    loss: float
    n_checks: int
    per_param: dict

    def to_dict(self) -> dict:
        return {"max_rel_error": self.max_rel_error, "grad_norm": self.grad_norm, "loss": self.loss,
                "n_checks": self.n_checks, "per_param": self.per_param}


GRADCHECK_FLOOR = 1e-4


def rel_error(a: float, b: float, floor: float = GRADCHECK_FLOOR) -> float:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps vanishing components
    from turning round-off into large ratios."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck_config(seed: int = 0, **overrides) -> ToyConfig:
    """A scaled-down model small enough for finite differences."""
    base = dict(num_frames=4, tokens_per_frame=2, vocab_size=16, embed_dim=16, num_layers=2,
                heads_per_layer=4, k_heads=3, keyframe_frames=1, n_train=4, n_eval=4, seed=seed,
                sink_threshold=3.0)
    base.update(overrides)
    return ToyConfig(**base)


def gradient_check(model: ToyModel, sample, cfg: ToyConfig | None = None, step: float = 1e-5,
                   coords_per_param: int = 4, seed: int = 0,
                   related_task: str = "verification") -> GradCheckReport:
    """Compare the analytic gradient of the total objective with central differences.

    Each parameter block is probed along one random direction and at
    ``coords_per_param`` single coordinates. The head plans and the
    stop-gradient side are frozen at the unperturbed values, which is exactly
    the function the analytic gradient differentiates.
    """
    if cfg is not None:
        model = ToyModel(cfg, {k: v.copy() for k, v in model.params.items()})
    samples = [sample] if isinstance(sample, SyntheticSample) else list(sample)
    base = objective(model, samples, related_task=related_task)
    frozen = {k: v.copy() for k, v in model.params.items()}
    rng = np.random.default_rng([seed, 65537])

    def loss_at(name: str, delta: np.ndarray) -> float:
        params = dict(frozen)
        params[name] = frozen[name] + delta
        return objective(model, samples, params=params, target_params=frozen, plans=base.plans,
                         related_task=related_task, with_grads=False).value

    worst, per_param, n = 0.0, {}, 0
    for name, g in base.grads.items():
        probes = [rng.normal(size=g.shape)]
        probes[0] /= np.linalg.norm(probes[0])
        for flat in rng.choice(g.size, size=min(coords_per_param, g.size), replace=False):
            e = np.zeros(g.size)
            e[flat] = 1.0
            probes.append(e.reshape(g.shape))
        err = 0.0
        for d in probes:
            fd = (loss_at(name, step * d) - loss_at(name, -step * d)) / (2 * step)
            err = max(err, rel_error(float(np.sum(g * d)), fd))
            n += 1
        per_param[name] = err
        worst = max(worst, err)
    norm = float(np.sqrt(sum(np.sum(g * g) for g in base.grads.values())))
    return GradCheckReport(worst, norm, base.value, n, per_param)


def export_dump(model: ToyModel, sample: SyntheticSample, pathway: str = "generation", meta: dict | None = None):
    """Last-token attention of every layer and head, with the residual stream
    entering each layer, as an :class:`AttentionDump`."""
    cache = model.forward_batch(sample.tokens(pathway)[None])
    rows = np.stack([cache.last_rows(layer)[0] for layer in range(model.cfg.num_layers)])
    hidden = np.stack([cache.hidden[layer][0] for layer in range(model.cfg.num_layers)])
    info = {"source": "toy", "pathway": pathway, "label": sample.label,
            "sink_dims": ",".join(str(d) for d in sorted(model.sink_dims))}
    info.update(meta or {})
    return AttentionDump(model.layout, rows, hidden, sample.keyframes, info)
