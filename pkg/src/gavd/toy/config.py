from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..objectives import LossConfig

CE_PLACEMENTS = ("generation_only", "verification_only", "both")
MATCHING = ("hungarian", "random", "discard", "flexible")


@dataclass(frozen=True)
class ToyConfig:
    num_frames: int = 16
    tokens_per_frame: int = 4
    vocab_size: int = 64
    embed_dim: int = 32
    num_layers: int = 2
    heads_per_layer: int = 8
    target_layer: int = 1
    k_heads: int = 5
    seed: int = 0
    steps: int = 300
    learning_rate: float = 0.05
    loss: LossConfig = field(default_factory=LossConfig)
    ce_placement: str = "generation_only"
    # toy task and model details
    num_classes: int = 4
    keyframe_frames: int = 3
    n_train: int = 32
    n_eval: int = 256
    batch_size: int | None = None  # None = full-batch gradient descent
    matching: str = "hungarian"
    ver_layer: int | None = None  # only used by matching="flexible"
    sink_bias: float = 30.0
    sink_threshold: float = 4.0
    n_sink_heads: int = 2

    def __post_init__(self):
        counts = ("num_frames", "tokens_per_frame", "vocab_size", "embed_dim", "num_layers",
                  "heads_per_layer", "k_heads", "num_classes", "keyframe_frames", "n_train", "n_eval")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0 <= self.target_layer < self.num_layers:
            raise ValueError("target_layer must be a valid layer index")
        if self.k_heads > self.heads_per_layer:
            raise ValueError("k_heads cannot exceed heads_per_layer")
        if self.embed_dim % self.heads_per_layer:
            raise ValueError("embed_dim must be divisible by heads_per_layer")
        if self.keyframe_frames > self.num_frames:
            raise ValueError("keyframe block longer than the clip")
        if self.ce_placement not in CE_PLACEMENTS:
            raise ValueError(f"ce_placement must be one of {CE_PLACEMENTS}")
        if self.matching not in MATCHING:
            raise ValueError(f"matching must be one of {MATCHING}")
        if self.ver_layer is not None and not 0 <= self.ver_layer < self.num_layers:
            raise ValueError("ver_layer must be a valid layer index")
        if self.n_sink_heads > self.heads_per_layer:
            raise ValueError("more sink heads than heads")
        if FIRST_CLASS_TOKEN + self.num_classes + 1 > self.vocab_size:
            raise ValueError("vocabulary too small for the special, class and distractor tokens")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")

    def with_weights(self, *weights: float) -> "ToyConfig":
        return replace(self, loss=replace(self.loss, weights=tuple(weights)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["weights"] = list(self.loss.weights)
        return d

    @classmethod
    def from_mapping(cls, d: dict) -> "ToyConfig":
        """Build from a flat mapping; loss fields may appear at top level or under ``loss``."""
        d = dict(d)
        loss_keys = {f.name for f in fields(LossConfig)}
        loss_args = dict(d.pop("loss", {}) or {})
        for key in list(d):
            if key in loss_keys:
                loss_args[key] = d.pop(key)
        for key in ("w_ce", "w_ent", "w_con"):
            if key in d:
                loss_args.setdefault("weights", [1.0, 1.0, 1.0])
                loss_args["weights"] = list(loss_args["weights"])
                loss_args["weights"][("w_ce", "w_ent", "w_con").index(key)] = float(d.pop(key))
        if "weights" in loss_args:
            loss_args["weights"] = tuple(loss_args["weights"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(loss=LossConfig(**loss_args), **d)

    @classmethod
    def from_json(cls, text: str) -> "ToyConfig":
        return cls.from_mapping(json.loads(text))


# token ids shared by the data generator and the model
SYSTEM, QUESTION, GENERATE, VERIFY, YES, NO, SUMMARIZE = range(7)
FIRST_CLASS_TOKEN = 8
