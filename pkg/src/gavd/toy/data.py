"""Synthetic clips whose answer is visible only in a contiguous block of keyframes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import TokenLayout
from ..grounding import KeyframeAnnotation
from .config import FIRST_CLASS_TOKEN, GENERATE, QUESTION, SUMMARIZE, SYSTEM, VERIFY, YES, ToyConfig


@dataclass(frozen=True)
class SyntheticSample:
    frames: np.ndarray  # (num_frames, tokens_per_frame) token ids
    keyframes: KeyframeAnnotation
    label: int  # class index
    gen_prompt: tuple[int, ...]
    ver_prompt: tuple[int, ...]
    gen_target: int  # token id
    ver_target: int  # token id

    def tokens(self, pathway: str = "generation") -> np.ndarray:
        prompt = {"generation": self.gen_prompt, "verification": self.ver_prompt,
                  "summary": (QUESTION, SUMMARIZE)}[pathway]
        return np.concatenate([[SYSTEM], self.frames.ravel(), prompt]).astype(int)


def layout_for(cfg: ToyConfig) -> TokenLayout:
    return TokenLayout.build(1, cfg.num_frames, cfg.tokens_per_frame, 2)


def class_token(cfg: ToyConfig, label: int) -> int:
    return FIRST_CLASS_TOKEN + label


def generate_dataset(cfg: ToyConfig, n: int, seed: int | None = None) -> list[SyntheticSample]:
    """``n`` samples, deterministic in ``seed`` (default ``cfg.seed``).

    Labels are assigned round-robin and then shuffled, so classes are balanced
    to within one sample. Keyframe frames are filled with the class token;
    every other frame holds distractor tokens drawn independently of the label.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 7919])
    labels = rng.permutation(np.arange(n) % cfg.num_classes)
    first_distractor = FIRST_CLASS_TOKEN + cfg.num_classes
    n_offsets = cfg.num_frames - cfg.keyframe_frames + 1
    out = []
    for y in labels:
        start = int(rng.integers(n_offsets))
        frames = rng.integers(first_distractor, cfg.vocab_size, size=(cfg.num_frames, cfg.tokens_per_frame))
        flags = np.zeros(cfg.num_frames, dtype=int)
        flags[start:start + cfg.keyframe_frames] = 1
        frames[flags == 1] = class_token(cfg, int(y))
        out.append(SyntheticSample(
            frames=frames, keyframes=KeyframeAnnotation(tuple(flags)), label=int(y),
            gen_prompt=(QUESTION, GENERATE), ver_prompt=(VERIFY, class_token(cfg, int(y))),
            gen_target=class_token(cfg, int(y)), ver_target=YES,
        ))
    return out


def stack_tokens(samples, pathway: str) -> np.ndarray:
    return np.stack([s.tokens(pathway) for s in samples])
