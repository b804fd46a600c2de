"""Attention-only causal transformer in numpy with a hand-written backward pass.

Each layer adds the output of multi-head softmax attention over the
RMS-normalized residual stream back to the stream (pre-norm); the answer is
read out linearly from the normalized last position. Everything is
float64 so the backward pass can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import AttentionRow, softmax
from ..errors import ShapeError
from ..sinks import HiddenStates
from .config import ToyConfig
from .data import SyntheticSample, layout_for

PARAM_NAMES = ("E", "P", "Wq", "bq", "Wk", "Wv", "Wo", "Wout")


@dataclass
class ForwardCache:
    tokens: np.ndarray  # (B, N)
    hidden: list[np.ndarray]  # num_layers + 1 arrays of (B, N, D); hidden[l] is the input to layer l
    normed: list[np.ndarray]  # rms_norm(hidden[l]), num_layers + 1 entries
    rms: list[np.ndarray]  # (B, N, 1)
    q: list[np.ndarray]  # (B, H, N, dh)
    k: list[np.ndarray]
    v: list[np.ndarray]
    # the final layer keeps only the last query row: (B, H, 1, N)
    scores: list[np.ndarray]  # (B, H, N, N) scaled, masked
    attn: list[np.ndarray]  # (B, H, N, N)
    heads_out: list[np.ndarray]  # (B, H, N, dh)
    logits: np.ndarray  # (B, V)

    def last_rows(self, layer: int) -> np.ndarray:
        """Attention of the last position at ``layer``: (B, H, N)."""
        return self.attn[layer][:, :, -1, :]

    def last_scores(self, layer: int) -> np.ndarray:
        return self.scores[layer][:, :, -1, :]


class ToyModel:
    """Parameters live in ``self.params``; ``self.sink`` is a fixed residual offset."""

    def __init__(self, cfg: ToyConfig, params: dict[str, np.ndarray] | None = None, seed: int | None = None):
        self.cfg = cfg
        self.layout = layout_for(cfg)
        n, d = self.layout.seq_len, cfg.embed_dim
        self.head_dim = d // cfg.heads_per_layer
        # planted register: a large offset in dimension 0 at the first visual position
        self.sink = np.zeros((n, d))
        self.sink[self.layout.visual_indices[0], 0] = cfg.sink_bias
        self.sink_dims = frozenset({0})
        self.params = params if params is not None else init_params(cfg, self.layout.seq_len, self.head_dim,
                                                                    cfg.seed if seed is None else seed)

    def copy(self) -> "ToyModel":
        return ToyModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    # ------------------------------------------------------------------ forward
    def forward_batch(self, tokens: np.ndarray, params: dict[str, np.ndarray] | None = None,
                      offsets: dict[int, np.ndarray] | None = None) -> ForwardCache:
        """Batched forward pass. ``offsets`` adds ``{layer: (B, N, D)}`` to the
        residual stream entering a layer, for activation-perturbation probes."""
        p = self.params if params is None else params
        offsets = offsets or {}
        tokens = np.atleast_2d(np.asarray(tokens, dtype=int))
        b, n = tokens.shape
        if n != self.layout.seq_len:
            raise ShapeError(f"sequence length {n}, model expects {self.layout.seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ShapeError("token id outside the vocabulary")
        scale = 1.0 / np.sqrt(self.head_dim)
        mask = np.triu(np.ones((n, n), dtype=bool), 1)
        h = p["E"][tokens] + p["P"][None] + self.sink[None]
        cache = ForwardCache(tokens, [h], [], [], [], [], [], [], [], [], None)
        for layer in range(self.cfg.num_layers):
            if layer in offsets:
                h = h + offsets[layer]
                cache.hidden[layer] = h
            x, r = rms_norm(h)
            cache.normed.append(x)
            cache.rms.append(r)
            # nothing downstream reads the other positions of the final layer
            nq = 1 if layer == self.cfg.num_layers - 1 else n
            q = x[:, None, -nq:] @ p["Wq"][layer][None] + p["bq"][layer][None, :, None, :]
            k = x[:, None] @ p["Wk"][layer][None]
            v = x[:, None] @ p["Wv"][layer][None]
            s = (q @ k.swapaxes(-1, -2)) * scale
            s = np.where(mask[-nq:], -np.inf, s)
            a = softmax(s, axis=-1)
            o = a @ v
            upd = _merge_heads(o) @ _stack_out(p["Wo"][layer])
            h = h + upd if nq == n else np.concatenate([h[:, :-nq], h[:, -nq:] + upd], axis=1)
            for store, val in zip((cache.q, cache.k, cache.v, cache.scores, cache.attn, cache.heads_out),
                                  (q, k, v, s, a, o)):
                store.append(val)
            cache.hidden.append(h)
        x, r = rms_norm(h)
        cache.normed.append(x)
        cache.rms.append(r)
        cache.logits = x[:, -1, :] @ p["Wout"]
        return cache

    def forward(self, sample: SyntheticSample, pathway: str = "generation"):
        """Output logits, ``{layer: [AttentionRow per head]}`` and per-layer hidden-state inputs."""
        cache = self.forward_batch(sample.tokens(pathway)[None])
        rows = {layer: [AttentionRow(layer, h, cache.last_rows(layer)[0, h]) for h in range(self.cfg.heads_per_layer)]
                for layer in range(self.cfg.num_layers)}
        hidden = [HiddenStates(layer, cache.hidden[layer][0]) for layer in range(self.cfg.num_layers)]
        return cache.logits[0], rows, hidden

    # ----------------------------------------------------------------- backward
    def backward(self, cache: ForwardCache, d_logits: np.ndarray | None = None,
                 d_last_scores: dict[int, np.ndarray] | None = None,
                 params: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients on the output logits
        ``(B, V)`` and on the last-position attention scores of chosen layers
        ``{layer: (B, H, N)}``."""
        p = self.params if params is None else params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        b, n = cache.tokens.shape
        d = self.cfg.embed_dim
        scale = 1.0 / np.sqrt(self.head_dim)
        d_last_scores = d_last_scores or {}
        dh = np.zeros((b, n, d))
        if d_logits is not None:
            grads["Wout"] = cache.normed[-1][:, -1, :].T @ d_logits
            dx = np.zeros((b, n, d))
            dx[:, -1, :] = d_logits @ p["Wout"].T
            dh = rms_norm_backward(dx, cache.normed[-1], cache.rms[-1])
        for layer in reversed(range(self.cfg.num_layers)):
            x = cache.normed[layer]
            q, k, v, a, o = (cache.q[layer], cache.k[layer], cache.v[layer], cache.attn[layer],
                             cache.heads_out[layer])
            nh, nq, e = q.shape[1], q.shape[2], q.shape[-1]
            dhq = dh[:, -nq:]
            grads["Wo"][layer] = (_merge_heads(o).reshape(b * nq, nh * e).T
                                  @ dhq.reshape(b * nq, d)).reshape(nh, e, d)
            do = dhq[:, None] @ p["Wo"][layer].swapaxes(-1, -2)[None]
            da = do @ v.swapaxes(-1, -2)
            dv = a.swapaxes(-1, -2) @ do
            ds = a * (da - np.sum(da * a, axis=-1, keepdims=True))
            if layer in d_last_scores:
                ds[:, :, -1, :] += d_last_scores[layer]
            ds = ds * scale
            dq = ds @ k
            dk = ds.swapaxes(-1, -2) @ q
            for name, dz, xs in (("Wq", dq, x[:, -nq:]), ("Wk", dk, x), ("Wv", dv, x)):
                m = xs.shape[1]
                grads[name][layer] = xs.reshape(b * m, d).T[None] @ dz.transpose(1, 0, 2, 3).reshape(nh, b * m, e)
            grads["bq"][layer] = dq.sum(axis=(0, 2))
            dx = (_merge_heads(dk) @ _stack_out(p["Wk"][layer].swapaxes(-1, -2))
                  + _merge_heads(dv) @ _stack_out(p["Wv"][layer].swapaxes(-1, -2)))
            dx[:, -nq:] += _merge_heads(dq) @ _stack_out(p["Wq"][layer].swapaxes(-1, -2))
            dh = dh + rms_norm_backward(dx, x, cache.rms[layer])
        np.add.at(grads["E"], cache.tokens, dh)
        grads["P"] = dh.sum(axis=0)
        return grads


def _merge_heads(z: np.ndarray) -> np.ndarray:
    """(B, H, N, e) -> (B, N, H*e)."""
    b, nh, n, e = z.shape
    return z.transpose(0, 2, 1, 3).reshape(b, n, nh * e)


def _stack_out(w: np.ndarray) -> np.ndarray:
    """(H, e, D) -> (H*e, D)."""
    return w.reshape(-1, w.shape[-1])


def rms_norm(h: np.ndarray, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + eps)
    return h / r, r


def rms_norm_backward(dx: np.ndarray, x: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the normalizer input given ``dx`` on its output ``x = h / r``."""
    return (dx - x * np.mean(dx * x, axis=-1, keepdims=True)) / r


def init_params(cfg: ToyConfig, seq_len: int, head_dim: int, seed: int) -> dict[str, np.ndarray]:
    """Random weights with two planted structures.

    Content-matching heads use ``Wq = gain * Wk`` so a query token attends to
    copies of itself; with the candidate answer as the last verification token
    this makes verification attention land on keyframes. Sink heads carry a
    query bias aligned with a key direction read from the sink dimension, so
    they pile attention onto the planted register token.
    """
    rng = np.random.default_rng([seed, 104729])
    v, d, nl, nh = cfg.vocab_size, cfg.embed_dim, cfg.num_layers, cfg.heads_per_layer
    e = rng.normal(0.0, 1.0, (v, d))
    pos = rng.normal(0.0, 0.1, (seq_len, d))
    e[:, 0] = 0.0
    pos[:, 0] = 0.0
    wk = rng.normal(0.0, 1.0 / np.sqrt(d), (nl, nh, d, head_dim))
    wq = 1.5 * wk + rng.normal(0.0, 0.1 / np.sqrt(d), (nl, nh, d, head_dim))
    wv = rng.normal(0.0, 1.0 / np.sqrt(d), (nl, nh, d, head_dim))
    wo = rng.normal(0.0, 0.3 / np.sqrt(nh * head_dim), (nl, nh, head_dim, d))
    bq = np.zeros((nl, nh, head_dim))
    wq[:, :, 0, :] = 0.0
    wk[:, :, 0, :] = 0.0
    wv[:, :, 0, :] = 0.0
    wo[:, :, :, 0] = 0.0
    for layer in range(nl):
        for head in rng.choice(nh, size=cfg.n_sink_heads, replace=False):
            u = rng.normal(size=head_dim)
            u /= np.linalg.norm(u)
            wk[layer, head, 0, :] = 1.0 * u
            bq[layer, head, :] = 4.0 * u
    wout = rng.normal(0.0, 1.0 / np.sqrt(d), (d, v))
    return {"E": e, "P": pos, "Wq": wq, "bq": bq, "Wk": wk, "Wv": wv, "Wo": wo, "Wout": wout}
