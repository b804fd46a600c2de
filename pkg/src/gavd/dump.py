"""The ``gavd-1`` attention dump: a JSON container for attention rows, optional
hidden states and keyframes of one sample.

Numbers are written with ``repr`` precision, which round-trips IEEE doubles
exactly.
"""

from __future__ import annotations

import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import AttentionRow, TokenLayout
from .errors import UnsupportedVersion, ValidationError
from .grounding import KeyframeAnnotation
from .sinks import HiddenStates

VERSION = "gavd-1"
ROW_TOLERANCE = 1e-5


@dataclass(frozen=True)
class AttentionDump:
    layout: TokenLayout
    rows: np.ndarray = field(repr=False)  # [layer, head, seq_len]
    hidden_states: np.ndarray | None = field(default=None, repr=False)  # [layer, seq_len, D]
    keyframes: KeyframeAnnotation | None = None
    meta: dict = field(default_factory=dict)
    version: str = VERSION

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        object.__setattr__(self, "rows", rows)
        if self.hidden_states is not None:
            object.__setattr__(self, "hidden_states", np.asarray(self.hidden_states, dtype=float))
        validate(self)

    @property
    def layers(self) -> int:
        return self.rows.shape[0]

    @property
    def heads(self) -> int:
        return self.rows.shape[1]

    def row(self, layer: int, head: int) -> AttentionRow:
        return AttentionRow(layer, head, self.rows[layer, head])

    def layer_rows(self, layer: int) -> list[AttentionRow]:
        return [self.row(layer, h) for h in range(self.heads)]

    def hidden(self, layer: int) -> HiddenStates | None:
        if self.hidden_states is None:
            return None
        return HiddenStates(layer, self.hidden_states[layer])

    def with_rows(self, rows: np.ndarray) -> "AttentionDump":
        return replace(self, rows=rows)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "layout": self.layout.to_dict(),
            "layers": self.layers,
            "heads": self.heads,
            "rows": self.rows.tolist(),
            "hidden_states": None if self.hidden_states is None else self.hidden_states.tolist(),
            "keyframes": None if self.keyframes is None else self.keyframes.to_dict(),
            "meta": {str(k): str(v) for k, v in self.meta.items()},
        }


def validate(dump: AttentionDump) -> None:
    if dump.version != VERSION:
        raise UnsupportedVersion(f"unsupported dump version {dump.version!r}")
    rows = dump.rows
    if rows.ndim != 3:
        raise ValidationError(f"rows must be a [layer][head][position] array, got {rows.ndim} dimensions",
                              field="rows")
    if rows.shape[0] < 1 or rows.shape[1] < 1:
        raise ValidationError("rows must contain at least one layer and one head", field="rows")
    if rows.shape[2] != dump.layout.seq_len:
        raise ValidationError(f"rows have length {rows.shape[2]}, layout.seq_len is {dump.layout.seq_len}",
                              field="rows")
    for layer in range(rows.shape[0]):
        for head in range(rows.shape[1]):
            r = rows[layer, head]
            if not np.all(np.isfinite(r)) or np.any(r < 0):
                raise ValidationError(f"rows[{layer}][{head}] has negative or non-finite weights",
                                      field="rows", index=(layer, head))
            s = float(r.sum())
            if abs(s - 1.0) > ROW_TOLERANCE:
                raise ValidationError(f"rows[{layer}][{head}] sums to {s!r}, expected 1",
                                      field="rows", index=(layer, head))
    h = dump.hidden_states
    if h is not None:
        if h.ndim != 3 or h.shape[0] != rows.shape[0] or h.shape[1] != dump.layout.seq_len:
            raise ValidationError(
                f"hidden_states must have shape [layers={rows.shape[0]}, seq_len={dump.layout.seq_len}, D], "
                f"got {list(h.shape)}", field="hidden_states")
        if not np.all(np.isfinite(h)):
            raise ValidationError("hidden_states has non-finite entries", field="hidden_states")
    if dump.keyframes is not None and len(dump.keyframes.frame_flags) != dump.layout.n_frames:
        raise ValidationError(
            f"keyframes has {len(dump.keyframes.frame_flags)} flags for {dump.layout.n_frames} frames",
            field="keyframes.frame_flags")


def _require(d: dict, key: str):
    if key not in d:
        raise ValidationError(f"missing field {key!r}", field=key)
    return d[key]


def from_dict(d: dict) -> AttentionDump:
    if not isinstance(d, dict):
        raise ValidationError("dump must be a JSON object", field="<root>")
    version = _require(d, "version")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported dump version {version!r}")
    try:
        layout = TokenLayout.from_dict(_require(d, "layout"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid layout: {exc}", field="layout") from exc
    try:
        rows = np.array(_require(d, "rows"), dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"rows is not a dense numeric array: {exc}", field="rows") from exc
    counts = {}
    for key in ("layers", "heads"):
        value = _require(d, key)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{key} must be an integer, got {value!r}", field=key)
        counts[key] = value
    layers, heads = counts["layers"], counts["heads"]
    if rows.ndim != 3 or rows.shape[:2] != (layers, heads):
        raise ValidationError(f"rows shape {list(rows.shape)} does not match layers={layers}, heads={heads}",
                              field="rows")
    hidden = d.get("hidden_states")
    if hidden is not None:
        try:
            hidden = np.array(hidden, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"hidden_states is not a dense numeric array: {exc}",
                                  field="hidden_states") from exc
    kf = d.get("keyframes")
    try:
        keyframes = None if kf is None else KeyframeAnnotation.from_dict(kf)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"invalid keyframes: {exc}", field="keyframes") from exc
    meta = d.get("meta") or {}
    if not isinstance(meta, dict):
        raise ValidationError("meta must be a string map", field="meta")
    return AttentionDump(layout, rows, hidden, keyframes, dict(meta), version)


def load_dump(path) -> AttentionDump:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON: {exc}", field="<root>") from exc
    dump = from_dict(d)
    if dump.hidden_states is None:
        warnings.warn(f"{path}: no hidden_states; sink analysis is disabled for this dump", stacklevel=2)
    return dump


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dump(dump: AttentionDump, path) -> None:
    atomic_write_text(path, json.dumps(dump.to_dict(), allow_nan=False))


def load_keyframes(path) -> KeyframeAnnotation:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if isinstance(d, list):
        return KeyframeAnnotation(tuple(d))
    if "frame_flags" not in d:
        raise ValidationError("keyframes file needs a 'frame_flags' list", field="frame_flags")
    return KeyframeAnnotation.from_dict(d)
