"""Two-stage head bipartite matching: exact index matching, then optimal assignment.

Cost matrices are indexed ``[generation head, verification head]`` and hold
``KL(verification row || generation row)`` over visual tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import KL_EPSILON, AttentionRow, TokenLayout, kl_divergence, restrict_to_visual
from .errors import InvalidCost, SelectionMismatch
from .sinks import HeadSelection

EXACT = "exact"
HUNGARIAN = "hungarian"
RANDOM = "random"


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray = field(repr=False)
    row_heads: tuple[int, ...]
    col_heads: tuple[int, ...]

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise InvalidCost(f"cost matrix must be square, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise InvalidCost("cost matrix has non-finite entries")
        if e.shape[0] != len(self.row_heads) or e.shape[1] != len(self.col_heads):
            raise InvalidCost("head labels do not match the matrix shape")
        object.__setattr__(self, "entries", e)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, str], ...]
    total_hungarian_cost: float
    assignment: tuple[int, ...]
    cost: CostMatrix | None = None
    partial: bool = False

    @property
    def gen_heads(self) -> tuple[int, ...]:
        return tuple(p[0] for p in self.pairs)

    @property
    def ver_heads(self) -> tuple[int, ...]:
        return tuple(p[1] for p in self.pairs)

    def to_dict(self) -> dict:
        return {
            "pairs": [{"gen": g, "ver": v, "provenance": prov} for g, v, prov in self.pairs],
            "cost": self.total_hungarian_cost,
            "partial": self.partial,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=False)


def _shortest_augmenting_path(c: np.ndarray):
    """O(n^3) Hungarian method with row/column potentials (minimization).

    Returns ``(row_to_col, u, v)`` where ``c[i, j] - u[i] - v[j] >= 0`` with
    equality on the returned assignment.
    """
    n = c.shape[0]
    inf = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.zeros(n, dtype=int)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _has_perfect_matching(adj: np.ndarray, rows: list[int], cols: list[int]) -> bool:
    match: dict[int, int] = {}

    def try_row(r: int, seen: set[int]) -> bool:
        for c in cols:
            if adj[r, c] and c not in seen:
                seen.add(c)
                if c not in match or try_row(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(try_row(r, set()) for r in rows)


def _assignment_cost(c: np.ndarray, assignment) -> float:
    return float(sum(c[i, j] for i, j in enumerate(assignment)))


def hungarian_solve(cost) -> tuple[tuple[int, ...], float]:
    """Minimum-cost perfect assignment of rows to columns.

    Among optimal assignments the lexicographically smallest one is returned:
    the optimal duals identify the tight edges, and rows are fixed in order to
    the smallest tight column that still admits a perfect tight matching.
    """
    c = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InvalidCost(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidCost("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return (), 0.0
    base, u, v = _shortest_augmenting_path(c)
    base_cost = _assignment_cost(c, base)
    tol = 1e-12 * n * max(1.0, float(np.max(np.abs(c))))
    tight = (c - u[:, None] - v[None, :]) <= tol
    chosen: list[int] = []
    free = list(range(n))
    for i in range(n):
        for j in free:
            if not tight[i, j]:
                continue
            rest = [x for x in free if x != j]
            if _has_perfect_matching(tight, list(range(i + 1, n)), rest):
                chosen.append(j)
                free = rest
                break
        else:
            chosen = list(base)
            break
    lex_cost = _assignment_cost(c, chosen)
    if lex_cost > base_cost:
        chosen, lex_cost = list(base), base_cost
    return tuple(int(j) for j in chosen), lex_cost


def _as_lookup(rows) -> Mapping[int, AttentionRow]:
    if isinstance(rows, Mapping):
        return rows
    return {r.head: r for r in rows}


def build_cost_matrix(gen_heads: Sequence[int], ver_heads: Sequence[int], gen_rows, ver_rows,
                      layout: TokenLayout, eps: float = KL_EPSILON) -> CostMatrix:
    g, v = _as_lookup(gen_rows), _as_lookup(ver_rows)
    gen_p = [restrict_to_visual(g[h], layout) for h in gen_heads]
    ver_p = [restrict_to_visual(v[h], layout) for h in ver_heads]
    entries = np.array([[kl_divergence(pv, pg, eps) for pv in ver_p] for pg in gen_p]).reshape(
        len(gen_heads), len(ver_heads))
    return CostMatrix(entries, tuple(gen_heads), tuple(ver_heads))


def _check_sizes(gen_sel: HeadSelection, ver_sel: HeadSelection, same_layer: bool):
    if len(gen_sel.heads) != len(ver_sel.heads):
        raise SelectionMismatch(f"selection sizes differ: {len(gen_sel.heads)} vs {len(ver_sel.heads)}")
    if same_layer and gen_sel.layer != ver_sel.layer:
        raise SelectionMismatch(f"selections come from layers {gen_sel.layer} and {ver_sel.layer}")


def _split(gen_sel: HeadSelection, ver_sel: HeadSelection, exact_stage: bool):
    if not exact_stage:
        return [], list(gen_sel.heads), list(ver_sel.heads)
    shared = set(gen_sel.heads) & set(ver_sel.heads)
    exact = [h for h in gen_sel.heads if h in shared]
    return exact, [h for h in gen_sel.heads if h not in shared], [h for h in ver_sel.heads if h not in shared]


def _ordered(pairs: list[tuple[int, int, str]], gen_sel: HeadSelection) -> tuple:
    rank = {h: i for i, h in enumerate(gen_sel.heads)}
    return tuple(sorted(pairs, key=lambda p: rank[p[0]]))


def match_heads(gen_sel: HeadSelection, ver_sel: HeadSelection, gen_rows, ver_rows, layout: TokenLayout,
                eps: float = KL_EPSILON, exact_stage: bool = True) -> MatchResult:
    """Pair every selected generation head with one verification head.

    ``exact_stage=False`` is the flexible-layer variant: the two selections may
    come from different layers and all pairs come from the assignment stage.
    """
    _check_sizes(gen_sel, ver_sel, same_layer=exact_stage)
    exact, rest_gen, rest_ver = _split(gen_sel, ver_sel, exact_stage)
    pairs = [(h, h, EXACT) for h in exact]
    cost = build_cost_matrix(rest_gen, rest_ver, gen_rows, ver_rows, layout, eps)
    assignment, total = hungarian_solve(cost)
    pairs += [(rest_gen[i], rest_ver[j], HUNGARIAN) for i, j in enumerate(assignment)]
    return MatchResult(_ordered(pairs, gen_sel), total, assignment, cost)


def match_heads_random(gen_sel: HeadSelection, ver_sel: HeadSelection, seed: int = 0) -> MatchResult:
    """Exact index matching, then a seeded uniform random pairing of the remainder."""
    _check_sizes(gen_sel, ver_sel, same_layer=True)
    exact, rest_gen, rest_ver = _split(gen_sel, ver_sel, True)
    perm = tuple(int(j) for j in np.random.default_rng(seed).permutation(len(rest_gen)))
    pairs = [(h, h, EXACT) for h in exact] + [(rest_gen[i], rest_ver[j], RANDOM) for i, j in enumerate(perm)]
    return MatchResult(_ordered(pairs, gen_sel), 0.0, perm)


def match_heads_discard(gen_sel: HeadSelection, ver_sel: HeadSelection) -> MatchResult:
    """Exact index matching only; unmatched heads are dropped (``partial`` result)."""
    shared = set(gen_sel.heads) & set(ver_sel.heads)
    pairs = [(h, h, EXACT) for h in gen_sel.heads if h in shared]
    return MatchResult(tuple(pairs), 0.0, (), None, partial=len(pairs) < len(gen_sel.heads))
