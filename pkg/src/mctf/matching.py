"""Relaxed bipartite soft matching between a source and a target token set.

Each source keeps only its best edge; the ``r`` strongest of those edges are
selected. Several sources may land on the same target, which is what makes
the matching "soft".
"""
import itertools
import math
from dataclasses import dataclass

import numpy as np

BRUTE_FORCE_MAX_SOURCES = 8


class OracleSizeError(ValueError):
    """Instance too large for exhaustive enumeration."""


@dataclass(frozen=True)
class EdgeSelection:
    edges: tuple = ()
    objective: float = 0.0

    def __post_init__(self):
        srcs = [i for i, _ in self.edges]
        if len(set(srcs)) != len(srcs):
            raise ValueError("a source index appears in more than one edge")

    @property
    def sources(self):
        return [i for i, _ in self.edges]

    def to_dict(self):
        return {"edges": [list(e) for e in self.edges], "objective": self.objective}


def split_alternating(n_tokens, cls_present=True):
    """Alternate fusible tokens into source (even ordinal) and target (odd)."""
    offset = 1 if cls_present else 0
    fusible = np.arange(offset, n_tokens, dtype=np.int64)
    if fusible.size < 2:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    return fusible[0::2], fusible[1::2]


def _objective(values):
    return math.fsum(float(v) for v in values)


def bipartite_soft_match(w, r):
    """Greedy solution: per-row argmax, then the top-``r`` rows by that value.

    Ties go to the lowest target index within a row and to the lowest source
    index across rows. ``r`` above the number of sources is clamped.
    """
    w = np.asarray(w)
    if r < 0:
        raise ValueError("r must be non-negative")
    if w.ndim != 2 or w.shape[0] == 0 or w.shape[1] == 0 or r == 0:
        return EdgeSelection()
    r = min(r, w.shape[0])
    best_tgt = np.argmax(w, axis=1)
    best_val = w[np.arange(w.shape[0]), best_tgt]
    order = np.argsort(-best_val, kind="stable")
    chosen = np.sort(order[:r])
    edges = tuple((int(i), int(best_tgt[i])) for i in chosen)
    return EdgeSelection(edges, _objective(best_val[chosen]))


def restricted_weights(w):
    """Zero every edge except each row's (lowest-index) maximum."""
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros_like(w)
    for i in range(w.shape[0]):
        j = int(np.argmax(w[i]))
        out[i, j] = w[i, j]
    return out


def brute_force_match(w, r):
    """Exhaustive maximizer of the soft-matching objective.

    Enumerates every choice of ``r`` distinct sources and every target
    assignment for them, scoring with the restricted weights.
    """
    w = np.asarray(w)
    n_src = w.shape[0] if w.ndim == 2 else 0
    if n_src > BRUTE_FORCE_MAX_SOURCES:
        raise OracleSizeError(
            f"{n_src} sources exceeds the brute-force limit of {BRUTE_FORCE_MAX_SOURCES}")
    if r < 0:
        raise ValueError("r must be non-negative")
    if n_src == 0 or w.shape[1] == 0 or r == 0:
        return EdgeSelection()
    r = min(r, n_src)
    wp = restricted_weights(w)
    n_tgt = w.shape[1]
    # every target assignment for r chosen sources, as an (n_tgt**r, r) table
    assign = np.array(list(itertools.product(range(n_tgt), repeat=r)), dtype=np.int64)
    best = None
    for subset in itertools.combinations(range(n_src), r):
        rows = np.array(subset)
        vals = wp[rows[None, :], assign]
        totals = vals.sum(axis=1)
        k = int(np.argmax(totals))
        if best is None or totals[k] > best[0]:
            best = (totals[k], subset, assign[k], vals[k])
    _, subset, targets, vals = best
    edges = tuple((int(i), int(j)) for i, j in zip(subset, targets))
    return EdgeSelection(edges, _objective(vals))
