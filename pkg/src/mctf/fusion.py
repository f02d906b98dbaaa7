"""Bidirectional token fusion and attention-map aggregation.

A reduction runs two soft matchings over an alternating source/target
split. Pass 1 folds sources into targets; pass 2 reuses the pass-1
attraction (transposed) to fold the updated targets back into the
surviving sources. Every output token is a pooled group of input tokens,
described by a :class:`FusionPlan`.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .criteria import CriteriaTemperatures, INFO_FLOOR, TokenState, attraction_matrix
from .linalg import DTYPE
from .matching import EdgeSelection, bipartite_soft_match, split_alternating

log = logging.getLogger(__name__)

POOLING_MODES = ("weighted", "average", "max")
DIRECTION_MODES = ("bidirectional", "one_way")


class ContractError(ValueError):
    """Input violates a documented precondition."""


def _member_weights(a, s, mode):
    a = np.maximum(np.asarray(a, dtype=np.float64), INFO_FLOOR)
    s = np.asarray(s, dtype=np.float64)
    if mode == "weighted":
        w = a * s
        total = w.sum()
        if total > 0 and np.isfinite(total):
            return w / total
        log.warning("all pooling weights vanished; falling back to a uniform average")
    return np.full(len(a), 1.0 / len(a))


def delta_pool(tokens, a, s, mode="weighted"):
    """Pool a group of tokens into one.

    Returns ``(vector, pooled_size, pooled_info)``. Sizes and informativeness
    always add up; only the feature combination depends on ``mode``.
    """
    tokens = np.asarray(tokens, dtype=DTYPE)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[0] == 0:
        raise ValueError("cannot pool an empty group")
    if not (tokens.shape[0] == len(a) == len(s)):
        raise ValueError("tokens, a and s must have the same length")
    if mode not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    if mode == "max":
        vec = tokens.max(axis=0)
    else:
        w = _member_weights(a, s, mode)
        vec = (w[:, None] * tokens.astype(np.float64)).sum(axis=0).astype(DTYPE)
    return vec, int(np.sum(s)), float(np.sum(a, dtype=np.float64))


@dataclass
class FusionPlan:
    """Outcome of one reduction step.

    ``groups[k]`` lists the input indices pooled into output token ``k``
    (ascending); ``weights[k]`` holds their effective pooling weights, which
    compose the per-pass weights when a token was fused twice. ``pass1`` and
    ``pass2`` keep the raw edge selections in split-local indices.
    """

    n_in: int
    groups: list
    weights: list
    pass1: EdgeSelection = field(default_factory=EdgeSelection)
    pass2: EdgeSelection = field(default_factory=EdgeSelection)
    alpha: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    beta: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    survivors: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    pooling: str = "weighted"

    @classmethod
    def identity(cls, n, pooling="weighted"):
        return cls(n, [[i] for i in range(n)], [np.ones(1)] * n, pooling=pooling)

    @property
    def n_out(self):
        return len(self.groups)

    @property
    def reduced(self):
        return self.n_in - self.n_out

    def assignment(self):
        """Output index for each input index."""
        out = np.empty(self.n_in, dtype=np.int64)
        for k, g in enumerate(self.groups):
            out[g] = k
        return out

    def pooling_matrix(self):
        """Dense (n_out, n_in) matrix of effective pooling weights."""
        m = np.zeros((self.n_out, self.n_in), dtype=np.float64)
        for k, (g, w) in enumerate(zip(self.groups, self.weights)):
            m[k, g] = w
        return m

    def membership_matrix(self):
        m = np.zeros((self.n_out, self.n_in), dtype=np.float64)
        for k, g in enumerate(self.groups):
            m[k, g] = 1.0
        return m

    def to_dict(self):
        alpha, beta = self.alpha.tolist(), self.beta.tolist()
        surv = self.survivors.tolist()
        return {
            "n_in": self.n_in,
            "n_out": self.n_out,
            "pass1_edges": [[alpha[i], beta[j]] for i, j in self.pass1.edges],
            "pass1_objective": self.pass1.objective,
            "pass2_edges": [[beta[i], surv[j]] for i, j in self.pass2.edges],
            "pass2_objective": self.pass2.objective,
            "groups": [list(map(int, g)) for g in self.groups],
            "weights": [[round(float(x), 8) for x in w] for w in self.weights],
        }


def pass_budgets(n_alpha, n_beta, r, direction="bidirectional", pass1_budget=None):
    """Split a reduction of ``r`` tokens across the two matching passes.

    At least one fusible token always survives. In bidirectional mode the
    default split is ``ceil(r/2)`` then ``floor(r/2)``; pass 1 is trimmed by
    one when it would consume every source and leave pass 2 no target.
    """
    if direction not in DIRECTION_MODES:
        raise ValueError(f"unknown direction mode {direction!r}")
    fusible = n_alpha + n_beta
    if fusible < 2:
        return 0, 0
    r = max(0, min(r, fusible - 1))
    if direction == "one_way":
        return min(r, n_alpha), 0
    r1 = (r + 1) // 2 if pass1_budget is None else min(pass1_budget, r)
    r1 = min(r1, n_alpha)
    r2 = r - r1
    if r2 > 0 and r1 == n_alpha:
        r1 -= 1
        r2 += 1
    r2 = min(r2, n_beta)
    return r1, r2


def _pooled_weights(members, a, s, mode):
    if mode == "max":
        mode = "average"
    return _member_weights(a[members], s[members], mode)


def mctf_reduce(state, a_next, temps=None, r=0, direction="bidirectional",
                pooling="weighted", pass1_budget=None, sim_features=None):
    """Fuse ``r`` tokens of ``state`` and return ``(new_state, plan)``.

    ``a_next`` replaces the state's informativeness before any weighting;
    in the ViT it is the column mean of the attention map the fused tokens
    are about to enter. ``sim_features`` swaps the matrix used for the
    similarity criterion (rows aligned with ``state``).
    """
    temps = temps or CriteriaTemperatures()
    if pooling not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {pooling!r}")
    a_next = np.asarray(a_next, dtype=DTYPE).reshape(-1)
    if a_next.shape[0] != state.n_tokens:
        raise ValueError("a_next must have one entry per token")
    state = state.with_info(a_next)
    n = state.n_tokens
    alpha, beta = split_alternating(n, state.cls_present)
    r1, r2 = pass_budgets(len(alpha), len(beta), r, direction, pass1_budget)
    if r1 + r2 == 0:
        plan = FusionPlan.identity(n, pooling)
        plan.alpha, plan.beta = alpha, beta
        return state, plan

    sim_pair = None
    if sim_features is not None:
        sf = np.asarray(sim_features, dtype=DTYPE)
        sim_pair = (sf[alpha], sf[beta])
    w = attraction_matrix(state.take(alpha), state.take(beta), temps, sim_pair)

    a = np.maximum(state.info.astype(np.float64), INFO_FLOOR)
    s = state.sizes.astype(np.float64)

    # pass 1: alpha -> beta
    sel1 = bipartite_soft_match(w, r1)
    absorbed = {j: [] for j in range(len(beta))}
    for i, j in sel1.edges:
        absorbed[j].append(i)
    matched_alpha = set(sel1.sources)
    survivors = np.array([i for i in range(len(alpha)) if i not in matched_alpha], dtype=np.int64)

    # beta_groups[j]: (original indices, effective weights, pooled a, pooled s)
    beta_groups = []
    for j in range(len(beta)):
        members = np.array(sorted([beta[j]] + [alpha[i] for i in absorbed[j]]), dtype=np.int64)
        weights = _pooled_weights(members, a, s, pooling)
        beta_groups.append((members, weights, a[members].sum(), s[members].sum()))

    # pass 2: updated beta -> surviving alpha, reusing pass-1 weights
    sel2 = EdgeSelection()
    if r2 > 0 and len(survivors) > 0:
        w2 = w.T[:, survivors]
        sel2 = bipartite_soft_match(w2, r2)
    folded = {k: [] for k in range(len(survivors))}
    for j, k in sel2.edges:
        folded[k].append(j)
    merged_beta = set(sel2.sources)

    # (anchor position, members, weights)
    out = []
    if state.cls_present:
        out.append((0, np.array([0]), np.ones(1)))
    for k, i in enumerate(survivors):
        anchor = int(alpha[i])
        if not folded[k]:
            out.append((anchor, np.array([anchor]), np.ones(1)))
            continue
        parts = [(np.array([anchor]), np.ones(1), a[anchor], s[anchor])]
        parts += [beta_groups[j] for j in folded[k]]
        if pooling == "max":
            outer = np.full(len(parts), 1.0 / len(parts))
        else:
            outer = _member_weights([p[2] for p in parts], [p[3] for p in parts], pooling)
        members = np.concatenate([p[0] for p in parts])
        weights = np.concatenate([ow * p[1] for ow, p in zip(outer, parts)])
        order = np.argsort(members)
        out.append((anchor, members[order], weights[order]))
    for j in range(len(beta)):
        if j not in merged_beta:
            members, weights, _, _ = beta_groups[j]
            out.append((int(beta[j]), members, weights))
    out.sort(key=lambda t: t[0])

    plan = FusionPlan(
        n_in=n,
        groups=[m.tolist() for _, m, _ in out],
        weights=[wt for _, _, wt in out],
        pass1=sel1,
        pass2=sel2,
        alpha=alpha,
        beta=beta,
        survivors=alpha[survivors],
        pooling=pooling,
    )
    return apply_plan_to_state(state, plan), plan


def fuse_rows(m, plan):
    """Pool the rows of ``m`` (n_in x d) according to ``plan``."""
    m = np.asarray(m, dtype=DTYPE)
    if plan.pooling == "max":
        return np.stack([m[g].max(axis=0) for g in plan.groups]).astype(DTYPE)
    return (plan.pooling_matrix() @ m.astype(np.float64)).astype(DTYPE)


def apply_plan_to_state(state, plan):
    feats = fuse_rows(state.features, plan)
    sizes = np.array([state.sizes[g].sum() for g in plan.groups], dtype=np.int64)
    info = np.array([state.info[g].sum(dtype=np.float64) for g in plan.groups], dtype=DTYPE)
    return TokenState(feats, sizes, info, state.cls_present)


def _check_row_stochastic(A, tol):
    sums = A.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= tol) or np.any(A < 0):
        raise ContractError("attention map is not row-stochastic")


def aggregate_attention(A, plan, a=None, s=None, tol=1e-5):
    """Attention map of the fused tokens, without recomputing QK^T.

    Key columns of merged tokens are summed, which keeps every row summing to
    one; query rows are combined with the pooling weights. ``plan`` may be a
    :class:`FusionPlan` or a bare list of groups, in which case single-stage
    ``a * s`` weights are derived from ``a`` and ``s``. ``A`` may carry a
    leading head axis.
    """
    A = np.asarray(A, dtype=np.float64)
    if not isinstance(plan, FusionPlan):
        groups = [sorted(int(i) for i in g) for g in plan]
        n_in = A.shape[-1]
        a = np.ones(n_in) if a is None else np.asarray(a, dtype=np.float64)
        s = np.ones(n_in) if s is None else np.asarray(s, dtype=np.float64)
        weights = [_member_weights(a[g], s[g], "weighted") for g in groups]
        plan = FusionPlan(n_in, groups, weights)
    if A.shape[-1] != plan.n_in or A.shape[-2] != plan.n_in:
        raise ContractError(f"attention map shape {A.shape} does not match plan over {plan.n_in} tokens")
    _check_row_stochastic(A, tol)
    if plan.pooling == "max":
        rows = np.zeros((plan.n_out, plan.n_in))
        for k, g in enumerate(plan.groups):
            rows[k, g] = 1.0 / len(g)
    else:
        rows = plan.pooling_matrix()
    cols = plan.membership_matrix()
    out = rows @ A @ cols.T
    return out.astype(DTYPE)
