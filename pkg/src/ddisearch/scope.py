"""Subgraph-scope selection: scoring, Gumbel-Softmax relaxation, decisions.

A scope (i, j) stands for the union of the i-hop ego-network of the query
head and the j-hop ego-network of the query tail.  Under this encoder the
layer-i full-graph representation of a node equals its representation on the
explicitly extracted ego subgraph (receptive-field property), so the pair
representation for scope (i, j) is simply CONCAT(H_i[u], H_j[v]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T

SOFTPLUS_FLOOR = 1e-6


@dataclass
class ScopeProbTable:
    """Per-query scope scores and probabilities over the eta x eta grid."""
    query: tuple
    beta: np.ndarray
    p: np.ndarray
    tau: float
    noise_mode: str

    def __post_init__(self):
        if abs(self.p.sum() - 1.0) > 1e-9 or np.any(self.p < 0):
            raise ValueError("scope probabilities must be a distribution")


@dataclass(frozen=True)
class ScopeDecision:
    query: tuple
    i: int
    j: int


def pair_repr(layers, u, v, i, j):
    """CONCAT of the layer-i representation of u and the layer-j one of v."""
    if not (1 <= i < len(layers) and 1 <= j < len(layers)):
        raise ValueError(f"scope ({i}, {j}) exceeds available layers")
    hu = T.gather_rows(layers[i], np.asarray([u]))
    hv = T.gather_rows(layers[j], np.asarray([v]))
    return T.concat([hu, hv])


def pair_reprs_batch(layers, us, vs, eta):
    """All eta*eta scope representations for a batch of queries.

    Returns a list of eta*eta tensors of shape (B, 2d), ordered row-major
    over (i, j) with i the head radius.
    """
    us = np.asarray(us, dtype=np.int64)
    vs = np.asarray(vs, dtype=np.int64)
    if eta >= len(layers):
        raise ValueError(f"eta={eta} exceeds available layers")
    reprs = []
    for i in range(1, eta + 1):
        hu = T.gather_rows(layers[i], us)
        for j in range(1, eta + 1):
            hv = T.gather_rows(layers[j], vs)
            reprs.append(T.concat([hu, hv]))
    return reprs


def apply_scorer(z, tensors):
    """Two-layer perceptron 2d -> d -> 1 on pair representations (n, 2d)."""
    hidden = T.relu(T.add_bias(T.matmul(z, tensors["scorer_w1"]),
                               tensors["scorer_b1"]))
    return T.add_bias(T.matmul(hidden, tensors["scorer_w2"]), tensors["scorer_b2"])


def score_scope_table(layers, us, vs, eta, tensors):
    """Score all scopes for a batch; returns (beta (B, eta*eta), reprs list)."""
    reprs = pair_reprs_batch(layers, us, vs, eta)
    cols = [apply_scorer(z, tensors) for z in reprs]
    return T.concat(cols), reprs


def score_scopes(layers, u, v, eta, tensors):
    """Raw scope scores for one query as an eta x eta array (differentiable)."""
    beta, _ = score_scope_table(layers, [u], [v], eta, tensors)
    return beta


def gumbel_probs(beta, tau, rng=None):
    """Temperature softmax over positivized scores with optional Gumbel noise.

    beta is a (B, K) tensor of raw scores.  Scores pass through
    softplus(.) + 1e-6 so their log is defined; this preserves ordering, so
    zero-noise argmax matches argmax of beta.  rng=None means zero noise.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    positive = T.add_constant(T.softplus(beta),
                              np.full(T._data(beta).shape, SOFTPLUS_FLOOR))
    logits = T.log(positive)
    if rng is not None:
        u = rng.uniform(1e-12, 1.0 - 1e-12, size=T._data(beta).shape)
        gumbel = -np.log(-np.log(u))
        logits = T.add_constant(logits, gumbel)
    return T.softmax_rows(T.scale(logits, 1.0 / tau))


def prob_table(query, beta_grid, tau, rng=None):
    """Build a ScopeProbTable for one query from its eta x eta raw scores."""
    beta_grid = np.asarray(beta_grid, dtype=np.float64)
    eta = beta_grid.shape[0]
    if beta_grid.shape != (eta, eta):
        raise ValueError(f"expected square score grid, got {beta_grid.shape}")
    p = gumbel_probs(T.Tensor(beta_grid.reshape(1, -1)), tau, rng)
    mode = "zero" if rng is None else "sampled"
    return ScopeProbTable(query, beta_grid, p.data.reshape(eta, eta), tau, mode)


def mixture(p, reprs):
    """Probability-weighted sum of scope representations (the soft selection)."""
    return T.weighted_mixture(p, reprs)


def select(table: ScopeProbTable) -> ScopeDecision:
    """Argmax scope; ties resolve to the lexicographically smallest (i, j)."""
    flat = int(np.argmax(table.p))
    eta = table.p.shape[0]
    return ScopeDecision(table.query, flat // eta + 1, flat % eta + 1)


def select_flat(p_row, eta):
    """Argmax (i, j) from a flat row-major probability row (1-based)."""
    flat = int(np.argmax(p_row))
    return flat // eta + 1, flat % eta + 1


def scope_histogram(decisions, eta):
    """eta x eta integer counts of decisions; warns (returns zeros) if empty."""
    counts = np.zeros((eta, eta), dtype=np.int64)
    for d in decisions:
        if not (1 <= d.i <= eta and 1 <= d.j <= eta):
            raise ValueError(f"decision {d} outside [1, {eta}]^2")
        counts[d.i - 1, d.j - 1] += 1
    return counts
