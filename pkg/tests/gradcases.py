"""Seeded gradient-check instances for every loss composition, kept away from kinks.

The triplet and neighbour terms are piecewise smooth: the hinge, the choice of
hardest positive/negative and the in-batch neighbour set all switch at ties.
An instance is redrawn until every such decision has a margin of at least
``MIN_MARGIN`` in embedding distance, so central differences with a 1e-5 step
never straddle a switch.
"""

import numpy as np

from xmodal.losses import LossWeights
from xmodal.model import ModelParams, forward_all
from xmodal.objectives import (
    BranchObjective,
    CncrObjective,
    ReidObjective,
    Stage1Objective,
    Stage2Objective,
)

D_IN, HIDDEN, D_EMB, C, B = 5, 7, 4, 3, 10
MARGIN = 0.3
K = 3
MIN_MARGIN = 1e-3
COMPOSITIONS = ("reid", "collab_hard", "collab_refined", "cncr", "stage1", "stage2")


def _dists(E):
    return np.sqrt(((E[:, None, :] - E[None, :, :]) ** 2).sum(-1))


def _second_gap(values):
    if values.size < 2:
        return np.inf
    s = np.sort(values)
    return s[1] - s[0]


def triplet_margin(E, labels, margin=MARGIN):
    """Smallest distance to a switch of the batch-hard triplet loss."""
    D = _dists(E)
    labels = np.asarray(labels)
    out = np.inf
    for a in range(len(labels)):
        pos = np.flatnonzero(labels == labels[a])
        pos = pos[pos != a]
        neg = np.flatnonzero(labels != labels[a])
        if pos.size == 0 or neg.size == 0:
            continue
        dp, dn = D[a, pos], D[a, neg]
        out = min(out, abs(dp.max() - dn.min() + margin), _second_gap(-dp), _second_gap(dn),
                  dp.min(), dn.min())
    return out


def knn_margin(E, own, other, k):
    """Smallest gap between the k-th and (k+1)-th counterpart distance of any own row."""
    k_eff = min(k, len(other))
    if k_eff == len(other) or len(own) == 0:
        return np.inf
    D = np.sort(_dists(E)[np.ix_(own, other)], axis=1)
    return float((D[:, k_eff] - D[:, k_eff - 1]).min())


def _labels(rng, n):
    # at least two classes so some anchor has a negative
    while True:
        y = rng.integers(0, C, n)
        if np.unique(y).size > 1:
            return y


def build(name, seed):
    """``(params, X, closure, triplet_groups, knn_groups)`` for one composition and seed."""
    rng = np.random.default_rng([seed, COMPOSITIONS.index(name)])
    params = ModelParams.init(D_IN, HIDDEN, D_EMB, C, C, int(rng.integers(2**31)))
    X = rng.standard_normal((B, D_IN))
    rows = np.arange(B)
    if name == "reid":
        head = ("visible", "infrared")[seed % 2]
        y = _labels(rng, B)
        return params, X, ReidObjective(head, y, MARGIN), [(rows, y)], []
    if name == "cncr":
        n_v = int(rng.integers(3, B - 2))
        return params, X, CncrObjective(n_v, K), [], [(rows[:n_v], rows[n_v:], K), (rows[n_v:], rows[:n_v], K)]
    if name == "stage1":
        n_v = 5
        yv, yr = _labels(rng, n_v), _labels(rng, B - n_v)
        return params, X, Stage1Objective(yv, yr, MARGIN), [(rows[:n_v], yv), (rows[n_v:], yr)], []

    # two-branch batch: 3 own + 2 counterpart rows per branch
    n_own, n_cross = 3, 2
    yv, yr = _labels(rng, n_own), _labels(rng, n_own)
    if name == "collab_hard":
        tv, tr = np.eye(C)[rng.integers(0, C, n_cross)], np.eye(C)[rng.integers(0, C, n_cross)]
    else:
        tv, tr = rng.dirichlet(np.ones(C), n_cross), rng.dirichlet(np.ones(C), n_cross)
    vb = BranchObjective("visible", n_own, yv, tv, MARGIN)
    ib = BranchObjective("infrared", n_own, yr, tr, MARGIN)
    alpha = 0.3 if name == "stage2" else 0.0
    closure = Stage2Objective(vb, ib, k=K, weights=LossWeights(alpha_cncr=alpha, triplet_margin=MARGIN))
    own_v, cross_v, own_r, cross_r = rows[:3], rows[3:5], rows[5:8], rows[8:]
    knn_groups = [(own_v, cross_v, K), (own_r, cross_r, K)] if alpha else []
    return params, X, closure, [(own_v, yv), (own_r, yr)], knn_groups


def smooth_instance(name, seed, max_tries=50):
    """First redraw of ``build(name, seed)`` whose switches are all at least ``MIN_MARGIN`` away."""
    for attempt in range(max_tries):
        params, X, closure, tri, nn = build(name, seed * max_tries + attempt)
        E = forward_all(params, X).embeddings
        margin = min([triplet_margin(E[r], y) for r, y in tri] + [knn_margin(E, o, t, k) for o, t, k in nn] + [np.inf])
        if margin >= MIN_MARGIN:
            return params, X, closure
    raise RuntimeError(f"no smooth {name} instance for seed {seed}")
