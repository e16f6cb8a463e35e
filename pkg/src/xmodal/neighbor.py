"""Exact k-NN search and neighbour-consistency label refinement."""

from dataclasses import dataclass

import numpy as np

from ._validation import EPS_KL, as_matrix, check_count, check_real, smooth_simplex
from .exceptions import ConfigError


@dataclass(frozen=True)
class NclrConfig:
    k: int = 10
    tau: float = 1.0
    gamma: float = 0.25

    def __post_init__(self):
        check_count(self.k, "k", 1)
        check_real(self.tau, "tau", allow_inf=True)
        check_real(self.gamma, "gamma", low=0, high=1)


@dataclass
class NeighborIndex:
    neighbor_ids: np.ndarray
    distances: np.ndarray

    @property
    def k(self):
        return self.neighbor_ids.shape[1]


@dataclass
class CleanNoisyPartition:
    scores: np.ndarray
    clean_mask: np.ndarray

    @property
    def clean_fraction(self):
        return float(self.clean_mask.mean()) if self.clean_mask.size else 1.0


def pairwise_sq_dists(A, B):
    """Squared Euclidean distances, clipped at zero."""
    d = (A**2).sum(1)[:, None] - 2.0 * A @ B.T + (B**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def knn(query, reference, k, exclude_self=False):
    """Exact k nearest references per query row (ties resolved by lower index).

    With ``exclude_self`` the query and reference sets must be the same and
    index ``i`` is never returned for query ``i``.
    """
    Q = as_matrix(query, "query")
    R = as_matrix(reference, "reference")
    k = check_count(k, "k", 1)
    available = R.shape[0] - int(bool(exclude_self))
    if k > available:
        raise ConfigError(f"k={k} exceeds the {available} available references")
    if exclude_self and Q.shape[0] != R.shape[0]:
        raise ConfigError("exclude_self requires query and reference to be the same set")

    d2 = pairwise_sq_dists(Q, R)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    # stable sort keeps lower reference indices first among equal distances
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return NeighborIndex(order, dist)


def kl_rows(P, M, eps=EPS_KL):
    """Row-wise ``KL(P || M)`` after floor-and-renormalise smoothing of both sides."""
    Ps, Ms = smooth_simplex(P, eps), smooth_simplex(M, eps)
    return np.sum(Ps * (np.log(Ps) - np.log(Ms)), axis=-1)


def inconsistency_scores(assigned, counterpart_labels, index):
    """KL between each sample's assigned label and the mean label of its neighbours.

    Parameters
    ----------
    assigned : ndarray of shape (n, C)
        Assigned cross-modality label distributions.
    counterpart_labels : ndarray of shape (m, C)
        Labels of the counterpart-modality samples in the same label space.
    index : NeighborIndex
        Neighbours of each of the ``n`` samples among the ``m`` counterparts.
    """
    A = np.asarray(assigned, dtype=np.float64)
    Y = np.asarray(counterpart_labels, dtype=np.float64)
    if A.ndim != 2 or Y.ndim != 2 or A.shape[1] != Y.shape[1]:
        raise ValueError(f"label shapes disagree: {A.shape} vs {Y.shape}")
    if index.neighbor_ids.shape[0] != A.shape[0]:
        raise ValueError("index has a different number of queries than assigned labels")
    mean = Y[index.neighbor_ids].mean(axis=1)
    return np.maximum(kl_rows(A, mean), 0.0)


def split_clean_noisy(scores, tau):
    scores = np.asarray(scores, dtype=np.float64)
    return CleanNoisyPartition(scores, scores <= tau)


def refine_labels(assigned, partition, same_modality_index, cfg, return_stats=False):
    """Mix each noisy label with the mean label of its clean same-modality neighbours.

    Clean rows, and noisy rows whose neighbourhood holds no clean sample, are
    returned unchanged. The mean runs over the clean neighbours actually found.
    With ``return_stats`` also returns the number of noisy rows left unrefined
    for lack of clean neighbours.
    """
    Y = np.asarray(assigned, dtype=np.float64)
    out = Y.copy()
    ids = same_modality_index.neighbor_ids
    clean = partition.clean_mask
    empty = 0
    if cfg.gamma > 0:
        for i in np.flatnonzero(~clean):
            nbrs = ids[i][clean[ids[i]]]
            if nbrs.size == 0:
                empty += 1
                continue
            out[i] = (1.0 - cfg.gamma) * Y[i] + cfg.gamma * Y[nbrs].mean(axis=0)
    else:
        empty = int(sum(not clean[ids[i]].any() for i in np.flatnonzero(~clean)))
    if return_stats:
        return out, empty
    return out


def score_histogram(scores, tau, bins=50):
    """Counts over ``bins`` uniform bins on ``[0, max(2 tau, max score)]``."""
    scores = np.asarray(scores, dtype=np.float64)
    top = float(scores.max()) if scores.size else 0.0
    if np.isfinite(tau):
        top = max(top, 2.0 * tau)
    if top <= 0:
        top = 1.0
    counts, edges = np.histogram(scores, bins=bins, range=(0.0, top))
    return edges[:-1], edges[1:], counts
