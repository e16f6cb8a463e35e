"""Synthetic two-modality data, k-means pseudo-labels and the dataset file format."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import expm
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix, check_count, check_real, one_hot
from .exceptions import ConfigError, DataError, ParseError

MODALITIES = ("visible", "infrared")

# Largest principal rotation angle (radians) of the infrared transform at gap_strength = 1.
ROTATION_SCALE = 1.0
# Length of the infrared offset at gap_strength = 1. Together with the rotation
# this puts the default benchmark where nearest-neighbour matching across
# modalities is unreliable but cluster structure survives the shift.
OFFSET_SCALE = 13.0


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 20
    dim: int = 16
    per_id_visible: int = 40
    per_id_infrared: int = 40
    noise_sigma: float = 0.3
    gap_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        check_count(self.num_identities, "num_identities", 2)
        check_count(self.dim, "dim", 2)
        check_count(self.per_id_visible, "per_id_visible", 1)
        check_count(self.per_id_infrared, "per_id_infrared", 1)
        check_real(self.noise_sigma, "noise_sigma", low=0)
        check_real(self.gap_strength, "gap_strength", low=0)
        check_count(self.seed, "seed", 0)
        if self.seed >= 2**64:
            raise ConfigError("seed must fit in 64 bits")


@dataclass
class ModalityDataset:
    """Feature matrix of one modality, optionally with ground-truth identities."""

    features: np.ndarray
    modality: str
    gt_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        self.features = as_matrix(self.features, "features")
        if self.gt_ids is not None:
            self.gt_ids = np.asarray(self.gt_ids, dtype=np.int64)
            if self.gt_ids.shape != (self.features.shape[0],):
                raise DataError("gt_ids length must equal the number of rows")

    def __len__(self):
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ModalityDataset):
            return NotImplemented
        if self.modality != other.modality or not np.array_equal(self.features, other.features):
            return False
        if (self.gt_ids is None) != (other.gt_ids is None):
            return False
        return self.gt_ids is None or np.array_equal(self.gt_ids, other.gt_ids)


@dataclass
class PseudoLabeling:
    """Row-stochastic N x K label matrix (hard labels are one-hot rows)."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim != 2 or self.labels.shape[1] < 1:
            raise DataError("labels must be an N x K matrix with K >= 1")
        if np.any(self.labels < 0) or np.any(self.labels > 1):
            raise DataError("label entries must lie in [0, 1]")
        if not np.allclose(self.labels.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise DataError("label rows must sum to 1")

    @classmethod
    def from_hard(cls, hard, num_clusters=None):
        hard = np.asarray(hard, dtype=np.int64)
        k = int(hard.max()) + 1 if num_clusters is None else num_clusters
        return cls(one_hot(hard, k))

    @property
    def num_clusters(self):
        return self.labels.shape[1]

    @property
    def hard(self):
        return np.argmax(self.labels, axis=1)


def _modality_transform(rng, dim, gap_strength):
    skew = rng.standard_normal((dim, dim))
    skew = skew - skew.T
    skew /= np.linalg.norm(skew, 2)
    offset_dir = rng.standard_normal(dim)
    offset_dir /= np.linalg.norm(offset_dir)
    if gap_strength == 0:
        return np.eye(dim), np.zeros(dim)
    rotation = expm(gap_strength * ROTATION_SCALE * skew)
    return rotation, gap_strength * OFFSET_SCALE * offset_dir


def generate_dataset(cfg):
    """Draw a visible/infrared dataset pair with a controllable modality gap.

    Each identity gets a standard-normal latent vector. Visible rows are the
    latent plus isotropic noise; infrared rows pass the latent through a fixed
    rotation and translation (both derived from the seed and scaled by
    ``gap_strength``) before the noise is added.
    """
    rng = np.random.default_rng(cfg.seed)
    rotation, offset = _modality_transform(rng, cfg.dim, cfg.gap_strength)
    latents = rng.standard_normal((cfg.num_identities, cfg.dim))

    ids_v = np.repeat(np.arange(cfg.num_identities), cfg.per_id_visible)
    ids_r = np.repeat(np.arange(cfg.num_identities), cfg.per_id_infrared)
    noise_v = rng.standard_normal((ids_v.size, cfg.dim))
    noise_r = rng.standard_normal((ids_r.size, cfg.dim))

    feats_v = latents[ids_v] + cfg.noise_sigma * noise_v
    feats_r = latents[ids_r] @ rotation.T + offset + cfg.noise_sigma * noise_r
    return (
        ModalityDataset(feats_v, "visible", ids_v),
        ModalityDataset(feats_r, "infrared", ids_r),
    )


# --- k-means ---------------------------------------------------------------

def _sq_dists(X, centers):
    d = (X**2).sum(1)[:, None] - 2.0 * X @ centers.T + (centers**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def farthest_point_init(X, k, rng):
    """First centre drawn from ``rng``; each next one is the farthest point (lowest index on ties)."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    dmin = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, ((X - X[nxt]) ** 2).sum(1))
    return X[chosen].copy()


def _lloyd(X, k, seed, max_iter):
    rng = np.random.default_rng(seed)
    centers = farthest_point_init(X, k, rng)
    assign = np.argmin(_sq_dists(X, centers), axis=1)
    history = []
    for _ in range(max_iter):
        new_centers = centers.copy()
        for c in range(k):
            members = assign == c
            if members.any():
                new_centers[c] = X[members].mean(axis=0)
        centers = new_centers
        new_assign = np.argmin(_sq_dists(X, centers), axis=1)
        history.append(float(((X - centers[new_assign]) ** 2).sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign, centers, history


def cluster_init(features, k, seed=0, max_iter=100):
    """One-hot :class:`PseudoLabeling` from seeded Lloyd k-means.

    Empty clusters are dropped and the surviving ids compacted to ``0..K'-1``
    in ascending order of their original index.
    """
    return KMeansLabeler(k, max_iter=max_iter, random_state=seed).fit(features).to_labeling()


class KMeansLabeler(ClusterMixin, BaseEstimator):
    """Seeded Lloyd k-means with farthest-point seeding.

    Parameters
    ----------
    n_clusters : int
        Requested number of clusters; empty clusters are dropped after fitting.
    max_iter : int
        Upper bound on Lloyd iterations.
    random_state : int
        Seed for choosing the first centre.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
        Compacted cluster ids.
    cluster_centers_ : ndarray of shape (n_clusters_, n_features)
    inertia_history_ : list of float
        Sum of squared distances after each iteration; never increases.
    """

    def __init__(self, n_clusters=8, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = as_matrix(X)
        k = check_count(self.n_clusters, "n_clusters", 1)
        check_count(self.max_iter, "max_iter", 1)
        if k > X.shape[0]:
            raise ConfigError(f"n_clusters={k} exceeds the number of samples {X.shape[0]}")
        assign, centers, history = _lloyd(X, k, self.random_state, self.max_iter)
        used = np.unique(assign)
        remap = np.full(k, -1)
        remap[used] = np.arange(used.size)
        self.labels_ = remap[assign]
        self.cluster_centers_ = centers[used]
        self.n_clusters_ = used.size
        self.inertia_history_ = history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = as_matrix(X)
        return np.argmin(_sq_dists(X, self.cluster_centers_), axis=1)

    def to_labeling(self):
        check_is_fitted(self)
        return PseudoLabeling.from_hard(self.labels_, self.n_clusters_)


# --- dataset files -----------------------------------------------------------

def save_dataset(ds, path):
    """Write ``ds`` in the plain-text dataset format.

    Line 1 is ``N D modality has_gt``; each following line holds the D
    features and, when ``has_gt`` is 1, the integer identity.
    """
    n, d = ds.features.shape
    has_gt = int(ds.gt_ids is not None)
    lines = [f"{n} {d} {ds.modality} {has_gt}"]
    for i in range(n):
        row = " ".join(f"{x:.17g}" for x in ds.features[i])
        if has_gt:
            row += f" {int(ds.gt_ids[i])}"
        lines.append(row)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise ParseError("empty file", line=1)
    header = lines[0].split()
    if len(header) != 4:
        raise ParseError("header must be 'N D modality has_gt'", line=1)
    try:
        n, d = int(header[0]), int(header[1])
    except ValueError:
        raise ParseError("N and D must be integers", line=1) from None
    modality, has_gt = header[2], header[3]
    if modality not in MODALITIES or has_gt not in ("0", "1") or n < 0 or d < 1:
        raise ParseError("invalid header values", line=1)
    has_gt = has_gt == "1"
    if len(lines) - 1 != n:
        # first offending line: one past the declared rows, or the missing row
        bad = n + 2 if len(lines) - 1 > n else len(lines) + 1
        raise ParseError(f"header declares {n} rows, found {len(lines) - 1}", line=bad)

    width = d + int(has_gt)
    feats = np.empty((n, d))
    ids = np.empty(n, dtype=np.int64) if has_gt else None
    for i, text in enumerate(lines[1:]):
        lineno = i + 2
        tokens = text.split()
        if len(tokens) != width:
            raise ParseError(f"expected {width} values, found {len(tokens)}", line=lineno)
        for j, tok in enumerate(tokens[:d]):
            try:
                feats[i, j] = float(tok)
            except ValueError:
                raise ParseError(f"non-numeric value {tok!r}", line=lineno, position=j + 1) from None
        if has_gt:
            try:
                ids[i] = int(tokens[d])
            except ValueError:
                raise ParseError(f"non-integer id {tokens[d]!r}", line=lineno, position=d + 1) from None
    return ModalityDataset(feats, modality, ids)
