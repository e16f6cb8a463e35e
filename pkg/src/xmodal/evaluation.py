"""Cross-modality retrieval: ranking, CMC, mAP and mINP."""

import json
from dataclasses import dataclass

import numpy as np

from ._validation import as_matrix
from .exceptions import ConfigError, EvaluationError
from .model import forward_all

DIRECTIONS = {"v2r": ("visible", "infrared"), "r2v": ("infrared", "visible")}
REPORT_KEYS = ("r1", "r5", "r10", "r20", "map", "minp", "num_queries", "direction")


@dataclass
class RetrievalReport:
    """Metrics of one retrieval run.

    Attributes
    ----------
    cmc : ndarray
        ``cmc[r - 1]`` is the fraction of queries with a true match within the top ``r``.
    map, minp : float
        Mean average precision and mean inverse negative penalty.
    num_queries : int
        Queries that had at least one match (the ones averaged over).
    direction : str
        ``"v2r"`` or ``"r2v"``.
    num_matchless : int
        Queries left out because the gallery held no match for them.
    """

    cmc: np.ndarray
    map: float
    minp: float
    num_queries: int
    direction: str = ""
    num_matchless: int = 0

    def rank(self, r):
        """CMC at rank ``r``; beyond the gallery size the curve stays at its last value."""
        return float(self.cmc[min(r, self.cmc.size) - 1])

    def as_dict(self):
        return {
            "r1": self.rank(1),
            "r5": self.rank(5),
            "r10": self.rank(10),
            "r20": self.rank(20),
            "map": float(self.map),
            "minp": float(self.minp),
            "num_queries": int(self.num_queries),
            "direction": self.direction,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=False)
            fh.write("\n")

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("rank,cmc\n")
            for r, v in enumerate(self.cmc, start=1):
                fh.write(f"{r},{v:.17g}\n")


def rank_gallery(query_emb, gallery_emb):
    """Gallery indices per query by ascending Euclidean distance, ties to the lower index."""
    Q = as_matrix(query_emb, "query embeddings")
    G = np.asarray(gallery_emb, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ConfigError("gallery is empty")
    if G.shape[1] != Q.shape[1]:
        raise ConfigError(f"query dim {Q.shape[1]} differs from gallery dim {G.shape[1]}")
    d2 = (Q**2).sum(1)[:, None] - 2.0 * Q @ G.T + (G**2).sum(1)[None, :]
    return np.argsort(np.maximum(d2, 0.0), axis=1, kind="stable")


def retrieve(query, gallery, params):
    """Rank the gallery dataset for every query sample under the model's embeddings."""
    if len(gallery) == 0:
        raise ConfigError("gallery is empty")
    q = forward_all(params, query.features).embeddings
    g = forward_all(params, gallery.features).embeddings
    return rank_gallery(q, g)


def compute_metrics(rankings, query_ids, gallery_ids, direction=""):
    """CMC, mAP and mINP from ranked gallery indices.

    Queries with no match in the gallery are skipped and counted in
    ``num_matchless``; if every query is matchless an :class:`EvaluationError`
    is raised.
    """
    rankings = np.asarray(rankings)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if rankings.ndim != 2 or rankings.shape[0] != query_ids.size:
        raise ConfigError("rankings must have one row per query")
    n_gallery = rankings.shape[1]
    matches = gallery_ids[rankings] == query_ids[:, None]
    has_match = matches.any(axis=1)
    if not has_match.any():
        raise EvaluationError("no query has a match in the gallery")
    matches = matches[has_match]

    first = matches.argmax(axis=1)
    cmc = np.zeros(n_gallery)
    np.add.at(cmc, first, 1.0)
    cmc = np.cumsum(cmc) / matches.shape[0]

    ranks = np.arange(1, n_gallery + 1)
    hits = np.cumsum(matches, axis=1)
    n_true = matches.sum(axis=1)
    ap = np.sum(np.where(matches, hits / ranks, 0.0), axis=1) / n_true
    last = n_gallery - matches[:, ::-1].argmax(axis=1)
    inp = n_true / last
    return RetrievalReport(cmc, float(ap.mean()), float(inp.mean()), int(matches.shape[0]),
                           direction, int((~has_match).sum()))


def evaluate(params, data_v, data_r, direction="v2r"):
    """Retrieval report for one direction (``v2r``: visible queries against the infrared gallery)."""
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {sorted(DIRECTIONS)}, got {direction!r}")
    query, gallery = (data_v, data_r) if direction == "v2r" else (data_r, data_v)
    if query.gt_ids is None or gallery.gt_ids is None:
        raise EvaluationError("evaluation needs ground-truth ids on both datasets")
    rankings = retrieve(query, gallery, params)
    return compute_metrics(rankings, query.gt_ids, gallery.gt_ids, direction)
