"""Loss terms with analytic gradients.

Every function returns a :class:`LossValue`. Gradients are taken with respect
to the *direct* inputs of the term: classifier logits for the cross-entropy
and KL terms (the probabilities passed in are assumed to be their softmax),
embeddings for the triplet term. Keys in ``LossValue.grads`` name those inputs.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import EPS_KL, EPS_LOG, check_real, one_hot


@dataclass(frozen=True)
class LossWeights:
    alpha_cncr: float = 0.3
    triplet_margin: float = 0.3

    def __post_init__(self):
        check_real(self.alpha_cncr, "alpha_cncr", low=0)
        check_real(self.triplet_margin, "triplet_margin", low=0)


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)
    # auxiliary counters (skipped samples, active anchors, ...)
    info: dict = field(default_factory=dict)

    def __add__(self, other):
        grads = {k: v.copy() for k, v in self.grads.items()}
        for k, g in other.grads.items():
            grads[k] = grads[k] + g if k in grads else g.copy()
        return LossValue(self.value + other.value, grads, {**self.info, **other.info})

    def scaled(self, w):
        return LossValue(w * self.value, {k: w * g for k, g in self.grads.items()}, dict(self.info))

    def prefixed(self, prefix):
        return LossValue(self.value, {f"{prefix}{k}": g for k, g in self.grads.items()}, dict(self.info))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(p, grad_p):
    """Map a gradient w.r.t. softmax outputs to one w.r.t. the logits."""
    return p * (grad_p - np.sum(grad_p * p, axis=-1, keepdims=True))


def _smooth_backward(x, grad_y, eps=EPS_KL):
    """Backward of ``y = max(x, eps) / sum(max(x, eps))`` along the last axis."""
    floored = np.maximum(x, eps)
    s = floored.sum(axis=-1, keepdims=True)
    y = floored / s
    g = (grad_y - np.sum(grad_y * y, axis=-1, keepdims=True)) / s
    return np.where(x > eps, g, 0.0)


def cross_entropy_soft(pred_probs, targets):
    """Mean soft-target cross-entropy; gradient w.r.t. logits is ``(p - t) / B``."""
    P = np.asarray(pred_probs, dtype=np.float64)
    T = np.asarray(targets, dtype=np.float64)
    if P.shape != T.shape or P.ndim != 2:
        raise ValueError(f"shape mismatch: predictions {P.shape} vs targets {T.shape}")
    B = P.shape[0]
    if B == 0:
        return LossValue(0.0, {"logits": np.zeros_like(P)})
    value = -float(np.sum(T * np.log(np.maximum(P, EPS_LOG)))) / B
    return LossValue(value, {"logits": (P - T) / B})


def _pairwise_dists(E):
    diff = E[:, None, :] - E[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1)), diff


def triplet_batch_hard(embeddings, labels, margin=0.3):
    """Batch-hard triplet loss with Euclidean distances.

    For each anchor the farthest same-label sample and the closest
    different-label sample are picked (lowest index on ties). Anchors missing
    either are left out of the mean.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    B = E.shape[0]
    if B < 2:
        raise ValueError("triplet loss needs at least two embeddings")
    dist, diff = _pairwise_dists(E)
    same = y[:, None] == y[None, :]
    np.fill_diagonal(same, False)
    other = y[:, None] != y[None, :]

    grad = np.zeros_like(E)
    total = 0.0
    valid = 0
    active = 0
    for a in range(B):
        if not same[a].any() or not other[a].any():
            continue
        valid += 1
        p = int(np.argmax(np.where(same[a], dist[a], -np.inf)))
        n = int(np.argmin(np.where(other[a], dist[a], np.inf)))
        hinge = dist[a, p] - dist[a, n] + margin
        if hinge <= 0:
            continue
        active += 1
        total += hinge
        if dist[a, p] > 0:
            u = diff[a, p] / dist[a, p]
            grad[a] += u
            grad[p] -= u
        if dist[a, n] > 0:
            u = diff[a, n] / dist[a, n]
            grad[a] -= u
            grad[n] += u
    if valid == 0:
        return LossValue(0.0, {"embeddings": grad}, {"valid_anchors": 0, "active_anchors": 0})
    return LossValue(total / valid, {"embeddings": grad / valid},
                     {"valid_anchors": valid, "active_anchors": active})


def reid_loss(embeddings, pred_probs, hard_labels, margin=0.3):
    """Triplet plus one-hot cross-entropy on a single modality's batch."""
    P = np.asarray(pred_probs, dtype=np.float64)
    labels = np.asarray(hard_labels, dtype=np.int64)
    tri = triplet_batch_hard(embeddings, labels, margin)
    ce = cross_entropy_soft(P, one_hot(labels, P.shape[1]))
    return tri + ce


def collaborative_loss(branch, cross_probs, cross_targets, own_reid):
    """Branch objective: CE of the counterpart samples under this branch's head plus its own reid loss.

    ``branch`` is ``"visible"`` or ``"infrared"`` and is only recorded. The
    cross-entropy gradient is stored under ``cross_logits``.
    """
    if branch not in ("visible", "infrared"):
        raise ValueError(f"unknown branch {branch!r}")
    P = np.asarray(cross_probs, dtype=np.float64)
    if P.shape[0] == 0:
        out = LossValue(own_reid.value, dict(own_reid.grads), dict(own_reid.info))
        out.grads["cross_logits"] = np.zeros_like(P)
        return out
    ce = cross_entropy_soft(P, cross_targets)
    return LossValue(ce.value, {"cross_logits": ce.grads["logits"]}) + own_reid


def cncr_loss(pred_probs_own, pred_probs_counterpart_neighbors):
    """Mean ``KL(p_i || mean_j q_ij)`` over samples that have at least one neighbour.

    ``pred_probs_counterpart_neighbors`` has shape (B, k, C). Both sides are
    smoothed like the inconsistency score. Gradients flow to both the own
    logits (``logits_own``) and every neighbour's logits (``logits_neighbors``).
    """
    P = np.asarray(pred_probs_own, dtype=np.float64)
    Qn = np.asarray(pred_probs_counterpart_neighbors, dtype=np.float64)
    if Qn.ndim != 3 or Qn.shape[0] != P.shape[0] or Qn.shape[2] != P.shape[1]:
        raise ValueError(f"neighbour predictions {Qn.shape} do not match {P.shape}")
    B, k, _ = Qn.shape
    if B == 0 or k == 0:
        return LossValue(0.0, {"logits_own": np.zeros_like(P), "logits_neighbors": np.zeros_like(Qn)},
                         {"skipped": B})

    M = Qn.mean(axis=1)
    Ps = np.maximum(P, EPS_KL)
    Ps = Ps / Ps.sum(axis=1, keepdims=True)
    Ms = np.maximum(M, EPS_KL)
    Ms = Ms / Ms.sum(axis=1, keepdims=True)
    log_ratio = np.log(Ps) - np.log(Ms)
    value = float(np.sum(Ps * log_ratio)) / B

    g_ps = (log_ratio + 1.0) / B
    g_ms = -(Ps / Ms) / B
    g_p = _smooth_backward(P, g_ps)
    g_m = _smooth_backward(M, g_ms)
    g_q = np.repeat(g_m[:, None, :] / k, k, axis=1)
    return LossValue(
        max(value, 0.0),
        {"logits_own": _softmax_backward(P, g_p), "logits_neighbors": _softmax_backward(Qn, g_q)},
        {"skipped": 0},
    )


def total_loss_stage1(reid_v, reid_r):
    return reid_v.prefixed("v.") + reid_r.prefixed("r.")


def total_loss_stage2(l_cv, l_cr, l_r, weights=LossWeights()):
    return l_cv.prefixed("cv.") + l_cr.prefixed("cr.") + l_r.prefixed("r.").scaled(weights.alpha_cncr)
