"""Batch objectives: compose loss terms over a forward pass and scatter their gradients.

A closure is called with a :class:`~xmodal.model.ForwardCache` for the whole
batch and returns ``(value, grads)`` with ``grads`` keyed ``embeddings``,
``logits_v`` and ``logits_r``. After each call ``closure.terms`` holds the
values of the individual terms.
"""

import numpy as np

from .losses import (
    LossWeights,
    cncr_loss,
    collaborative_loss,
    reid_loss,
    total_loss_stage1,
    total_loss_stage2,
)
from .neighbor import pairwise_sq_dists

_HEAD_KEY = {"visible": "logits_v", "infrared": "logits_r"}


class _Scatter:
    def __init__(self, cache):
        B = cache.embeddings.shape[0]
        self.grads = {
            "embeddings": np.zeros_like(cache.embeddings),
            "logits_v": np.zeros((B, cache.probs["visible"].shape[1])),
            "logits_r": np.zeros((B, cache.probs["infrared"].shape[1])),
        }

    def add(self, key, rows, g):
        np.add.at(self.grads[key], rows, g)


def _rows(start, stop):
    return np.arange(start, stop)


def _reid_term(cache, rows, head, labels, margin):
    return reid_loss(cache.embeddings[rows], cache.probs[head][rows], labels, margin)


def _scatter_reid(sc, loss, prefix, rows, head):
    sc.add("embeddings", rows, loss.grads[f"{prefix}embeddings"])
    sc.add(_HEAD_KEY[head], rows, loss.grads[f"{prefix}logits"])


def _cncr_term(cache, own_rows, other_rows, head, k):
    """KL of each own-row prediction against the mean of its in-batch counterpart neighbours."""
    k_eff = min(k, other_rows.size)
    probs = cache.probs[head]
    if k_eff == 0 or own_rows.size == 0:
        return cncr_loss(probs[own_rows], np.zeros((own_rows.size, 0, probs.shape[1]))), np.zeros((own_rows.size, 0), int)
    d2 = pairwise_sq_dists(cache.embeddings[own_rows], cache.embeddings[other_rows])
    nbr = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
    nbr_rows = other_rows[nbr]
    return cncr_loss(probs[own_rows], probs[nbr_rows]), nbr_rows


def _scatter_cncr(sc, loss, prefix, own_rows, nbr_rows, head):
    key = _HEAD_KEY[head]
    sc.add(key, own_rows, loss.grads[f"{prefix}logits_own"])
    if nbr_rows.size:
        g = loss.grads[f"{prefix}logits_neighbors"]
        sc.add(key, nbr_rows.ravel(), g.reshape(-1, g.shape[-1]))


class ReidObjective:
    """Single-modality reid loss (triplet + CE) of one branch over the whole batch."""

    def __init__(self, head, labels, margin=0.3):
        self.head = head
        self.labels = np.asarray(labels)
        self.margin = margin
        self.terms = {}

    def __call__(self, cache):
        rows = _rows(0, cache.embeddings.shape[0])
        loss = _reid_term(cache, rows, self.head, self.labels, self.margin)
        sc = _Scatter(cache)
        _scatter_reid(sc, loss, "", rows, self.head)
        self.terms = {"reid": loss.value}
        return loss.value, sc.grads


class BranchObjective:
    """Collaborative branch loss: own-modality rows first, then counterpart rows.

    ``cross_targets`` are label distributions in this branch's label space for
    the counterpart rows (one-hot for the plain assignment, soft after refinement).
    """

    def __init__(self, head, n_own, own_labels, cross_targets, margin=0.3):
        self.head = head
        self.n_own = n_own
        self.own_labels = np.asarray(own_labels)
        self.cross_targets = np.asarray(cross_targets, dtype=np.float64)
        self.margin = margin
        self.terms = {}

    def loss(self, cache, offset=0):
        own = _rows(offset, offset + self.n_own)
        cross = _rows(offset + self.n_own, offset + self.n_own + self.cross_targets.shape[0])
        reid = _reid_term(cache, own, self.head, self.own_labels, self.margin)
        probs = cache.probs[self.head][cross]
        return collaborative_loss(self.head, probs, self.cross_targets, reid), own, cross

    def scatter(self, sc, loss, own, cross, prefix=""):
        _scatter_reid(sc, loss, prefix, own, self.head)
        sc.add(_HEAD_KEY[self.head], cross, loss.grads[f"{prefix}cross_logits"])

    def __call__(self, cache):
        loss, own, cross = self.loss(cache)
        sc = _Scatter(cache)
        self.scatter(sc, loss, own, cross)
        self.terms = {"branch": loss.value}
        return loss.value, sc.grads


class CncrObjective:
    """Two-way neighbour consistency on a batch of ``n_v`` visible rows followed by infrared rows.

    Visible rows are compared, under the visible head, with their nearest
    infrared rows; infrared rows, under the infrared head, with their nearest
    visible rows.
    """

    def __init__(self, n_v, k=10):
        self.n_v = n_v
        self.k = k
        self.terms = {}

    def loss(self, cache, vis_rows, ir_rows):
        l_rv, nbr_v = _cncr_term(cache, vis_rows, ir_rows, "visible", self.k)
        l_rr, nbr_r = _cncr_term(cache, ir_rows, vis_rows, "infrared", self.k)
        return l_rv.prefixed("rv.") + l_rr.prefixed("rr."), (vis_rows, nbr_v, ir_rows, nbr_r)

    def scatter(self, sc, loss, layout, prefix=""):
        vis_rows, nbr_v, ir_rows, nbr_r = layout
        _scatter_cncr(sc, loss, f"{prefix}rv.", vis_rows, nbr_v, "visible")
        _scatter_cncr(sc, loss, f"{prefix}rr.", ir_rows, nbr_r, "infrared")

    def __call__(self, cache):
        B = cache.embeddings.shape[0]
        loss, layout = self.loss(cache, _rows(0, self.n_v), _rows(self.n_v, B))
        sc = _Scatter(cache)
        self.scatter(sc, loss, layout)
        self.terms = {"cncr": loss.value}
        return loss.value, sc.grads


class Stage1Objective:
    """``reid_v + reid_r`` on a batch of visible rows followed by infrared rows."""

    def __init__(self, labels_v, labels_r, margin=0.3):
        self.labels_v = np.asarray(labels_v)
        self.labels_r = np.asarray(labels_r)
        self.margin = margin
        self.terms = {}

    def __call__(self, cache):
        n_v = self.labels_v.size
        vis = _rows(0, n_v)
        ir = _rows(n_v, n_v + self.labels_r.size)
        reid_v = _reid_term(cache, vis, "visible", self.labels_v, self.margin)
        reid_r = _reid_term(cache, ir, "infrared", self.labels_r, self.margin)
        total = total_loss_stage1(reid_v, reid_r)
        sc = _Scatter(cache)
        _scatter_reid(sc, total, "v.", vis, "visible")
        _scatter_reid(sc, total, "r.", ir, "infrared")
        self.terms = {"reid_v": reid_v.value, "reid_r": reid_r.value, "total": total.value}
        return total.value, sc.grads


class Stage2Objective:
    """Full second-stage loss on a concatenated two-branch batch.

    Row layout: visible-branch batch (visible rows, then infrared rows), then
    infrared-branch batch (infrared rows, then visible rows).
    """

    def __init__(self, vis_branch, ir_branch, k=10, weights=LossWeights()):
        self.vis_branch = vis_branch
        self.ir_branch = ir_branch
        self.k = k
        self.weights = weights
        self.terms = {}

    def __call__(self, cache):
        vb, ib = self.vis_branch, self.ir_branch
        n_vb = vb.n_own + vb.cross_targets.shape[0]
        l_cv, own_v, cross_v = vb.loss(cache, 0)
        l_cr, own_r, cross_r = ib.loss(cache, n_vb)

        cncr = CncrObjective(0, self.k)
        l_rv, nbr_v = _cncr_term(cache, own_v, cross_v, "visible", self.k)
        l_rr, nbr_r = _cncr_term(cache, own_r, cross_r, "infrared", self.k)
        l_r = l_rv.prefixed("rv.") + l_rr.prefixed("rr.")

        total = total_loss_stage2(l_cv, l_cr, l_r, self.weights)
        sc = _Scatter(cache)
        vb.scatter(sc, total, own_v, cross_v, "cv.")
        ib.scatter(sc, total, own_r, cross_r, "cr.")
        cncr.scatter(sc, total, (own_v, nbr_v, own_r, nbr_r), "r.")
        self.terms = {"cv": l_cv.value, "cr": l_cr.value, "r": l_r.value, "total": total.value}
        return total.value, sc.grads
