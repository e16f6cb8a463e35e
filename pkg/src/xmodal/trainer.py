"""Two-stage training: per-modality reid warm start, then alternating label refresh and collaborative training."""

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix, check_count, one_hot
from .data import ModalityDataset, PseudoLabeling, cluster_init
from .exceptions import ConfigError, DataError
from .losses import LossWeights
from .model import ModelParams, MomentumSGD, SgdConfig, backward_and_step, forward, forward_all
from .neighbor import (
    NclrConfig,
    inconsistency_scores,
    knn,
    refine_labels,
    score_histogram,
    split_clean_noisy,
)
from .objectives import BranchObjective, Stage1Objective, Stage2Objective
from .transport import TransportConfig, dual_assign

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 40
    epochs_stage2: int = 20
    ids_per_batch: int = 8
    instances_per_id: int = 4
    transport: TransportConfig = TransportConfig()
    nclr: NclrConfig = NclrConfig()
    weights: LossWeights = LossWeights()
    sgd: SgdConfig = SgdConfig()
    hidden_dim: int = 64
    emb_dim: int = 32
    steps_per_epoch: int = 0  # 0: one pass over the larger modality in P*K chunks
    seed: int = 0

    def __post_init__(self):
        check_count(self.epochs_stage1, "epochs_stage1", 0)
        check_count(self.epochs_stage2, "epochs_stage2", 0)
        check_count(self.ids_per_batch, "ids_per_batch", 2)
        check_count(self.instances_per_id, "instances_per_id", 1)
        check_count(self.hidden_dim, "hidden_dim", 1)
        check_count(self.emb_dim, "emb_dim", 2)
        check_count(self.steps_per_epoch, "steps_per_epoch", 0)
        check_count(self.seed, "seed", 0)


@dataclass
class EpochState:
    """Label-refresh products for one stage-2 epoch."""

    assigned_r_from_v: np.ndarray
    assigned_v_from_r: np.ndarray
    refined_r_from_v: np.ndarray
    refined_v_from_r: np.ndarray
    partition_v: object
    partition_r: object
    score_histogram: tuple
    unrefined_v: int = 0
    unrefined_r: int = 0
    assign_acc: float = float("nan")
    epoch_losses: dict = field(default_factory=dict)
    plan_r_from_v: object = None
    plan_v_from_r: object = None

    @property
    def mean_score_r(self):
        return float(self.partition_r.scores.mean())


# --- sampling ----------------------------------------------------------------

def _batch_rng(seed, epoch, step, stream):
    return np.random.default_rng([seed, epoch, step, stream])


def _draw_members(rng, members, K):
    replace_ = members.size < K
    return rng.choice(members, size=K, replace=replace_)


def pk_sample(labels_v, labels_r, P, K, seed, epoch, step, paired=False):
    """Draw a P x K batch for each modality.

    ``labels_v`` / ``labels_r`` are hard labels. With ``paired`` both vectors
    live in one label space (a modality's own labels and the labels assigned to
    the other modality); the same P ids are then drawn for both sides from the
    ids present in both. Otherwise each modality draws its P ids on its own.
    Ids with fewer than K members are sampled with replacement.

    Returns ``(visible_indices, infrared_indices)``, each of length P*K.
    """
    labels_v = np.asarray(labels_v)
    labels_r = np.asarray(labels_r)
    ids_v = np.unique(labels_v)
    ids_r = np.unique(labels_r)
    if ids_v.size < P or ids_r.size < P:
        raise ConfigError(f"need at least P={P} clusters per modality, have {ids_v.size} and {ids_r.size}")
    rng = _batch_rng(seed, epoch, step, int(paired))
    if paired:
        shared = np.intersect1d(ids_v, ids_r)
        if shared.size < 2:
            raise ConfigError("fewer than two identities are shared by both modalities")
        chosen_v = chosen_r = rng.choice(shared, size=min(P, shared.size), replace=False)
    else:
        chosen_v = rng.choice(ids_v, size=P, replace=False)
        chosen_r = rng.choice(ids_r, size=P, replace=False)
    vis = np.concatenate([_draw_members(rng, np.flatnonzero(labels_v == c), K) for c in chosen_v])
    ir = np.concatenate([_draw_members(rng, np.flatnonzero(labels_r == c), K) for c in chosen_r])
    return vis, ir


def _steps(cfg, n_v, n_r):
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    return max(1, max(n_v, n_r) // (cfg.ids_per_batch * cfg.instances_per_id))


# --- stage 1 -------------------------------------------------------------------

def train_stage1(params, data_v, data_r, labeling_v, labeling_r, cfg, optimizer=None):
    """Optimise ``reid_v + reid_r`` on the per-modality pseudo-labels.

    The learning rate ramps linearly over the first ``warmup_epochs`` epochs.
    Returns ``(params, per_epoch_mean_losses)``; ``params`` is updated in place.
    """
    X_v, X_r = data_v.features, data_r.features
    y_v, y_r = labeling_v.hard, labeling_r.hard
    optimizer = optimizer or MomentumSGD(cfg.sgd.momentum)
    steps = _steps(cfg, len(X_v), len(X_r))
    warm_steps = cfg.sgd.warmup_epochs * steps
    log = []
    for epoch in range(cfg.epochs_stage1):
        losses = []
        for step in range(steps):
            g = epoch * steps + step
            lr = cfg.sgd.lr_stage1 * (min(1.0, (g + 1) / warm_steps) if warm_steps else 1.0)
            iv, ir = pk_sample(y_v, y_r, cfg.ids_per_batch, cfg.instances_per_id, cfg.seed, epoch, step)
            objective = Stage1Objective(y_v[iv], y_r[ir], cfg.weights.triplet_margin)
            _, value = backward_and_step(params, np.vstack([X_v[iv], X_r[ir]]), objective, optimizer, lr)
            losses.append(value)
        log.append(float(np.mean(losses)))
        logger.debug("stage1 epoch %d loss %.4f", epoch, log[-1])
    return params, log


# --- label refresh ---------------------------------------------------------------

def _plurality_map(hard, gt, n_labels):
    out = np.full(n_labels, -1)
    for c in range(n_labels):
        members = gt[hard == c]
        if members.size:
            out[c] = np.bincount(members).argmax()
    return out


def assignment_accuracy(assigned, own_labels_counterpart, gt_counterpart, gt_self):
    """Fraction of samples whose assigned cluster's plurality identity matches their own identity."""
    n_labels = int(max(own_labels_counterpart.max(), assigned.max())) + 1
    mapping = _plurality_map(own_labels_counterpart, gt_counterpart, n_labels)
    return float(np.mean(mapping[assigned] == gt_self))


def epoch_refresh(params, data_v, data_r, labeling_v, labeling_r, cfg):
    """Assign labels across modalities, score their neighbour consistency and refine the noisy ones."""
    cache_v = forward_all(params, data_v.features)
    cache_r = forward_all(params, data_r.features)
    f_v, f_r = cache_v.embeddings, cache_r.embeddings
    c_v, c_r = labeling_v.num_clusters, labeling_r.num_clusters

    # visible head on infrared samples -> infrared labels in the visible label space
    y_rv, y_vr, plan_r, plan_v = dual_assign(cache_r.probs["visible"], cache_v.probs["infrared"],
                                             cfg.transport, return_plans=True)
    a_r = one_hot(y_rv, c_v)
    a_v = one_hot(y_vr, c_r)

    k = cfg.nclr.k
    scores_r = inconsistency_scores(a_r, labeling_v.labels, knn(f_r, f_v, min(k, len(f_v))))
    scores_v = inconsistency_scores(a_v, labeling_r.labels, knn(f_v, f_r, min(k, len(f_r))))
    part_r = split_clean_noisy(scores_r, cfg.nclr.tau)
    part_v = split_clean_noisy(scores_v, cfg.nclr.tau)

    same_r = knn(f_r, f_r, min(k, len(f_r) - 1), exclude_self=True)
    same_v = knn(f_v, f_v, min(k, len(f_v) - 1), exclude_self=True)
    ref_r, empty_r = refine_labels(a_r, part_r, same_r, cfg.nclr, return_stats=True)
    ref_v, empty_v = refine_labels(a_v, part_v, same_v, cfg.nclr, return_stats=True)

    acc = float("nan")
    if data_v.gt_ids is not None and data_r.gt_ids is not None:
        acc_r = assignment_accuracy(y_rv, labeling_v.hard, data_v.gt_ids, data_r.gt_ids)
        acc_v = assignment_accuracy(y_vr, labeling_r.hard, data_r.gt_ids, data_v.gt_ids)
        acc = 0.5 * (acc_r + acc_v)

    return EpochState(
        assigned_r_from_v=y_rv,
        assigned_v_from_r=y_vr,
        refined_r_from_v=ref_r,
        refined_v_from_r=ref_v,
        partition_v=part_v,
        partition_r=part_r,
        score_histogram=score_histogram(scores_r, cfg.nclr.tau),
        unrefined_v=empty_v,
        unrefined_r=empty_r,
        assign_acc=acc,
        plan_r_from_v=plan_r,
        plan_v_from_r=plan_v,
    )


# --- stage 2 -------------------------------------------------------------------

def train_stage2(params, data_v, data_r, labeling_v, labeling_r, cfg, optimizer=None, on_epoch=None):
    """Alternate a label refresh with one epoch of collaborative training.

    Each step draws a visible-branch batch (visible ids plus the infrared
    samples assigned to them) and an infrared-branch batch (the mirror image)
    and minimises ``L_cv + L_cr + alpha * L_r`` on their concatenation.
    ``on_epoch(epoch, state)`` is called after each epoch's optimisation.
    Returns ``(params, states)``.
    """
    X_v, X_r = data_v.features, data_r.features
    y_v, y_r = labeling_v.hard, labeling_r.hard
    optimizer = optimizer or MomentumSGD(cfg.sgd.momentum)
    steps = _steps(cfg, len(X_v), len(X_r))
    P, K = cfg.ids_per_batch, cfg.instances_per_id
    margin = cfg.weights.triplet_margin
    states = []
    for epoch in range(cfg.epochs_stage2):
        state = epoch_refresh(params, data_v, data_r, labeling_v, labeling_r, cfg)
        sums = {"total": 0.0, "cv": 0.0, "cr": 0.0, "r": 0.0}
        for step in range(steps):
            # the epoch counter is offset so stage-2 batches never repeat stage-1 draws
            e = cfg.epochs_stage1 + epoch
            vv, vr = pk_sample(y_v, state.assigned_r_from_v, P, K, cfg.seed, e, 2 * step, paired=True)
            rv, rr = pk_sample(state.assigned_v_from_r, y_r, P, K, cfg.seed, e, 2 * step + 1, paired=True)
            vis_branch = BranchObjective("visible", vv.size, y_v[vv], state.refined_r_from_v[vr], margin)
            ir_branch = BranchObjective("infrared", rr.size, y_r[rr], state.refined_v_from_r[rv], margin)
            objective = Stage2Objective(vis_branch, ir_branch, cfg.nclr.k, cfg.weights)
            batch = np.vstack([X_v[vv], X_r[vr], X_r[rr], X_v[rv]])
            backward_and_step(params, batch, objective, optimizer, cfg.sgd.lr_stage2)
            for key in sums:
                sums[key] += objective.terms[key]
        state.epoch_losses = {key: v / steps for key, v in sums.items()}
        states.append(state)
        logger.debug("stage2 epoch %d loss %.4f acc %.3f", epoch, state.epoch_losses["total"], state.assign_acc)
        if on_epoch is not None:
            on_epoch(epoch, state)
    return params, states


# --- full pipeline ---------------------------------------------------------------

@dataclass
class PipelineResult:
    params: object
    stage1_params: object
    labeling_v: PseudoLabeling
    labeling_r: PseudoLabeling
    stage1_losses: list
    states: list


def _cluster_count(requested, data, name):
    if requested:
        return requested
    if data.gt_ids is None:
        raise ConfigError(f"{name} must be set for data without ground-truth ids")
    return int(np.unique(data.gt_ids).size)


def fit_pipeline(data_v, data_r, cfg, clusters_visible=0, clusters_infrared=0, kmeans_max_iter=100,
                 stage1_only=False, on_stage1_end=None, on_epoch=None):
    """Cluster each modality, train stage 1, then (unless ``stage1_only``) stage 2.

    ``on_stage1_end(params, losses)`` sees the stage-1 model and its per-epoch
    losses before stage 2 starts.
    Momentum buffers are reset between the stages.
    """
    k_v = _cluster_count(clusters_visible, data_v, "clusters_visible")
    k_r = _cluster_count(clusters_infrared, data_r, "clusters_infrared")
    labeling_v = cluster_init(data_v.features, k_v, cfg.seed, kmeans_max_iter)
    labeling_r = cluster_init(data_r.features, k_r, cfg.seed, kmeans_max_iter)
    params = ModelParams.init(data_v.features.shape[1], cfg.hidden_dim, cfg.emb_dim,
                              labeling_v.num_clusters, labeling_r.num_clusters, cfg.seed)
    _, losses = train_stage1(params, data_v, data_r, labeling_v, labeling_r, cfg)
    stage1 = params.copy()
    if on_stage1_end is not None:
        on_stage1_end(stage1, losses)
    states = []
    if not stage1_only:
        _, states = train_stage2(params, data_v, data_r, labeling_v, labeling_r, cfg, on_epoch=on_epoch)
    return PipelineResult(params, stage1, labeling_v, labeling_r, losses, states)


class CrossModalReID(TransformerMixin, BaseEstimator):
    """Unsupervised two-modality embedding learner with cross-modal label association.

    Parameters
    ----------
    config : TrainConfig, optional
        Training hyper-parameters; the default is ``TrainConfig()``.
    n_clusters_visible, n_clusters_infrared : int
        k-means cluster counts per modality.
    stage1_only : bool
        Stop after the per-modality warm start.

    Attributes
    ----------
    params_ : ModelParams
        Trained encoder and heads.
    stage1_params_ : ModelParams
        Snapshot at the end of stage 1.
    labeling_visible_, labeling_infrared_ : PseudoLabeling
        k-means pseudo-labels.
    stage1_losses_ : list of float
    states_ : list of EpochState
        One per stage-2 epoch.
    """

    def __init__(self, config=None, n_clusters_visible=8, n_clusters_infrared=8, stage1_only=False):
        self.config = config
        self.n_clusters_visible = n_clusters_visible
        self.n_clusters_infrared = n_clusters_infrared
        self.stage1_only = stage1_only

    def fit(self, X_visible, X_infrared, y=None):
        cfg = self.config if self.config is not None else TrainConfig()
        data_v = ModalityDataset(as_matrix(X_visible, "X_visible"), "visible")
        data_r = ModalityDataset(as_matrix(X_infrared, "X_infrared"), "infrared")
        if data_v.features.shape[1] != data_r.features.shape[1]:
            raise DataError("both modalities need the same number of features")
        result = fit_pipeline(data_v, data_r, cfg, self.n_clusters_visible, self.n_clusters_infrared,
                              stage1_only=self.stage1_only)
        self.params_ = result.params
        self.stage1_params_ = result.stage1_params
        self.labeling_visible_ = result.labeling_v
        self.labeling_infrared_ = result.labeling_r
        self.stage1_losses_ = result.stage1_losses
        self.states_ = result.states
        self.n_features_in_ = data_v.features.shape[1]
        return self

    def transform(self, X):
        """Unit-norm embeddings."""
        check_is_fitted(self)
        return forward_all(self.params_, as_matrix(X)).embeddings

    def predict_proba(self, X, head="visible"):
        check_is_fitted(self)
        return forward(self.params_, X, head)[1]

    def predict(self, X, head="visible"):
        """Cluster ids in the label space of ``head``."""
        return np.argmax(self.predict_proba(X, head), axis=1)
