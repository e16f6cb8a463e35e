"""KL-regularised optimal-transport label assignment solved by log-domain Sinkhorn."""

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import EPS_LOG, as_matrix, check_count, check_real
from .exceptions import ConvergenceWarning, DataError


@dataclass(frozen=True)
class TransportConfig:
    lam: float = 25.0
    tol: float = 1e-9
    max_iter: int = 1000

    def __post_init__(self):
        check_real(self.lam, "lam", low=0, low_open=True)
        check_real(self.tol, "tol", low=0, low_open=True)
        check_count(self.max_iter, "max_iter", 1)


@dataclass
class TransportPlan:
    """Result of :func:`sinkhorn_plan`.

    ``plan = exp(log_u[:, None] + lam * log P + log_v[None, :])``; the scaling
    vectors are kept in log form because they overflow for large ``lam``.
    """

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    iterations_used: int
    residual: float
    log_u: np.ndarray
    log_v: np.ndarray
    converged: bool = True


def _lse(A, axis):
    m = A.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.exp(A - m).sum(axis=axis))


def _scaled(log_k, log_u, log_v):
    return np.exp(log_u[:, None] + log_k + log_v[None, :])


def _marginal_error(Q, a, b):
    return float(max(np.abs(Q.sum(axis=1) - a).max(), np.abs(Q.sum(axis=0) - b).max()))


def _dual_gap(log_k, log_u, log_v, a, b):
    # convex dual whose stationary point is the scaled plan; +inf on overflow
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.exp(_lse((log_u[:, None] + log_k + log_v[None, :]).ravel(), 0))
        value = total - a @ log_u - b @ log_v
    return value if np.isfinite(value) else np.inf


def _newton_step(log_k, log_u, log_v, a, b, max_step=2.0):
    """One damped Newton step on the log-scaling vectors.

    The column block is solved through its Schur complement, which is the
    Laplacian of ``W = Q^T diag(1/r) Q``; building its diagonal from the
    off-diagonal weights avoids cancellation when some couplings are tiny.
    """
    Q = _scaled(log_k, log_u, log_v)
    rows = np.maximum(Q.sum(axis=1), 1e-300)
    cols = Q.sum(axis=0)
    g_row, g_col = rows - a, cols - b
    W = (Q.T / rows) @ Q
    np.fill_diagonal(W, 0.0)
    lap = np.diag(W.sum(axis=1)) - W
    rhs = Q.T @ (g_row / rows) - g_col
    d_v = np.zeros_like(log_v)
    if d_v.size > 1:
        # the Laplacian is singular along the constant vector; pin the last column
        d_v[:-1] = np.linalg.lstsq(lap[:-1, :-1], rhs[:-1], rcond=None)[0]
    d_u = -(g_row + Q @ d_v) / rows

    biggest = max(np.abs(d_u).max(), np.abs(d_v).max(), 1e-300)
    t = min(1.0, max_step / biggest)
    # near the solution the dual objective changes below rounding and Armijo
    # cannot see progress; the marginal error still can
    err0 = max(np.abs(g_row).max(), np.abs(g_col).max())
    err_t = _marginal_error(_scaled(log_k, log_u + t * d_u, log_v + t * d_v), a, b)
    if err_t <= 0.5 * err0:
        return log_u + t * d_u, log_v + t * d_v
    f0 = _dual_gap(log_k, log_u, log_v, a, b)
    slope = g_row @ d_u + g_col @ d_v
    while t > 1e-12 and _dual_gap(log_k, log_u + t * d_u, log_v + t * d_v, a, b) > f0 + 1e-4 * t * slope:
        t *= 0.5
    return log_u + t * d_u, log_v + t * d_v


def _solve_scaling(log_k, log_a, log_b, log_u, log_v, tol, budget, sweeps=30):
    a, b = np.exp(log_a), np.exp(log_b)
    residual = np.inf
    it = 0
    while it < budget:
        it += 1
        if it <= sweeps:
            log_u = log_a - _lse(log_k + log_v[None, :], axis=1)
            log_v = log_b - _lse(log_k + log_u[:, None], axis=0)
        else:
            # plain sweeps contract very slowly once the kernel spans hundreds of nats
            log_u, log_v = _newton_step(log_k, log_u, log_v, a, b)
        residual = _marginal_error(_scaled(log_k, log_u, log_v), a, b)
        if residual <= tol:
            break
    # end on a column sweep: exact column sums pin the total mass to 1 even when
    # the per-entry residuals accumulate
    log_v = log_b - _lse(log_k + log_u[:, None], axis=0)
    residual = _marginal_error(_scaled(log_k, log_u, log_v), a, b)
    return log_u, log_v, it, residual


def _lam_schedule(lam):
    """Doubling ladder ``lam / 2^m, ..., lam / 2, lam`` starting at or below 1."""
    ladder = [lam]
    while ladder[-1] > 1.0:
        ladder.append(ladder[-1] / 2.0)
    return ladder[::-1]


def sinkhorn_plan(P, cfg=TransportConfig()):
    """Solve ``min <Q, -log P> + KL(Q || a b^T) / lam`` under uniform marginals.

    The plan is ``diag(u) K diag(v)`` with ``K = P ** lam``, computed in the
    log domain. Row/column log-sum-exp sweeps do the bulk of the work; when
    they stall, damped Newton steps on ``(log u, log v)`` finish the solve.
    For ``lam > 1`` the problem is first solved on a doubling ladder of
    smaller ``lam`` values, each warm-starting the next.

    Parameters
    ----------
    P : array-like of shape (n_samples, n_classes)
        Positive prediction matrix; entries are floored at 1e-30 before the log.
    cfg : TransportConfig
        ``max_iter`` bounds the total number of sweeps and Newton steps.

    Returns
    -------
    TransportPlan
        ``residual`` is the achieved L-inf row/column marginal error. When it
        still exceeds ``cfg.tol`` after ``cfg.max_iter`` iterations a
        :class:`ConvergenceWarning` is emitted and ``converged`` is False.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] < 1 or P.shape[1] < 1:
        raise DataError("P must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(P)):
        raise DataError("P contains non-finite entries")
    n, c = P.shape
    log_a = np.full(n, -np.log(n))
    log_b = np.full(c, -np.log(c))
    log_p = np.log(np.maximum(P, EPS_LOG))

    log_u, log_v = np.zeros(n), np.zeros(c)
    used = 0
    prev = None
    ladder = _lam_schedule(cfg.lam)
    for step, lam in enumerate(ladder):
        final = step == len(ladder) - 1
        if not final and cfg.max_iter - used < 2 * (len(ladder) - step):
            continue
        if prev is not None:
            log_u, log_v = log_u * (lam / prev), log_v * (lam / prev)
        budget = cfg.max_iter - used if final else (cfg.max_iter - used) // 2
        log_u, log_v, it, residual = _solve_scaling(
            lam * log_p, log_a, log_b, log_u, log_v, cfg.tol if final else 1e-6, budget
        )
        used += it
        prev = lam

    Q = _scaled(cfg.lam * log_p, log_u, log_v)
    converged = residual <= cfg.tol
    if not converged:
        warnings.warn(
            f"Sinkhorn stopped after {used} iterations with residual {residual:.3e}",
            ConvergenceWarning,
            stacklevel=2,
        )
    return TransportPlan(Q, np.exp(log_a), np.exp(log_b), used, residual, log_u, log_v, converged)


def ot_objective(Q, P, lam):
    """``<Q, -log P> + (1/lam) * KL(Q || a b^T)`` with uniform a, b and 0 log 0 = 0."""
    Q = np.asarray(Q, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if Q.shape != P.shape or Q.ndim != 2:
        raise ValueError(f"shape mismatch: Q {Q.shape} vs P {P.shape}")
    n, c = Q.shape
    linear = float(np.sum(Q * -np.log(np.maximum(P, EPS_LOG))))
    pos = Q > 0
    kl = float(np.sum(Q[pos] * (np.log(Q[pos]) + np.log(n) + np.log(c))))
    return linear + kl / lam


def hard_assign(plan):
    """Row-wise argmax of a plan (``TransportPlan`` or matrix); ties go to the lowest column."""
    Q = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan)
    return np.argmax(Q, axis=1)


def dual_assign(pred_r_under_v, pred_v_under_r, cfg=TransportConfig(), return_plans=False):
    """Assign labels across modalities in both directions.

    ``pred_r_under_v`` holds the visible head's predictions for infrared
    samples, so its assignment yields infrared labels in the visible label
    space; ``pred_v_under_r`` is the mirror image.
    """
    plan_r = sinkhorn_plan(as_matrix(pred_r_under_v, "pred_r_under_v"), cfg)
    plan_v = sinkhorn_plan(as_matrix(pred_v_under_r, "pred_v_under_r"), cfg)
    labels = (hard_assign(plan_r), hard_assign(plan_v))
    if return_plans:
        return labels + (plan_r, plan_v)
    return labels


class SinkhornAssigner(BaseEstimator):
    """Estimator wrapper: ``fit(P)`` solves the transport problem, ``labels_`` holds the assignment.

    Parameters
    ----------
    lam : float, default=25.0
        Weight of the linear term relative to the KL prior.
    tol : float, default=1e-9
    max_iter : int, default=1000
    """

    def __init__(self, lam=25.0, tol=1e-9, max_iter=1000):
        self.lam = lam
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, P, y=None):
        cfg = TransportConfig(self.lam, self.tol, self.max_iter)
        result = sinkhorn_plan(P, cfg)
        self.plan_ = result.plan
        self.labels_ = hard_assign(result)
        self.n_iter_ = result.iterations_used
        self.residual_ = result.residual
        self.n_features_in_ = result.plan.shape[1]
        return self

    def fit_predict(self, P, y=None):
        return self.fit(P).labels_

    def objective(self, P):
        check_is_fitted(self)
        return ot_objective(self.plan_, P, self.lam)
