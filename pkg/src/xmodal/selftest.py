"""Quick oracle suites run by ``xmodal selftest``.

Each suite returns ``(ok, detail)``. The oracles here are deliberately small
and independent of the code paths they check (grid search, brute force,
finite differences).
"""

import itertools
import time
import warnings

import numpy as np

from .evaluation import compute_metrics
from .exceptions import ConvergenceWarning
from .losses import LossWeights
from .model import ModelParams, evaluate_closure, grad_check
from .neighbor import NclrConfig, NeighborIndex, refine_labels, split_clean_noisy
from .objectives import BranchObjective, CncrObjective, ReidObjective, Stage1Objective, Stage2Objective
from .transport import TransportConfig, hard_assign, ot_objective, sinkhorn_plan


def _ot_grid_oracle(P, lam, step=1e-6):
    q = np.arange(0.0, 0.5 + step / 2, step)
    logp = np.log(P)
    lin = -(q * (logp[0, 0] + logp[1, 1]) + (0.5 - q) * (logp[0, 1] + logp[1, 0]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(q > 0, q * np.log(q / 0.25), 0.0)
        ent_off = np.where(q < 0.5, (0.5 - q) * np.log((0.5 - q) / 0.25), 0.0)
    obj = lin + 2.0 * (ent + ent_off) / lam
    best = q[np.argmin(obj)]
    return np.array([[best, 0.5 - best], [0.5 - best, best]])


def suite_ot_grid(n=10, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        P = rng.dirichlet(np.ones(2), size=2)
        lam = float(rng.choice([1.0, 5.0, 25.0]))
        Q = sinkhorn_plan(P, TransportConfig(lam=lam)).plan
        worst = max(worst, float(np.abs(Q - _ot_grid_oracle(P, lam)).max()))
    return bool(worst <= 1e-4), f"max entry error {worst:.2e}"


def suite_ot_marginals(n=50, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        N, C = rng.integers(1, 33), rng.integers(1, 9)
        P = rng.dirichlet(np.ones(C), size=N)
        with warnings.catch_warnings():
            # a residual slightly above tol is reported, but only 1e-6 is required here
            warnings.simplefilter("ignore", ConvergenceWarning)
            plan = sinkhorn_plan(P, TransportConfig(lam=float(rng.choice([1.0, 5.0, 25.0]))))
        Q = plan.plan
        err = max(np.abs(Q.sum(1) - 1 / N).max(), np.abs(Q.sum(0) - 1 / C).max(), abs(Q.sum() - 1))
        worst = max(worst, float(err))
    return bool(worst <= 1e-6), f"max marginal error {worst:.2e}"


def suite_ot_permutation(n=5, seed=2):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        N = int(rng.integers(2, 6))
        P = rng.dirichlet(np.ones(N) * 0.3, size=N) + 1e-3
        P /= P.sum(1, keepdims=True)
        cost = -np.log(P)
        best = min(itertools.permutations(range(N)), key=lambda s: cost[np.arange(N), list(s)].sum())
        got = hard_assign(sinkhorn_plan(P, TransportConfig(lam=1e4)))
        if not np.array_equal(got, best):
            return False, f"assignment {got.tolist()} differs from brute force {list(best)}"
    Q = sinkhorn_plan(np.full((4, 2), 0.5), TransportConfig())
    return bool(np.allclose(Q.plan, 0.125)) and abs(ot_objective(Q.plan, np.full((4, 2), 0.5), 25) - np.log(2)) < 1e-9, \
        "brute-force permutations and uniform fixed point agree"


def _brute_metrics(dist, q_ids, g_ids):
    aps, inps, first = [], [], []
    for i in range(dist.shape[0]):
        order = sorted(range(dist.shape[1]), key=lambda j: (dist[i, j], j))
        hits = [r + 1 for r, j in enumerate(order) if g_ids[j] == q_ids[i]]
        if not hits:
            continue
        aps.append(np.mean([(m + 1) / r for m, r in enumerate(hits)]))
        inps.append(len(hits) / hits[-1])
        first.append(hits[0])
    return np.mean(aps), np.mean(inps), np.array(first)


def suite_metrics(n=30, seed=3):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        nq, ng = int(rng.integers(1, 15)), int(rng.integers(1, 40))
        q_ids, g_ids = rng.integers(0, 4, nq), rng.integers(0, 4, ng)
        if not np.isin(q_ids, g_ids).any():
            continue
        dist = rng.random((nq, ng)).round(2)
        rankings = np.argsort(dist, axis=1, kind="stable")
        rep = compute_metrics(rankings, q_ids, g_ids)
        ap, inp, first = _brute_metrics(dist, q_ids, g_ids)
        cmc = np.array([(first <= r).mean() for r in range(1, ng + 1)])
        worst = max(worst, abs(rep.map - ap), abs(rep.minp - inp), float(np.abs(rep.cmc - cmc).max()))
    hand = compute_metrics(np.array([[0, 1, 2, 3, 4]]), np.array([7]), np.array([7, 0, 7, 0, 0]))
    ok = worst <= 1e-12 and abs(hand.map - 5 / 6) < 1e-9 and abs(hand.minp - 2 / 3) < 1e-9
    return bool(ok), f"max deviation from brute force {worst:.1e}"


def suite_refinement(n=200, seed=4):
    rng = np.random.default_rng(seed)
    C, k = 5, 4
    Y = rng.dirichlet(np.ones(C), size=n)
    ids = np.array([rng.choice(np.delete(np.arange(n), i), k, replace=False) for i in range(n)])
    index = NeighborIndex(ids, np.zeros_like(ids, dtype=float))
    part = split_clean_noisy(rng.random(n) * 2, 1.0)
    out = refine_labels(Y, part, index, NclrConfig(k=k, gamma=0.25))
    same = refine_labels(Y, part, index, NclrConfig(k=k, gamma=0.0))
    all_clean = refine_labels(Y, split_clean_noisy(part.scores, np.inf), index, NclrConfig(k=k))
    ok = (np.abs(out.sum(1) - 1).max() <= 1e-12 and np.all(out >= 0)
          and np.array_equal(same, Y) and np.array_equal(all_clean, Y))
    return bool(ok), "simplex, gamma=0 and tau=inf identities"


def _grad_instances(seed):
    rng = np.random.default_rng(seed)
    B, C = 10, 3
    params = ModelParams.init(5, 7, 4, C, C, seed)
    X = rng.standard_normal((B, 5))
    labels = np.repeat(np.arange(C), 4)[:B]
    soft = rng.dirichlet(np.ones(C), size=4)
    # stage-2 batch of 10 rows: 3 own + 2 counterpart per branch
    vb = BranchObjective("visible", 3, [0, 1, 1], soft[:2])
    ib = BranchObjective("infrared", 3, [2, 2, 0], soft[2:])
    return params, X, {
        "reid": ReidObjective("visible", labels),
        "branch": BranchObjective("infrared", 6, labels[:6], soft[:4]),
        "cncr": CncrObjective(5, k=3),
        "stage1": Stage1Objective(labels[:5], labels[5:]),
        "stage2": Stage2Objective(vb, ib, k=3, weights=LossWeights()),
    }


def suite_gradients(seed=5, sabotage=False):
    params, X, closures = _grad_instances(seed)
    worst = {}
    for name, closure in closures.items():
        analytic = None
        if sabotage:
            _, analytic = evaluate_closure(params, X, closure)
            analytic["enc_w1"] = np.zeros_like(analytic["enc_w1"])
        worst[name] = grad_check(params, X, closure, 1e-5, analytic=analytic)
    name = max(worst, key=worst.get)
    return bool(worst[name] <= 1e-4), f"grad_check worst {name} {worst[name]:.1e}"


SUITES = {
    "ot_grid_oracle": suite_ot_grid,
    "ot_marginals": suite_ot_marginals,
    "ot_permutation": suite_ot_permutation,
    "metric_oracle": suite_metrics,
    "refinement_invariants": suite_refinement,
    "grad_check": suite_gradients,
}


def run_selftest(out=print, sabotage_gradient=False):
    """Run every suite, print one line each, return True when all pass."""
    all_ok = True
    for name, suite in SUITES.items():
        start = time.perf_counter()
        try:
            if name == "grad_check":
                ok, detail = suite(sabotage=sabotage_gradient)
            else:
                ok, detail = suite()
        except Exception as exc:  # a crash is a failed suite, not a crashed self-test
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'} {name:<22} {detail} ({time.perf_counter() - start:.2f}s)")
    return all_ok
