import numpy as np
import pytest

from gradcases import smooth_instance
from xmodal.exceptions import ConfigError, ParseError
from xmodal.model import (
    ModelParams,
    MomentumSGD,
    SgdConfig,
    backward_and_step,
    evaluate_closure,
    forward,
    forward_all,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from xmodal.objectives import ReidObjective, Stage1Objective


def test_zero_heads_give_uniform_probabilities():
    params = ModelParams.init(4, 5, 3, 6, 2, seed=0)
    params.head_v_w[:] = 0.0
    _, probs = forward(params, np.random.default_rng(0).standard_normal((7, 4)), "visible")
    np.testing.assert_allclose(probs, 1 / 6, atol=1e-15)


def test_forward_rows_normalised_and_pure():
    params = ModelParams.init(4, 5, 3, 6, 2, seed=1)
    X = np.random.default_rng(1).standard_normal((5, 4))
    X[3] = X[1]
    cache = forward_all(params, X)
    np.testing.assert_allclose(np.linalg.norm(cache.embeddings, axis=1), 1.0, atol=1e-9)
    for probs in cache.probs.values():
        np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(cache.embeddings[1], cache.embeddings[3])


def test_forward_rejects_wrong_width():
    params = ModelParams.init(4, 5, 3, 2, 2)
    with pytest.raises(ConfigError):
        forward_all(params, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        forward(params, np.zeros((2, 4)), "thermal")


def test_zero_learning_rate_leaves_params_unchanged():
    params, X, closure = smooth_instance("stage1", 0)
    before = params.copy()
    backward_and_step(params, X, closure, MomentumSGD(0.9), 0.0)
    assert params == before


def test_single_step_descends():
    decreased = 0
    for seed in range(20):
        params, X, closure = smooth_instance("stage1", seed)
        before, _ = evaluate_closure(params, X, closure)
        backward_and_step(params, X, closure, MomentumSGD(0.9), 1e-3)
        after, _ = evaluate_closure(params, X, closure)
        decreased += after < before
    assert decreased == 20


def test_momentum_accumulates():
    params = ModelParams.init(2, 2, 2, 2, 2, seed=0)
    grads = {name: np.ones_like(arr) for name, arr in params.items()}
    start = params.enc_b1.copy()
    opt = MomentumSGD(0.5)
    opt.step(params, grads, 1.0)
    opt.step(params, grads, 1.0)
    np.testing.assert_allclose(params.enc_b1, start - 1.0 - 1.5)


@pytest.mark.parametrize("name", ["reid", "collab_hard", "collab_refined", "cncr", "stage1", "stage2"])
def test_grad_check_passes(name):
    for seed in range(3):
        params, X, closure = smooth_instance(name, seed)
        assert grad_check(params, X, closure, 1e-5) <= 1e-4


def test_grad_check_detects_sabotage():
    params, X, closure = smooth_instance("stage1", 0)
    _, analytic = evaluate_closure(params, X, closure)
    analytic["enc_w1"] = np.zeros_like(analytic["enc_w1"])
    overall, per_block = grad_check(params, X, closure, 1e-5, analytic=analytic, per_block=True)
    assert overall == pytest.approx(1.0, abs=1e-6)
    assert per_block["enc_w1"] == pytest.approx(1.0, abs=1e-6)
    assert per_block["enc_w2"] <= 1e-4


def test_unused_head_contributes_nothing():
    rng = np.random.default_rng(0)
    params = ModelParams.init(5, 7, 4, 3, 3, seed=0)
    X = rng.standard_normal((8, 5))
    closure = ReidObjective("visible", [0, 0, 1, 1, 2, 2, 0, 1])
    _, per_block = grad_check(params, X, closure, 1e-5, per_block=True)
    assert per_block["head_r_w"] == 0.0 and per_block["head_r_b"] == 0.0


def test_grad_check_rejects_bad_step():
    params, X, closure = smooth_instance("reid", 0)
    with pytest.raises(ConfigError):
        grad_check(params, X, closure, 0.0)


def test_stage1_objective_terms():
    params, X, closure = smooth_instance("stage1", 1)
    value, _ = evaluate_closure(params, X, closure)
    assert value == pytest.approx(closure.terms["reid_v"] + closure.terms["reid_r"])
    assert isinstance(closure, Stage1Objective)


@pytest.mark.parametrize("kwargs", [{"lr_stage1": 0.0}, {"lr_stage2": -1.0}, {"momentum": 1.0}, {"warmup_epochs": -1}])
def test_sgd_config_rejects_invalid(kwargs):
    with pytest.raises(ConfigError):
        SgdConfig(**kwargs)


def test_checkpoint_round_trip(tmp_path):
    params = ModelParams.init(6, 5, 4, 3, 7, seed=9)
    params.enc_b1 += np.pi * 1e-7
    path = tmp_path / "ckpt.txt"
    save_checkpoint(params, path)
    assert load_checkpoint(path) == params


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "ckpt.txt"
    path.write_text("hello\n")
    with pytest.raises(ParseError):
        load_checkpoint(path)
