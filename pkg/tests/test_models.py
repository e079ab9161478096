import math

import numpy as np
import pytest

from bidistill.models import (
    AdamState,
    adam_step,
    cf_loss_pairwise,
    cf_loss_pointwise,
    init_adam,
    init_model,
    load_model,
    logit,
    predict,
    save_model,
)


def fd_gradient(loss_fn, model, block, row, col=None, h=1e-4):
    """Central finite difference on one parameter coordinate."""
    arr = {"P": model.P, "Q": model.Q, "b": model.b_item}[block]
    if block == "b":
        orig = arr[row]
        arr[row] = orig + h
        lp, _ = loss_fn(model)
        arr[row] = orig - h
        lm, _ = loss_fn(model)
        arr[row] = orig
    else:
        orig = arr[row, col]
        arr[row, col] = orig + h
        lp, _ = loss_fn(model)
        arr[row, col] = orig - h
        lm, _ = loss_fn(model)
        arr[row, col] = orig
    return (lp - lm) / (2 * h)


def assert_grads_match_fd(loss_fn, model, rel_tol=1e-4):
    _, grads = loss_fn(model)
    checked = 0
    for r, g in zip(grads.user_idx, grads.user_grad):
        for c in range(model.d):
            fd = fd_gradient(loss_fn, model, "P", int(r), c)
            assert abs(fd - g[c]) <= rel_tol * max(abs(fd), abs(g[c]), 1e-6)
            checked += 1
    for r, g in zip(grads.item_idx, grads.item_grad):
        for c in range(model.d):
            fd = fd_gradient(loss_fn, model, "Q", int(r), c)
            assert abs(fd - g[c]) <= rel_tol * max(abs(fd), abs(g[c]), 1e-6)
            checked += 1
    for r, g in zip(grads.bias_idx, grads.bias_grad):
        fd = fd_gradient(loss_fn, model, "b", int(r))
        assert abs(fd - g) <= rel_tol * max(abs(fd), abs(g), 1e-6)
        checked += 1
    assert checked > 0


class TestLogitPredict:
    def test_zero_model_gives_zero_logits(self):
        model = init_model(3, 4, 2, seed=0, init_scale=0.0)
        assert all(logit(model, 0, i) == 0.0 for i in range(4))

    def test_hand_dot_product(self):
        model = init_model(1, 1, 2, seed=0, init_scale=0.0)
        model.P[0] = [1.0, 1.0]
        model.Q[0] = [1.0, 1.0]
        model.b_item[0] = 0.5
        assert logit(model, 0, 0) == pytest.approx(2.5, abs=1e-12)

    def test_logit_matches_coordinate_sum(self):
        model = init_model(5, 7, 6, seed=3, init_scale=0.8)
        for u in range(5):
            for i in range(7):
                brute = sum(model.P[u, k] * model.Q[i, k] for k in range(6)) + model.b_item[i]
                assert abs(logit(model, u, i) - brute) < 1e-12

    def test_predict_at_zero_logit(self):
        model = init_model(2, 2, 2, seed=0, init_scale=0.0)
        for t in (0.5, 1.0, 2.0, 10.0):
            assert predict(model, 0, 0, t) == 0.5

    def test_predict_temperature_value(self):
        model = init_model(1, 1, 1, seed=0, init_scale=0.0)
        model.P[0, 0] = 1.0
        model.Q[0, 0] = 2.0
        # z = 2, T = 2 -> sigmoid(1)
        assert predict(model, 0, 0, 2.0) == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_predict_monotone_in_logit(self):
        model = init_model(1, 50, 1, seed=0, init_scale=0.0)
        model.P[0, 0] = 1.0
        model.Q[:, 0] = np.linspace(-20, 20, 50)
        vals = [predict(model, 0, i) for i in range(50)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_temperature_moves_toward_half(self):
        model = init_model(1, 1, 1, seed=0, init_scale=0.0)
        model.P[0, 0] = 1.0
        model.Q[0, 0] = 3.0
        p1 = predict(model, 0, 0, 1.0)
        p5 = predict(model, 0, 0, 5.0)
        assert abs(p5 - 0.5) < abs(p1 - 0.5)


class TestPointwiseLoss:
    def test_zero_logits_one_pos_one_neg(self):
        model = init_model(1, 2, 2, seed=0, init_scale=0.0)
        loss, _ = cf_loss_pointwise(model, 0, np.array([0]), np.array([1]))
        assert loss == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            model = init_model(4, 9, 8, seed=trial, init_scale=0.5)
            pos = rng.choice(9, 2, replace=False)
            neg = rng.choice(np.setdiff1d(np.arange(9), pos), 3, replace=False)
            assert_grads_match_fd(
                lambda m: cf_loss_pointwise(m, 1, pos, neg), model)

    def test_perfect_separation_loss_vanishes(self):
        model = init_model(1, 2, 1, seed=0, init_scale=0.0)
        model.P[0, 0] = 1.0
        model.Q[0, 0] = 30.0
        model.Q[1, 0] = -30.0
        loss, _ = cf_loss_pointwise(model, 0, np.array([0]), np.array([1]))
        assert loss < 1e-6

    def test_loss_finite_under_extreme_logits(self):
        model = init_model(1, 2, 1, seed=0, init_scale=0.0)
        model.P[0, 0] = 1.0
        model.Q[0, 0] = -500.0  # positive scored terribly
        model.Q[1, 0] = 500.0
        loss, _ = cf_loss_pointwise(model, 0, np.array([0]), np.array([1]))
        assert np.isfinite(loss)


class TestPairwiseLoss:
    def test_equal_logits_give_ln2(self):
        model = init_model(1, 2, 2, seed=0, init_scale=0.0)
        loss, _ = cf_loss_pairwise(model, 0, 0, 1)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_gradient_matches_finite_difference(self):
        for trial in range(5):
            model = init_model(4, 9, 8, seed=10 + trial, init_scale=0.5)
            assert_grads_match_fd(lambda m: cf_loss_pairwise(m, 2, 3, 7), model)

    def test_swapping_items_negates_argument(self):
        model = init_model(2, 5, 4, seed=1, init_scale=0.7)
        delta = logit(model, 0, 1) - logit(model, 0, 2)
        l_fwd, _ = cf_loss_pairwise(model, 0, 1, 2)
        l_rev, _ = cf_loss_pairwise(model, 0, 2, 1)
        sig = 1 / (1 + math.exp(-delta))
        assert l_fwd == pytest.approx(-math.log(sig), rel=1e-9)
        assert l_rev == pytest.approx(-math.log(1 - sig), rel=1e-9)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        model = init_model(3, 4, 2, seed=0, init_scale=0.1)
        opt = init_adam(model, lr=0.01, l2=0.0)
        before = model.P.copy()
        loss_fn = lambda m: cf_loss_pointwise(m, 0, np.array([0]), np.array([1]))
        _, grads = loss_fn(model)
        grads.user_grad[:] = 0.0
        grads.item_grad[:] = 0.0
        grads.bias_grad[:] = 0.0
        adam_step(opt, model, grads)
        assert np.array_equal(model.P, before)

    def test_single_step_magnitude(self):
        # g = 1 from zero moments: bias-corrected step is ~ -lr
        model = init_model(1, 1, 1, seed=0, init_scale=0.0)
        opt = init_adam(model, lr=0.001, l2=0.0)
        _, grads = cf_loss_pointwise(model, 0, np.array([0]), np.array([0]))
        grads.user_grad[:] = 1.0
        grads.item_grad[:] = 1.0
        grads.bias_grad[:] = 1.0
        adam_step(opt, model, grads)
        assert model.P[0, 0] == pytest.approx(-0.001, rel=1e-6)

    def test_identical_runs_identical_parameters(self):
        def run():
            model = init_model(3, 5, 2, seed=4, init_scale=0.1)
            opt = init_adam(model, lr=0.01, l2=1e-4)
            for k in range(10):
                _, grads = cf_loss_pointwise(model, k % 3, np.array([k % 5]),
                                             np.array([(k + 1) % 5]))
                adam_step(opt, model, grads)
            return model
        a, b = run(), run()
        assert np.array_equal(a.P, b.P) and np.array_equal(a.Q, b.Q)

    def test_only_touched_rows_change(self):
        model = init_model(6, 8, 3, seed=2, init_scale=0.1)
        opt = init_adam(model, lr=0.01)
        P0, Q0 = model.P.copy(), model.Q.copy()
        _, grads = cf_loss_pointwise(model, 2, np.array([1]), np.array([5]))
        adam_step(opt, model, grads)
        touched_u, touched_i = {2}, {1, 5}
        for u in range(6):
            changed = not np.array_equal(model.P[u], P0[u])
            assert changed == (u in touched_u)
        for i in range(8):
            changed = not np.array_equal(model.Q[i], Q0[i])
            assert changed == (i in touched_i)

    def test_nan_gradient_aborts(self):
        model = init_model(2, 2, 2, seed=0, init_scale=0.1)
        opt = init_adam(model, lr=0.01)
        _, grads = cf_loss_pointwise(model, 0, np.array([0]), np.array([1]))
        grads.user_grad[0, 0] = np.nan
        with pytest.raises(RuntimeError, match="non-finite gradient"):
            adam_step(opt, model, grads)

    def test_l2_pulls_toward_zero(self):
        model = init_model(1, 1, 1, seed=0, init_scale=0.0)
        model.P[0, 0] = 1.0
        opt = init_adam(model, lr=0.01, l2=0.1)
        _, grads = cf_loss_pointwise(model, 0, np.array([0]), np.array([0]))
        grads.user_grad[:] = 0.0
        grads.item_grad[:] = 0.0
        grads.bias_grad[:] = 0.0
        adam_step(opt, model, grads)
        assert model.P[0, 0] < 1.0


class TestInitModel:
    def test_same_seed_identical(self):
        a = init_model(10, 20, 4, seed=7)
        b = init_model(10, 20, 4, seed=7)
        assert np.array_equal(a.P, b.P) and np.array_equal(a.Q, b.Q)

    def test_zero_scale_is_zero(self):
        model = init_model(3, 3, 4, seed=1, init_scale=0.0)
        assert not model.P.any() and not model.Q.any()

    def test_entry_mean_near_zero(self):
        model = init_model(200, 200, 16, seed=5, init_scale=0.01)
        entries = np.concatenate([model.P.ravel(), model.Q.ravel()])
        bound = 5 * 0.01 / math.sqrt(entries.size)
        assert abs(entries.mean()) < bound

    def test_bias_off(self):
        model = init_model(2, 3, 2, seed=0, use_item_bias=False)
        assert model.b_item is None
        assert model.param_count == 2 * 2 + 3 * 2


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = init_model(4, 6, 3, seed=9, loss_kind="pairwise")
        p = tmp_path / "m.npz"
        save_model(model, p)
        back = load_model(p)
        assert np.array_equal(back.P, model.P)
        assert np.array_equal(back.Q, model.Q)
        assert np.array_equal(back.b_item, model.b_item)
        assert back.loss_kind == "pairwise"
        assert back.seed == 9

    def test_roundtrip_no_bias(self, tmp_path):
        model = init_model(4, 6, 3, seed=9, use_item_bias=False)
        p = tmp_path / "m.npz"
        save_model(model, p)
        assert load_model(p).b_item is None
