import dataclasses
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from footopt.constraints import sample_climbable
from footopt.exceptions import DomainError, OracleError, ShapeError, TrainingError, ValidationError
from footopt.geometry import complete_polygon, sample
from footopt.surrogate import (
    Dataset,
    GruForceRegressor,
    GruModel,
    Normalizer,
    OracleParams,
    TrainConfig,
    _sigmoid,
    dilate_batch,
    dilate_loss,
    dilate_terms,
    fit_gru,
    generate_dataset,
    gru_backward,
    gru_forward,
    load_checkpoint,
    oracle_forces,
    pairwise_sq,
    predict,
    predict_batch,
    save_checkpoint,
    soft_dtw,
    softdtw_compiled,
    softdtw_reference,
    split_indices,
    time_penalty,
    train,
)

from oracles import soft_min_over_paths

QUIET = OracleParams(noise_sigma=0.0)


def lift_polygon(p3, p4=(0.03, 0.03), p5=(0.05, 0.04)):
    free = np.array([p3[0], p4[0], p5[0], 0.1, 0.11, 0.115, p3[1], p4[1], p5[1], 0.03, 0.02, 0.01])
    return complete_polygon(free, (0, 0, 0), (0.12, 0, 0))


def hand_gru(model, x):
    """Step-by-step recurrence with explicit gate matrices."""
    H = model.hidden_size
    Wz, Wr, Wh = model.W[:, :H], model.W[:, H:2 * H], model.W[:, 2 * H:]
    Uz, Ur, Uh = model.U[:, :H], model.U[:, H:2 * H], model.U[:, 2 * H:]
    bz, br, bh = model.b[:H], model.b[H:2 * H], model.b[2 * H:]
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))  # noqa: E731
    h = np.zeros(H)
    out = []
    for xt in x:
        z = sig(xt @ Wz + h @ Uz + bz)
        r = sig(xt @ Wr + h @ Ur + br)
        c = np.tanh(xt @ Wh + (r * h) @ Uh + bh)
        h = (1 - z) * h + z * c
        out.append(h @ model.Wo + model.bo)
    return np.array(out)


@pytest.fixture(scope="module")
def small_dataset(policy):
    return generate_dataset(sample_climbable(policy, 60, seed=11), n_steps=60, seed=11)


class TestOracle:
    def test_deterministic_without_noise(self, rng):
        tr = sample(lift_polygon((0.01, 0.02)), 200)
        a, b = oracle_forces(tr, QUIET), oracle_forces(tr, QUIET)
        assert np.array_equal(a.detachment_force, b.detachment_force)
        assert np.array_equal(a.pre_pressure, b.pre_pressure)

    def test_seeded_noise(self):
        tr = sample(lift_polygon((0.01, 0.02)), 200)
        assert np.array_equal(oracle_forces(tr, seed=4).detachment_force, oracle_forces(tr, seed=4).detachment_force)
        assert not np.array_equal(oracle_forces(tr, seed=4).detachment_force, oracle_forces(tr, seed=5).detachment_force)

    def test_forces_non_negative(self, policy):
        for poly in sample_climbable(policy, 10, seed=2):
            f = oracle_forces(sample(poly, 200))
            assert f.detachment_force.min() >= 0 and f.pre_pressure.min() >= 0

    def test_steeper_lift_lowers_peak(self):
        # the peel force falls as the peel angle opens, so a steep initial lift
        # peaks lower than a shallow one under the same parameters
        steep = oracle_forces(sample(lift_polygon((0.005, 0.03)), 200), QUIET).detachment_force.max()
        shallow = oracle_forces(sample(lift_polygon((0.03, 0.004)), 200), QUIET).detachment_force.max()
        assert steep < shallow

    def test_zero_speed_touchdown(self):
        params = dataclasses.replace(QUIET, baseline=0.0, contact_height=0.0)
        f = oracle_forces(sample(lift_polygon((0.01, 0.02)), 200), params)
        assert f.pre_pressure.max() == 0.0

    def test_impact_peak_formula(self):
        tr = sample(lift_polygon((0.01, 0.02)), 2000)
        f = oracle_forces(tr, QUIET)
        from footopt.surrogate import touchdown

        _, vz = touchdown(tr, QUIET)
        expected = QUIET.contact_stiffness * abs(vz) * QUIET.impact_duration + QUIET.baseline
        assert f.pre_pressure.max() == pytest.approx(expected, rel=1e-3)

    def test_force_stops_after_detachment_segment(self):
        tr = sample(lift_polygon((0.01, 0.02)), 200)
        f = oracle_forces(tr, QUIET)
        assert np.all(f.detachment_force[tr.times > tr.durations[0]] == 0)

    def test_no_touchdown(self):
        free = np.array([0.01, 0.02, 0.05, 0.1, 0.11, 0.115, 0.02, 0.03, 0.04, 0.03, 0.02, 0.01])
        tr = sample(complete_polygon(free, (0, 0, 0), (0.12, 0, 0.05)), 200)
        with pytest.raises(OracleError):
            oracle_forces(tr)

    def test_invalid_params(self):
        with pytest.raises(ValidationError):
            OracleParams(peel_energy=0.0)
        with pytest.raises(ValidationError):
            OracleParams.from_dict({"bogus": 1})


class TestSoftDtw:
    def test_single_cell(self):
        for gamma in (1e-3, 0.1, 10.0):
            assert soft_dtw([0.0], [1.0], gamma) == 1.0

    def test_identical_sequences(self, rng):
        a = rng.normal(size=12)
        assert soft_dtw(a, a, 0.01) <= 0.0

    def test_brute_force_paths(self, rng):
        for gamma in (1e-4, 0.1, 1.0):
            a, b = rng.normal(size=5), rng.normal(size=5)
            D = (a[:, None] - b[None, :]) ** 2
            assert soft_dtw(a, b, gamma) == pytest.approx(soft_min_over_paths(D, gamma), abs=1e-9)

    def test_symmetric(self, rng):
        a, b = rng.normal(size=9), rng.normal(size=7)
        assert soft_dtw(a, b, 0.1) == pytest.approx(soft_dtw(b, a, 0.1), abs=1e-12)

    def test_decreasing_in_gamma(self, rng):
        for _ in range(20):
            a, b = rng.normal(size=8), rng.normal(size=8)
            values = [soft_dtw(a, b, g) for g in (1e-3, 1e-2, 1e-1, 1.0)]
            # at small gamma the gap falls below float resolution
            assert np.all(np.diff(values) <= 0) and values[-1] < values[-2]

    def test_non_positive_gamma(self):
        with pytest.raises(DomainError):
            soft_dtw([0.0], [1.0], 0.0)

    def test_empty(self):
        with pytest.raises(ShapeError):
            soft_dtw([], [1.0], 0.1)

    def test_routes_agree(self, rng):
        D = rng.random((3, 11, 9))
        Z = rng.random((11, 9))
        for gamma in (0.01, 0.5):
            v1, E1, Ed1 = softdtw_reference(D, gamma, Z)
            v2, E2, Ed2 = softdtw_compiled(D, gamma, Z)
            np.testing.assert_allclose(v1, v2, atol=1e-10)
            np.testing.assert_allclose(E1, E2, atol=1e-10)
            np.testing.assert_allclose(Ed1, Ed2, atol=1e-8)

    def test_alignment_is_cost_gradient(self, rng):
        D = rng.random((1, 6, 5))
        gamma, h = 0.3, 1e-6
        _, E, _ = softdtw_compiled(D, gamma)
        for i, j in [(0, 0), (2, 3), (5, 4), (4, 1)]:
            Dp, Dm = D.copy(), D.copy()
            Dp[0, i, j] += h
            Dm[0, i, j] -= h
            fd = (softdtw_compiled(Dp, gamma)[0][0] - softdtw_compiled(Dm, gamma)[0][0]) / (2 * h)
            assert E[0, i, j] == pytest.approx(fd, abs=1e-7)

    def test_pairwise(self, rng):
        a, b = rng.normal(size=(1, 4, 2)), rng.normal(size=(1, 3, 2))
        D = pairwise_sq(a, b)
        assert D[0, 1, 2] == pytest.approx(np.sum((a[0, 1] - b[0, 2]) ** 2))


class TestDilate:
    def test_alpha_one_is_soft_dtw(self, rng):
        a, b = rng.normal(size=10), rng.normal(size=10)
        assert dilate_loss(a, b, alpha=1.0, gamma=0.05) == pytest.approx(soft_dtw(a, b, 0.05), abs=1e-12)

    def test_shift_raises_temporal(self):
        t = np.linspace(0, 1, 40)
        target = np.exp(-((t - 0.4) / 0.05) ** 2)
        shifted = np.roll(target, 2)
        _, _, same = dilate_terms(target, target, gamma=0.01)
        _, _, moved = dilate_terms(shifted, target, gamma=0.01)
        assert moved > same

    def test_identity_temporal_vanishes(self):
        target = np.linspace(0, 3, 30)
        _, shape, temporal = dilate_terms(target, target, gamma=1e-4)
        assert temporal < 1e-6
        assert shape == pytest.approx(soft_dtw(target, target, 1e-4), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            dilate_loss(np.zeros(5), np.zeros(6))

    def test_bad_alpha(self):
        with pytest.raises(DomainError):
            dilate_loss(np.zeros(5), np.zeros(5), alpha=1.5)

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    def test_gradient_finite_difference(self, rng, alpha):
        pred, target = rng.normal(size=(2, 12)), rng.normal(size=(2, 12))
        loss, _, _, grad = dilate_batch(pred, target, alpha, 0.1)
        h = 1e-6
        for b, k in [(0, 0), (0, 5), (1, 11), (1, 7)]:
            p, m = pred.copy(), pred.copy()
            p[b, k] += h
            m[b, k] -= h
            fd = (dilate_batch(p, target, alpha, 0.1, grad=False)[0][b]
                  - dilate_batch(m, target, alpha, 0.1, grad=False)[0][b]) / (2 * h)
            assert grad[b, k] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_time_penalty(self):
        P = time_penalty(3, 3)
        assert P[0, 2] == pytest.approx(4 / 9) and np.all(np.diag(P) == 0)


class TestGru:
    def test_zero_model_outputs_bias(self):
        model = GruModel.zeros(6, 4, 1)
        model.bo[:] = 2.5
        out = gru_forward(model, np.random.default_rng(0).normal(size=(7, 6)))
        np.testing.assert_array_equal(out, np.full((7, 1), 2.5))

    def test_causal_first_step(self, rng):
        model = GruModel.init(6, 5, 1, rng)
        x = rng.normal(size=(9, 6))
        np.testing.assert_allclose(gru_forward(model, x[:1])[0], gru_forward(model, x)[0], atol=0)

    def test_hand_recurrence(self, rng):
        model = GruModel.init(3, 4, 2, rng)
        x = rng.normal(size=(15, 3))
        np.testing.assert_allclose(gru_forward(model, x), hand_gru(model, x), atol=1e-10)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ShapeError):
            gru_forward(GruModel.init(6, 4, 1, rng), np.zeros((5, 3)))

    def test_bptt_gradient(self, rng):
        model = GruModel.init(2, 3, 1, rng)
        x = rng.normal(size=(2, 10, 2))
        target = rng.normal(size=(2, 10))

        def loss_of(m):
            return dilate_batch(gru_forward(m, x)[..., 0], target, 0.5, 0.1, grad=False)[0].sum()

        out, cache = gru_forward(model, x, return_cache=True)
        _, _, _, dpred = dilate_batch(out[..., 0], target, 0.5, 0.1)
        grads = gru_backward(model, cache, dpred[..., None])
        h = 1e-5
        for _ in range(20):
            k = rng.integers(len(grads))
            param = model.params()[k]
            idx = tuple(rng.integers(s) for s in param.shape)
            old = param[idx]
            param[idx] = old + h
            up = loss_of(model)
            param[idx] = old - h
            down = loss_of(model)
            param[idx] = old
            fd = (up - down) / (2 * h)
            assert abs(grads[k][idx] - fd) <= 1e-3 * max(abs(fd), 1e-6)

    def test_sigmoid_stable(self):
        assert _sigmoid(np.array([-1e4, 1e4])).tolist() == [0.0, 1.0]

    def test_checkpoint_round_trip(self, tmp_path, rng):
        model = GruModel.init(6, 4, 1, rng)
        model.x_norm = Normalizer(np.zeros(6), np.ones(6))
        model.y_norm = Normalizer(np.zeros(1), np.ones(1))
        save_checkpoint(model, tmp_path / "m.json")
        again = load_checkpoint(tmp_path / "m.json")
        for a, b in zip(model.params(), again.params()):
            np.testing.assert_array_equal(a, b)

    def test_malformed_checkpoint(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {"W": [1, 2]}}))
        with pytest.raises(ValidationError):
            load_checkpoint(path)
        path.write_text("{not json")
        with pytest.raises(ValidationError):
            load_checkpoint(path)


class TestNormalizerAndSplit:
    def test_round_trip(self, rng):
        x = rng.normal(3, 7, size=(40, 5))
        norm = Normalizer.fit(x, axis=0)
        np.testing.assert_allclose(norm.inverse(norm.transform(x)), x, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(200, 5000), st.integers(0, 100))
    def test_split_fraction(self, n, seed):
        tr, va = split_indices(n, seed=seed)
        assert 0.845 <= len(tr) / n <= 0.855
        assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == n

    def test_dataset_round_trip(self, tmp_path, small_dataset):
        path = tmp_path / "d.jsonl"
        small_dataset.write_jsonl(path)
        again = Dataset.read_jsonl(path, seed=small_dataset.seed)
        for a, b in zip(small_dataset.arrays(), again.arrays()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(again.val_idx, small_dataset.val_idx)


class TestTraining:
    CFG = TrainConfig(epochs=3, batch_size=16, hidden_size=8, seed=5)

    def test_deterministic(self, small_dataset):
        _, _, h1 = train(small_dataset, self.CFG)
        _, _, h2 = train(small_dataset, self.CFG)
        assert h1 == h2

    def test_history_recorded(self, small_dataset):
        _, _, hist = train(small_dataset, self.CFG)
        for name in ("detachment", "pre_pressure"):
            assert hist[name]["epoch"] == [1, 2, 3] and len(hist[name]["val_loss"]) == 3

    def test_too_small(self, small_dataset):
        with pytest.raises(ValidationError):
            train(Dataset(small_dataset.items[:10]), self.CFG)

    def test_memorizes_identical_items(self, small_dataset):
        X, fd, _ = small_dataset.arrays()
        X = np.repeat(X[:1], 24, axis=0)
        y = np.repeat(fd[:1], 24, axis=0)
        cfg = TrainConfig(epochs=150, batch_size=24, hidden_size=16, learning_rate=2e-2, lr_decay=1.0,
                          loss="mse", seed=0)
        model, hist = fit_gru(X, y, cfg)
        assert hist["train_loss"][-1] < 0.01 * hist["train_loss"][0]
        pred = predict(model, small_dataset.items[0].trajectory)
        assert np.abs(pred - y[0]).max() < 0.1 * np.ptp(y[0])

    def test_divergence_reports_epoch(self, small_dataset):
        X, fd, _ = small_dataset.arrays()
        cfg = TrainConfig(epochs=5, hidden_size=4, learning_rate=1e300, lr_decay=1.0, clip_norm=0.0, seed=0)
        with np.errstate(all="ignore"), pytest.raises(TrainingError) as info:
            fit_gru(X, fd, cfg)
        assert info.value.epoch >= 1

    def test_early_stop_callback(self, small_dataset):
        X, fd, _ = small_dataset.arrays()
        _, hist = fit_gru(X, fd, self.CFG, X[:5], fd[:5], callback=lambda e, h: e == 2)
        assert hist["epoch"] == [1, 2] and "initial_val_loss" in hist

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(loss="huber")
        with pytest.raises(ValidationError):
            TrainConfig(alpha=2.0)


class TestPrediction:
    def test_resample_warns(self, small_dataset, rng):
        model = GruModel.init(6, 4, 1, rng)
        model.x_norm = Normalizer(np.zeros(6), np.ones(6))
        model.y_norm = Normalizer(np.zeros(1), np.ones(1))
        model.n_steps = 60
        tr = sample(small_dataset.items[0].polygon, 90)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = predict(model, tr)
        assert len(out) == 90 and any("resampling" in str(w.message) for w in caught)

    def test_untrained_zero_model(self, small_dataset):
        model = GruModel.zeros(6, 4, 1)
        model.bo[:] = 0.3
        model.x_norm = Normalizer(np.zeros(6), np.ones(6))
        model.y_norm = Normalizer(np.array([1.0]), np.array([2.0]))
        model.n_steps = 60
        out = predict(model, small_dataset.items[0].trajectory)
        np.testing.assert_allclose(out, np.full(60, 1.6))

    def test_unfitted_model(self, small_dataset):
        with pytest.raises(NotFittedError):
            predict(GruModel.zeros(6, 4, 1), small_dataset.items[0].trajectory)

    def test_held_out_beats_inter_item_distance(self, small_dataset):
        cfg = TrainConfig(epochs=15, batch_size=16, hidden_size=16, seed=1)
        fd_model, _, _ = train(small_dataset, cfg)
        _, targets, _ = small_dataset.arrays()
        n = len(targets)
        pair = [dilate_loss(targets[i], targets[j]) for i in range(n) for j in range(i + 1, n)]
        threshold = np.percentile(pair, 90)
        for k in small_dataset.val_idx:
            item = small_dataset.items[k]
            assert dilate_loss(predict(fd_model, item.trajectory), item.forces.detachment_force) < threshold


@pytest.mark.xfail(strict=True, reason="DILATE training does not reduce peak-timing error on the oracle data; see decision log")
def test_dilate_tracks_peaks_better_than_mse(policy):
    data = generate_dataset(sample_climbable(policy, 200, seed=3), seed=3)
    X, y, _ = data.arrays("train")
    Xv, yv, _ = data.arrays("val")
    timing = {}
    for loss in ("dilate", "mse"):
        model, _ = fit_gru(X, y, TrainConfig(loss=loss, seed=0))
        timing[loss] = np.mean(np.abs(predict_batch(model, Xv).argmax(axis=1) - yv.argmax(axis=1)))
    assert timing["dilate"] < timing["mse"]


class TestEstimator:
    def test_clone_and_params(self):
        est = GruForceRegressor(hidden_size=5, epochs=2)
        assert clone(est).get_params()["hidden_size"] == 5

    def test_fit_predict(self, small_dataset):
        X, fd, _ = small_dataset.arrays()
        est = GruForceRegressor(hidden_size=6, epochs=2, validation_fraction=0.2).fit(X, fd)
        assert est.predict(X).shape == fd.shape
        assert len(est.history_["val_loss"]) == 2
        assert np.isfinite(est.score(X, fd))
        assert len(est(small_dataset.items[0].trajectory)) == X.shape[1]

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            GruForceRegressor().predict(np.zeros((1, 5, 6)))

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            GruForceRegressor().fit(np.zeros((3, 5, 6)), np.zeros((3, 4)))
