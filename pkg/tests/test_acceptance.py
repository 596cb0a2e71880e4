"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary under "acceptance criteria".
"""

import time

import numpy as np
import pytest

from footopt import strategies
from footopt.baselines import matched_baselines
from footopt.constraints import build_policy, mst_q_foot, sample_climbable, validate
from footopt.geometry import DEFAULT_DURATIONS, evaluate, sample
from footopt.kinematics import (
    default_leg,
    forward_kinematics,
    inverse_kinematics,
    jacobian,
    scale_bound,
    solve_position_bound,
    solve_velocity_bound,
)
from footopt.optimizer import (
    DEFAULT_PRIORITY,
    RhsConfig,
    TrajectoryProblem,
    fast_nondominated_sort,
    hypervolume_2d,
    nsga2,
    optimize,
    rhs_select,
    surrogate_forces,
)
from footopt.surrogate import (
    GruModel,
    OracleParams,
    TrainConfig,
    dilate_batch,
    evaluate_loss,
    fit_gru,
    generate_dataset,
    gru_backward,
    gru_forward,
    oracle_forces,
    soft_dtw,
    train,
)

from conftest import random_polygon, record_criterion
from oracles import (
    brute_force_front_ranks,
    monte_carlo_position,
    monte_carlo_velocity,
    random_leg,
    soft_min_over_paths,
)
from test_cli import pipeline

SEEDS = range(5)
SOLVER_STATUS = {}


@pytest.fixture(scope="module")
def oracle_datasets():
    policy = build_policy()
    return {s: generate_dataset(sample_climbable(policy, 200, seed=s), seed=s) for s in SEEDS}


def test_criterion_1_geometry_continuity():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst_junction = worst_boundary = 0.0
    for _ in range(1000):
        poly = random_polygon(rng)
        T1, T2, T3 = poly.durations
        for seg, T in ((1, T1), (2, T2)):
            for a, b in zip(evaluate(poly, T, seg), evaluate(poly, T, seg + 1)):
                worst_junction = max(worst_junction, np.abs(a - b).max())
        for t in (0.0, T3):
            _, v, acc = evaluate(poly, t)
            worst_boundary = max(worst_boundary, np.linalg.norm(v), np.linalg.norm(acc))
    elapsed = time.perf_counter() - start
    ok = worst_junction < 1e-9 and worst_boundary < 1e-9 and elapsed < 5
    record_criterion(1, ok, f"junction gap {worst_junction:.1e}, boundary derivative {worst_boundary:.1e}, "
                            f"{elapsed:.1f} s")
    assert ok


def test_criterion_2_closed_form_points():
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(100):
        poly = random_polygon(rng, DEFAULT_DURATIONS)
        P = poly.points
        expected = {
            6: 2 * P[5] - P[4],
            7: 4 * (P[5] - P[4]) + P[3],
            9: 2 * P[10] - P[11],
            8: 4 * (P[10] - P[11]) + P[12],
            0: P[0], 1: P[0], 2: P[0],
            13: P[15], 14: P[15],
        }
        mismatches += sum(not np.array_equal(P[k], v) for k, v in expected.items())
    record_criterion(2, mismatches == 0, f"{mismatches} dependent-point mismatches over 100 draws")
    assert mismatches == 0


def test_criterion_3_kinematics_solvers():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    leg = default_leg()
    lim = leg.limits
    theta = lim[:, 0] + rng.random((10_000, 3)) * (lim[:, 1] - lim[:, 0])
    theta[:, 2] = rng.uniform(0.05, min(lim[2, 1], 3.0), 10_000)
    p = forward_kinematics(leg, theta)
    round_trip = max(np.linalg.norm(forward_kinematics(leg, inverse_kinematics(leg, q)) - q) for q in p)

    h = 1e-6
    jac_err = 0.0
    for th in theta[:1000]:
        rate = rng.uniform(-5, 5, 3)
        fd = (forward_kinematics(leg, th + h * rate) - forward_kinematics(leg, th - h * rate)) / (2 * h)
        jac_err = max(jac_err, np.abs(jacobian(leg, th) @ rate - fd).max())

    shortfall = -np.inf
    for _ in range(5):
        model = random_leg(rng)
        raw_p, _, _ = solve_position_bound(model, 1.0)
        raw_v, _, _ = solve_velocity_bound(model, 1.0)
        shortfall = max(shortfall, *(monte_carlo_position(model, 1_000_000, rng) - raw_p),
                        *(monte_carlo_velocity(model, 1_000_000, rng) - raw_v))
    elapsed = time.perf_counter() - start
    ok = round_trip < 1e-9 and jac_err < 1e-5 and shortfall <= 1e-6
    SOLVER_STATUS.update(ok=ok, elapsed=elapsed,
                         detail=f"round trip {round_trip:.1e}, Jacobian {jac_err:.1e}, "
                                f"Monte-Carlo excess {shortfall:.1e}")
    assert ok


def test_criterion_3_safety_fixture_velocity():
    scaled = scale_bound((1.012, 0.961), 0.80)
    assert tuple(round(v, 3) for v in scaled) == (0.810, 0.769)


@pytest.mark.xfail(strict=True, reason="published scaled values are not the products of the published raw values")
def test_criterion_3_safety_fixture_published_rounding():
    position = tuple(round(v, 3) for v in scale_bound((0.189, 0.074), 0.85))
    velocity = tuple(round(v, 2) for v in scale_bound((1.012, 0.961), 0.80))
    ok = position == (0.160, 0.064) and velocity == (0.80, 0.77)
    total = SOLVER_STATUS.get("elapsed", np.inf)
    solvers_ok = SOLVER_STATUS.get("ok", False) and total < 60
    record_criterion(3, ok and solvers_ok,
                     f"{SOLVER_STATUS.get('detail', 'solver test not run')}, {total:.0f} s; fixture gives "
                     f"position {position} vs (0.160, 0.064) and velocity {velocity} vs (0.80, 0.77)")
    assert ok


def test_criterion_4_constraints():
    start = time.perf_counter()
    policy = build_policy()
    polys = sample_climbable(policy, 1000, seed=4)
    trajs = [sample(p, policy.n_samples) for p in polys]
    violations = sum(not validate(p, t, policy).ok for p, t in zip(polys, trajs))
    bending = strategies.bending_batch(np.stack([t.position for t in trajs]))

    vertical = build_policy(mst_q_foot())
    drift = 0.0
    for poly in sample_climbable(vertical, 50, seed=4):
        tr = sample(poly, 400)
        drift = max(drift, np.abs(tr.velocity[tr.times >= vertical.durations[1], 0]).max())
    elapsed = time.perf_counter() - start
    ok = violations == 0 and np.all(bending == 0) and drift < 1e-9 and elapsed < 30
    record_criterion(4, ok, f"{violations} violations, max f_s6 {bending.max():.1e}, "
                            f"segment-3 vx {drift:.1e}, {elapsed:.1f} s")
    assert ok


def test_criterion_5_surrogate(oracle_datasets):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=5), rng.normal(size=5)
    sdtw_err = abs(soft_dtw(a, b, 1e-4) - soft_min_over_paths((a[:, None] - b[None, :]) ** 2, 1e-4))

    model = GruModel.init(2, 3, 1, rng)
    x = rng.normal(size=(2, 10, 2))
    target = rng.normal(size=(2, 10))
    out, cache = gru_forward(model, x, return_cache=True)
    _, _, _, dpred = dilate_batch(out[..., 0], target, 0.5, 0.1)
    grads = gru_backward(model, cache, dpred[..., None])
    worst = 0.0
    step = 1e-5
    for param, grad in zip(model.params(), grads):
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + step
            up = dilate_batch(gru_forward(model, x)[..., 0], target, 0.5, 0.1, grad=False)[0].sum()
            param[idx] = old - step
            down = dilate_batch(gru_forward(model, x)[..., 0], target, 0.5, 0.1, grad=False)[0].sum()
            param[idx] = old
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(grad[idx] - fd) / max(abs(fd), 1e-6))

    halved = []
    for seed in SEEDS:
        data = oracle_datasets[seed]
        X, y, _ = data.arrays("train")
        Xv, yv, _ = data.arrays("val")

        def reached_half(epoch, history):
            return history["val_loss"][-1] <= 0.5 * history["initial_val_loss"]

        _, hist = fit_gru(X, y, TrainConfig(epochs=50, seed=seed), Xv, yv, callback=reached_half)
        halved.append(reached_half(None, hist))
    elapsed = time.perf_counter() - start
    ok = sdtw_err < 1e-3 and worst < 1e-3 and sum(halved) >= 4 and elapsed < 600
    record_criterion(5, ok, f"soft-DTW gap {sdtw_err:.1e}, BPTT relative error {worst:.1e}, "
                            f"{sum(halved)}/5 seeds halve validation loss, {elapsed:.0f} s")
    assert ok


def test_criterion_6_optimizer():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    sort_ok = True
    for _ in range(50):
        F = rng.integers(0, 8, size=(60, 3)).astype(float)
        rank = np.empty(len(F), int)
        for r, front in enumerate(fast_nondominated_sort(F)):
            rank[front] = r
        sort_ok &= bool(np.array_equal(rank, brute_force_front_ranks(F)))

    def toy(X):
        return np.column_stack([X[:, 0] ** 2, (X[:, 0] - 2) ** 2]), np.zeros(len(X))

    res = nsga2(toy, [-5.0], [5.0], pop_size=200, generations=200, seed=0)
    hv_err = abs(hypervolume_2d(res.F[res.front], (4.0, 4.0)) - 40.0 / 3.0)

    hand = rhs_select(np.array([[1, 9], [5, 5], [9, 1]]), RhsConfig((0, 1), 0.9, 0.9)) == 1
    members = 0
    for _ in range(100):
        F = rng.random((int(rng.integers(1, 40)), 4))
        k = rhs_select(F, RhsConfig(tuple(rng.permutation(4))))
        members += 0 <= k < len(F)
    elapsed = time.perf_counter() - start
    ok = sort_ok and hv_err < 0.05 and hand and members == 100 and elapsed < 120
    record_criterion(6, ok, f"sort matches brute force: {sort_ok}, hypervolume error {hv_err:.3f}, "
                            f"hand trace: {hand}, {members}/100 front members, {elapsed:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def end_to_end(oracle_datasets):
    """Train, optimise and select once per seed; oracle metrics of everything."""
    start = time.perf_counter()
    policy = build_policy()
    params = OracleParams()
    rows = []
    for seed in SEEDS:
        data = oracle_datasets[seed]
        fd, fp, _ = train(data, TrainConfig(epochs=30, seed=seed))
        problem = TrajectoryProblem(policy, surrogate_forces(fd, fp), pop_size=60, generations=150)
        front, _ = optimize(problem, seed=seed)
        chosen = sample(front.polygons[rhs_select(front, RhsConfig(DEFAULT_PRIORITY))], policy.n_samples)
        groups = matched_baselines(chosen, policy, policy.n_samples, seed=seed + 1000, random_count=50)

        def metrics(tr):
            F = oracle_forces(tr, params).detachment_force
            return strategies.max_force_batch(F), strategies.jitter_batch(F)

        rows.append({
            "selected": metrics(chosen),
            "polynomial": metrics(groups["Polynomial"][0]),
            "random": [metrics(t) for t in groups["Random bezier"]],
            "models": (fd, data),
        })
    return rows, time.perf_counter() - start


def test_criterion_7_end_to_end(end_to_end):
    rows, elapsed = end_to_end
    sel_fs1 = np.median([r["selected"][0] for r in rows])
    rand_fs1 = np.median([m[0] for r in rows for m in r["random"]])
    sel_fs7 = np.median([r["selected"][1] for r in rows])
    poly_fs7 = np.median([r["polynomial"][1] for r in rows])
    ok = sel_fs1 <= 0.8 * rand_fs1 and sel_fs7 <= 0.5 * poly_fs7 and elapsed < 1200
    record_criterion(7, ok, f"median f_s1 {sel_fs1:.3f} vs random {rand_fs1:.3f} "
                            f"({100 * (1 - sel_fs1 / rand_fs1):.0f}% lower), median f_s7 {sel_fs7:.3f} vs "
                            f"polynomial {poly_fs7:.3f}, {elapsed:.0f} s")
    assert ok


def test_trained_models_fit_train_split_at_least_as_well(end_to_end):
    """Median over seeds of the train-minus-validation loss gap is not positive."""
    gaps = []
    for r in end_to_end[0]:
        fd, data = r["models"]
        cfg = TrainConfig()
        gaps.append(evaluate_loss(fd, *data.arrays("train")[:2], cfg) - evaluate_loss(fd, *data.arrays("val")[:2], cfg))
    assert np.median(gaps) <= 0


def test_criterion_8_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    codes = [pipeline(tmp_path / d) for d in ("a", "b")]
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    differing = [n for n in names if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    ok = codes == [[0] * 7] * 2 and not differing and names == sorted(p.name for p in (tmp_path / "b").iterdir())
    record_criterion(8, ok, f"{len(names)} files from 7 commands, {len(differing)} differ between runs")
    assert ok
