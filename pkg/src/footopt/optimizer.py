"""NSGA-II over the free control-point coordinates, and redundancy-hierarchical selection.

:func:`nsga2` is problem-agnostic: it needs an ``evaluate(X) -> (F, CV)``
callable and a box.  :class:`TrajectoryProblem` supplies that callable for
foot trajectories, and :class:`FootTrajectoryOptimizer` wraps the whole
search-then-select pipeline behind the estimator API.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import strategies
from .constraints import (BENDING_TOLERANCE, evaluate_free, margins_batch, sample_climbable,
                          total_violation, variable_box)
from .exceptions import DomainError, InfeasibleError, ValidationError
from .geometry import FREE_NAMES

ETA_CROSSOVER = 15.0
ETA_MUTATION = 20.0
CROSSOVER_PROB = 0.9
DEFAULT_PRIORITY = ("f_s1", "f_s3", "f_s7", "f_s2", "f_s5")


# -- sorting and diversity -------------------------------------------------


def dominates(a, b):
    return bool(np.all(a <= b) and np.any(a < b))


def fast_nondominated_sort(F):
    """Fronts as ascending index lists; front 0 is the non-dominated set."""
    F = np.asarray(F, dtype=float)
    n = len(F)
    if n == 0:
        return []
    le = np.all(F[:, None, :] <= F[None, :, :], axis=2)
    lt = np.any(F[:, None, :] < F[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    count = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(count == 0)
    while current.size:
        fronts.append(current.tolist())
        count = count - dom[current].sum(axis=0)
        count[current] = -1
        current = np.flatnonzero(count == 0)
    return fronts


def crowding_distance(F):
    """Per-point crowding distance; boundary points get ``inf``."""
    F = np.asarray(F, dtype=float)
    if F.ndim != 2 or len(F) == 0:
        raise DomainError("crowding distance needs a non-empty (n, m) front")
    n, m = F.shape
    d = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for k in range(m):
        order = np.argsort(F[:, k], kind="stable")
        f = F[order, k]
        d[order[0]] = d[order[-1]] = np.inf
        span = f[-1] - f[0]
        if span > 0:
            d[order[1:-1]] += (f[2:] - f[:-2]) / span
    return d


def rank_population(F, CV):
    """Constraint-dominated rank and crowding for every individual.

    Feasible individuals are ranked by non-dominated fronts.  Infeasible ones
    follow, ranked by total violation (equal violations share a rank).
    """
    F = np.asarray(F, dtype=float)
    CV = np.asarray(CV, dtype=float)
    n = len(F)
    rank = np.zeros(n, dtype=int)
    crowd = np.zeros(n)
    feas = np.flatnonzero(CV <= 0)
    r = 0
    if feas.size:
        for front in fast_nondominated_sort(F[feas]):
            idx = feas[front]
            rank[idx] = r
            crowd[idx] = crowding_distance(F[idx])
            r += 1
    infeas = np.flatnonzero(CV > 0)
    if infeas.size:
        levels = np.unique(CV[infeas], return_inverse=True)[1]
        rank[infeas] = r + levels
    return rank, crowd


def _better(i, j, rank, crowd):
    if rank[i] != rank[j]:
        return rank[i] < rank[j]
    if crowd[i] != crowd[j]:
        return crowd[i] > crowd[j]
    return i < j


def tournament(rank, crowd, rng, n):
    """Binary tournament winners (``n`` indices)."""
    pairs = rng.integers(0, len(rank), size=(n, 2))
    return np.array([a if _better(a, b, rank, crowd) else b for a, b in pairs])


def survivors(rank, crowd, k):
    """Indices of the ``k`` best individuals by (rank, -crowding, index)."""
    order = np.lexsort((np.arange(len(rank)), -crowd, rank))
    return np.sort(order[:k])


# -- variation -------------------------------------------------------------


def sbx(p1, p2, lo, hi, rng, eta=ETA_CROSSOVER, prob=CROSSOVER_PROB):
    """Bounded simulated binary crossover on parent arrays ``(N, d)``."""
    c1, c2 = p1.copy(), p2.copy()
    n, d = p1.shape
    do_pair = rng.random(n) < prob
    do_var = (rng.random((n, d)) < 0.5) & do_pair[:, None]
    u = rng.random((n, d))
    span = hi - lo
    for k in range(n):
        for j in np.flatnonzero(do_var[k]):
            x1, x2 = sorted((p1[k, j], p2[k, j]))
            if x2 - x1 < 1e-14 or span[j] <= 0:
                continue
            out = []
            for beta_edge in (1.0 + 2.0 * (x1 - lo[j]) / (x2 - x1), 1.0 + 2.0 * (hi[j] - x2) / (x2 - x1)):
                alpha = 2.0 - beta_edge ** (-(eta + 1.0))
                if u[k, j] <= 1.0 / alpha:
                    bq = (u[k, j] * alpha) ** (1.0 / (eta + 1.0))
                else:
                    bq = (1.0 / (2.0 - u[k, j] * alpha)) ** (1.0 / (eta + 1.0))
                out.append(bq)
            y1 = 0.5 * ((x1 + x2) - out[0] * (x2 - x1))
            y2 = 0.5 * ((x1 + x2) + out[1] * (x2 - x1))
            y1, y2 = np.clip([y1, y2], lo[j], hi[j])
            if rng.random() < 0.5:
                y1, y2 = y2, y1
            c1[k, j], c2[k, j] = y1, y2
    return c1, c2


def polynomial_mutation(X, lo, hi, rng, eta=ETA_MUTATION, rate=None):
    """Bounded polynomial mutation; default per-variable rate is ``1/d``."""
    X = X.copy()
    n, d = X.shape
    rate = 1.0 / d if rate is None else rate
    span = hi - lo
    mask = (rng.random((n, d)) < rate) & (span > 0)[None, :]
    u = rng.random((n, d))
    rows, cols = np.nonzero(mask)
    for k, j in zip(rows, cols):
        x = X[k, j]
        d1 = (x - lo[j]) / span[j]
        d2 = (hi[j] - x) / span[j]
        p = 1.0 / (eta + 1.0)
        if u[k, j] < 0.5:
            val = 2.0 * u[k, j] + (1.0 - 2.0 * u[k, j]) * (1.0 - d1) ** (eta + 1.0)
            dq = val**p - 1.0
        else:
            val = 2.0 * (1.0 - u[k, j]) + 2.0 * (u[k, j] - 0.5) * (1.0 - d2) ** (eta + 1.0)
            dq = 1.0 - val**p
        X[k, j] = min(max(x + dq * span[j], lo[j]), hi[j])
    return X


# -- the genetic loop ------------------------------------------------------


class _Memo:
    """Caches ``evaluate`` results per decision vector (exact bytes)."""

    def __init__(self, evaluate, limit=200_000):
        self.evaluate = evaluate
        self.limit = limit
        self.cache = {}
        self.calls = 0

    def __call__(self, X):
        keys = [x.tobytes() for x in X]
        todo = [i for i, k in enumerate(keys) if k not in self.cache]
        uniq = list(dict.fromkeys(keys[i] for i in todo))
        if uniq:
            if len(self.cache) + len(uniq) > self.limit:
                self.cache = {k: self.cache[k] for k in keys if k in self.cache}
            first = {k: i for i, k in reversed(list(enumerate(keys)))}
            rows = X[[first[k] for k in uniq]]
            F, CV = self.evaluate(rows)
            self.calls += len(rows)
            for k, f, c in zip(uniq, np.atleast_2d(F), np.atleast_1d(CV)):
                self.cache[k] = (np.asarray(f, dtype=float), float(c))
        F = np.array([self.cache[k][0] for k in keys])
        CV = np.array([self.cache[k][1] for k in keys])
        return F, CV


@dataclass
class NsgaResult:
    X: np.ndarray
    F: np.ndarray
    CV: np.ndarray
    front: list
    history: dict = field(default_factory=dict)
    evaluations: int = 0


def nsga2(evaluate, lo, hi, pop_size=200, generations=2000, seed=0, initial=None, init_retries=10,
          callback=None):
    """Minimise ``evaluate(X) -> (F (N, m), CV (N,))`` over the box ``[lo, hi]``.

    ``initial`` seeds the first population; otherwise it is uniform in the
    box, redrawn up to ``init_retries`` times until at least one individual
    is feasible.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise InfeasibleError("empty decision box")
    if pop_size < 4 or pop_size % 2:
        raise ValidationError("pop_size must be an even number >= 4")
    rng = np.random.default_rng(seed)
    memo = _Memo(evaluate)
    if initial is not None:
        X = np.clip(np.asarray(initial, dtype=float)[:pop_size], lo, hi)
        if len(X) < pop_size:
            X = np.vstack([X, lo + rng.random((pop_size - len(X), lo.size)) * (hi - lo)])
        F, CV = memo(X)
    else:
        for _ in range(max(1, init_retries)):
            X = lo + rng.random((pop_size, lo.size)) * (hi - lo)
            F, CV = memo(X)
            if np.any(CV <= 0):
                break
    if not np.any(CV <= 0):
        raise InfeasibleError("no feasible individual after initialisation")
    history = {"best": [], "n_feasible": []}
    for gen in range(generations):
        rank, crowd = rank_population(F, CV)
        parents = tournament(rank, crowd, rng, pop_size)
        c1, c2 = sbx(X[parents[0::2]], X[parents[1::2]], lo, hi, rng)
        children = polynomial_mutation(np.vstack([c1, c2]), lo, hi, rng)
        Fc, CVc = memo(children)
        X = np.vstack([X, children])
        F = np.vstack([F, Fc])
        CV = np.concatenate([CV, CVc])
        rank, crowd = rank_population(F, CV)
        keep = survivors(rank, crowd, pop_size)
        X, F, CV = X[keep], F[keep], CV[keep]
        feas = CV <= 0
        history["best"].append(F[feas].min(axis=0).tolist() if feas.any() else None)
        history["n_feasible"].append(int(feas.sum()))
        if callback is not None:
            callback(gen, X, F, CV)
    feas = np.flatnonzero(CV <= 0)
    front = feas[fast_nondominated_sort(F[feas])[0]].tolist() if feas.size else []
    return NsgaResult(X, F, CV, front, history, memo.calls)


def hypervolume_2d(F, ref):
    """Dominated area of a 2-objective point set up to reference ``ref``."""
    F = np.asarray(F, dtype=float)
    F = F[np.all(F < np.asarray(ref), axis=1)]
    if len(F) == 0:
        return 0.0
    F = F[np.lexsort((F[:, 1], F[:, 0]))]
    area = 0.0
    best = ref[1]
    xs = np.append(F[:, 0], ref[0])
    for k in range(len(F)):
        best = min(best, F[k, 1])
        area += (xs[k + 1] - xs[k]) * (ref[1] - best)
    return float(area)


# -- trajectory problem ----------------------------------------------------


def surrogate_forces(detachment_model, prepressure_model):
    """Force function backed by two trained GRU models (or regressors)."""
    from .surrogate import GruModel, predict_batch

    def run(model, X):
        if isinstance(model, GruModel):
            return predict_batch(model, X)
        return np.asarray(model.predict(X))

    def forces(times, pos, vel, durations):
        X = np.concatenate([pos, vel], axis=-1)
        return run(detachment_model, X), run(prepressure_model, X)

    return forces


def oracle_forces_fn(params=None):
    """Force function backed by the synthetic oracle (deterministic per row)."""
    from .geometry import CompositeTrajectory, segment_index
    from .surrogate import OracleParams, oracle_forces

    params = OracleParams() if params is None else params

    def forces(times, pos, vel, durations):
        fd, fp = [], []
        seg = segment_index(times, durations)
        for p, v in zip(pos, vel):
            traj = CompositeTrajectory(times, p, v, np.zeros_like(p), seg, tuple(durations))
            out = oracle_forces(traj, params)
            fd.append(out.detachment_force)
            fp.append(out.pre_pressure)
        return np.array(fd), np.array(fp)

    return forces


@dataclass
class TrajectoryProblem:
    policy: object
    forces: object
    objectives: tuple = DEFAULT_PRIORITY
    equality_constraints: tuple = ("f_s6",)
    optimal_prepressure: float = strategies.DEFAULT_OPTIMAL_PREPRESSURE
    jitter_threshold: float = strategies.DEFAULT_JITTER_THRESHOLD
    bend_threshold: float = strategies.DEFAULT_BEND_THRESHOLD
    pop_size: int = 200
    generations: int = 2000

    def __post_init__(self):
        self.objectives = tuple(self.objectives)
        if len(self.objectives) < 2:
            raise ValidationError("need at least two objectives")
        bad = [o for o in self.objectives + tuple(self.equality_constraints) if o not in strategies.STRATEGIES]
        if bad:
            raise ValidationError(f"unknown strategy {bad[0]!r}")
        variable_box(self.policy)

    @property
    def box(self):
        return variable_box(self.policy)

    def evaluate(self, free):
        """Objectives ``(N, m)`` and total constraint violation ``(N,)``."""
        P, times, pos, vel, _ = evaluate_free(self.policy, free)
        cv = total_violation(margins_batch(self.policy, P, times, pos, vel))
        for name in self.equality_constraints:
            val = strategies.evaluate_batch([name], times, pos, vel, None, None, self.policy.durations[1],
                                            bend_threshold=self.bend_threshold)[:, 0]
            cv = cv + np.where(np.abs(val) > BENDING_TOLERANCE, np.abs(val), 0.0)
        Fd, Fp = self.forces(times, pos, vel, self.policy.durations)
        F = strategies.evaluate_batch(self.objectives, times, pos, vel, Fd, Fp, self.policy.durations[1],
                                      self.optimal_prepressure, self.jitter_threshold, self.bend_threshold)
        return F, cv

    def config(self):
        return {
            "objectives": list(self.objectives),
            "equality_constraints": list(self.equality_constraints),
            "a": self.optimal_prepressure,
            "m": self.jitter_threshold,
            "bend_threshold": self.bend_threshold,
            "pop_size": self.pop_size,
            "generations": self.generations,
            "policy": self.policy.summary(),
        }

    def digest(self):
        blob = json.dumps(self.config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class ParetoFront:
    objectives: tuple
    F: np.ndarray
    X: np.ndarray
    polygons: list = field(default_factory=list)
    problem_hash: str = ""
    seed: int = 0

    def __len__(self):
        return len(self.F)

    def rows(self):
        return list(zip(self.F, self.X, self.polygons or [None] * len(self.F)))


def dedupe(F, X):
    """Drop repeated decision vectors, keeping first occurrence order."""
    _, first = np.unique(X, axis=0, return_index=True)
    keep = np.sort(first)
    return F[keep], X[keep]


def optimize(problem, seed=0, initial=None, callback=None):
    """Run NSGA-II on a trajectory problem and return ``(ParetoFront, NsgaResult)``.

    The initial population is drawn from the climbable sampler so the search
    starts feasible.
    """
    box = problem.box
    if initial is None:
        initial = np.array([p.free for p in sample_climbable(problem.policy, problem.pop_size, seed=seed)])
    res = nsga2(problem.evaluate, box[:, 0], box[:, 1], problem.pop_size, problem.generations, seed,
                initial=initial, callback=callback)
    F, X = dedupe(res.F[res.front], problem.policy.tie(res.X[res.front]))
    polys = [problem.policy.polygon(x) for x in X]
    return ParetoFront(problem.objectives, F, X, polys, problem.digest(), seed), res


# -- redundancy-hierarchical selection -------------------------------------


@dataclass(frozen=True)
class RhsConfig:
    priority: tuple
    alpha: float = 0.9
    beta: float = 0.9

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0 and 0.0 < self.beta < 1.0):
            raise ValidationError("alpha and beta must lie in (0, 1)")


def _columns(priority, names, m):
    cols = []
    for p in priority:
        if isinstance(p, str):
            if names is None or p not in names:
                raise ValidationError(f"priority entry {p!r} is not a front column")
            cols.append(list(names).index(p))
        else:
            cols.append(int(p))
    if sorted(cols) != list(range(m)):
        raise ValidationError("priority must be a permutation of the front's columns")
    return cols


def rhs_select(front, cfg, names=None, trace=None):
    """Index of the single row kept by redundancy-hierarchical filtering.

    ``front`` is an ``(n, m)`` array or a :class:`ParetoFront`.  If ``trace``
    is a list, one dict per iteration is appended to it.
    """
    if isinstance(front, ParetoFront):
        names = front.objectives
        F = front.F
    else:
        F = np.asarray(front, dtype=float)
    if F.ndim != 2 or len(F) == 0:
        raise DomainError("cannot select from an empty front")
    cols = _columns(cfg.priority, names, F.shape[1])
    alive = np.arange(len(F))
    alpha = cfg.alpha
    i = 0
    stalled = 0
    while len(alive) > 1:
        col = cols[i % len(cols)]
        v = F[alive, col]
        vmi, vma = v.min(), v.max()
        vr = vmi + (vma - vmi) * alpha
        keep = v <= vr
        if not keep.any():
            keep = v == vmi
        removed = len(alive) - int(keep.sum())
        if trace is not None:
            trace.append({"iteration": i, "column": col, "alpha": alpha, "V_r": float(vr),
                          "removed": alive[~keep].tolist()})
        alive = alive[keep]
        alpha = alpha * cfg.beta**i
        i += 1
        stalled = 0 if removed else stalled + 1
        if stalled >= len(cols):
            # every column is tied across the survivors
            return int(alive.min())
    return int(alive[0])


# -- export ----------------------------------------------------------------


def front_csv(front):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(front.objectives) + list(FREE_NAMES))
    for f, x in zip(front.F, front.X):
        w.writerow([repr(float(v)) for v in f] + [repr(float(v)) for v in x])
    return buf.getvalue()


def read_front_csv(text, problem_hash="", seed=0):
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    m = len(header) - len(FREE_NAMES)
    if m < 1 or tuple(header[m:]) != FREE_NAMES:
        raise ValidationError("front CSV header does not end with the free-coordinate names")
    data = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))
    return ParetoFront(tuple(header[:m]), data[:, :m], data[:, m:], [], problem_hash, seed)


def _resolve_column(col, names):
    if isinstance(col, str) and col in names:
        return list(names).index(col)
    try:
        k = int(col)
    except (TypeError, ValueError):
        raise ValidationError(f"unknown front column {col!r}") from None
    if not 0 <= k < len(names):
        raise ValidationError(f"front column index {k} out of range")
    return k


def front_svg(front, columns, selected=None):
    """Scatter of two objective columns as an SVG string."""
    if columns is None or len(columns) != 2:
        raise ValidationError("exactly two objective columns must be selected")
    a, b = (_resolve_column(c, front.objectives) for c in columns)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "footopt", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.scatter(front.F[:, a], front.F[:, b], s=14, color="tab:blue", label="front")
        if selected is not None:
            ax.scatter([front.F[selected, a]], [front.F[selected, b]], s=60, marker="*",
                       color="tab:red", label="selected")
        ax.set_xlabel(front.objectives[a])
        ax.set_ylabel(front.objectives[b])
        ax.legend(loc="best")
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def export_front(front, csv_path, svg_path=None, columns=None, selected=None):
    if svg_path is not None:
        svg = front_svg(front, columns, selected)
    with open(csv_path, "w") as fh:
        fh.write(front_csv(front))
    if svg_path is not None:
        with open(svg_path, "w") as fh:
            fh.write(svg)


# -- estimator -------------------------------------------------------------


class FootTrajectoryOptimizer(BaseEstimator):
    """Search for a Pareto front of climbable trajectories and pick one.

    After ``fit()``: ``pareto_front_`` (:class:`ParetoFront`), ``selected_``
    (row index), ``selected_polygon_`` and ``result_`` (raw NSGA-II output).
    """

    def __init__(self, policy=None, forces=None, objectives=DEFAULT_PRIORITY, priority=None,
                 alpha=0.9, beta=0.9, pop_size=200, generations=2000,
                 optimal_prepressure=strategies.DEFAULT_OPTIMAL_PREPRESSURE,
                 jitter_threshold=strategies.DEFAULT_JITTER_THRESHOLD, seed=0):
        self.policy = policy
        self.forces = forces
        self.objectives = objectives
        self.priority = priority
        self.alpha = alpha
        self.beta = beta
        self.pop_size = pop_size
        self.generations = generations
        self.optimal_prepressure = optimal_prepressure
        self.jitter_threshold = jitter_threshold
        self.seed = seed

    def problem(self):
        if self.policy is None or self.forces is None:
            raise ValidationError("policy and forces must be set before fitting")
        return TrajectoryProblem(self.policy, self.forces, tuple(self.objectives),
                                 optimal_prepressure=self.optimal_prepressure,
                                 jitter_threshold=self.jitter_threshold,
                                 pop_size=self.pop_size, generations=self.generations)

    def fit(self, X=None, y=None):
        """``X`` optionally seeds the initial population with free-coordinate rows."""
        problem = self.problem()
        cfg = RhsConfig(tuple(self.priority or self.objectives), self.alpha, self.beta)
        self.pareto_front_, self.result_ = optimize(problem, self.seed, initial=X)
        self.selected_ = rhs_select(self.pareto_front_, cfg)
        self.selected_polygon_ = self.pareto_front_.polygons[self.selected_]
        return self

    def transform(self, X=None):
        """Objective values of the front rows."""
        return self.pareto_front_.F

