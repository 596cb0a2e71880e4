"""The seven trajectory strategy functionals.

Each ``f_sN`` takes a :class:`StrategyContext`.  The ``*_batch`` helpers do
the same arithmetic row-wise over ``(N, n)`` / ``(N, n, 3)`` arrays and are
what the optimizer calls on a whole population.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import DomainError

DEFAULT_OPTIMAL_PREPRESSURE = 5.85
DEFAULT_JITTER_THRESHOLD = 3.0
DEFAULT_BEND_THRESHOLD = np.pi / 2

STRATEGY_NAMES = ("f_s1", "f_s2", "f_s3", "f_s4", "f_s5", "f_s6", "f_s7")

# Second differences whose spread is below this fraction of the force scale
# are treated as exactly constant.
_FLAT_CURVATURE = 1e-9


@dataclass
class StrategyContext:
    """A trajectory plus the two force predictors evaluated on it.

    ``detachment_model`` and ``prepressure_model`` map a
    :class:`~footopt.geometry.CompositeTrajectory` to a force series of the
    same length.  Predictions are computed once and cached.
    """

    trajectory: object
    detachment_model: object = None
    prepressure_model: object = None
    optimal_prepressure: float = DEFAULT_OPTIMAL_PREPRESSURE
    jitter_threshold: float = DEFAULT_JITTER_THRESHOLD
    bend_threshold: float = DEFAULT_BEND_THRESHOLD
    detachment_series: np.ndarray | None = field(default=None, repr=False)
    prepressure_series: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.optimal_prepressure <= 0:
            raise DomainError("optimal pre-pressure must be positive")
        if self.jitter_threshold <= 0:
            raise DomainError("jitter threshold must be positive")

    @cached_property
    def detachment(self):
        if self.detachment_series is not None:
            return np.asarray(self.detachment_series, dtype=float)
        return np.asarray(self.detachment_model(self.trajectory), dtype=float)

    @cached_property
    def prepressure(self):
        if self.prepressure_series is not None:
            return np.asarray(self.prepressure_series, dtype=float)
        return np.asarray(self.prepressure_model(self.trajectory), dtype=float)


def _nonempty(series):
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        raise DomainError("empty force series")
    return series


# -- array kernels ---------------------------------------------------------


def max_force_batch(F):
    return np.max(F, axis=-1)


def mean_force_batch(F):
    return np.mean(F, axis=-1)


def adhesion_error_batch(Fp, a):
    return np.abs(np.max(Fp, axis=-1) - a)


def lift_height_batch(pos):
    return np.mean(pos[..., 2], axis=-1)


def adhesion_path_length_batch(times, vel, T2):
    """Trapezoidal integral of speed over ``[T2, T_end]``.

    The speed at ``T2`` itself is linearly interpolated from the neighbouring
    samples so the integral starts exactly at the segment boundary.
    """
    times = np.asarray(times, dtype=float)
    speed = np.linalg.norm(vel, axis=-1)
    k = int(np.searchsorted(times, T2, side="right"))
    if k >= len(times):
        raise DomainError("no samples after T2")
    if k == 0:
        t = times
        s = speed
    else:
        w = (T2 - times[k - 1]) / (times[k] - times[k - 1])
        s0 = (1.0 - w) * speed[..., k - 1] + w * speed[..., k]
        t = np.concatenate([[T2], times[k:]])
        s = np.concatenate([s0[..., None], speed[..., k:]], axis=-1)
    return np.trapezoid(s, t, axis=-1)


def _turn_angles(steps):
    """Angles between consecutive non-degenerate step vectors of one path."""
    norms = np.linalg.norm(steps, axis=-1)
    steps = steps[norms > 0]
    norms = norms[norms > 0]
    if len(steps) < 2:
        return np.zeros(0)
    cos = np.einsum("ij,ij->i", steps[:-1], steps[1:]) / (norms[:-1] * norms[1:])
    return np.arccos(np.clip(cos, -1.0, 1.0))


def bending_batch(pos, threshold=DEFAULT_BEND_THRESHOLD):
    """Sum of turn-angle excess over ``threshold`` for each path in ``pos``.

    ``pos`` has shape ``(n, 3)`` or ``(N, n, 3)``.
    """
    pos = np.asarray(pos, dtype=float)
    single = pos.ndim == 2
    pos = pos[None] if single else pos
    steps = np.diff(pos, axis=1)
    norms = np.linalg.norm(steps, axis=-1)
    out = np.zeros(len(pos))
    clean = np.all(norms > 0, axis=1)
    if np.any(clean):
        s = steps[clean]
        nrm = norms[clean]
        cos = np.einsum("nij,nij->ni", s[:, :-1], s[:, 1:]) / (nrm[:, :-1] * nrm[:, 1:])
        ang = np.arccos(np.clip(cos, -1.0, 1.0))
        out[clean] = np.maximum(ang - threshold, 0.0).sum(axis=1)
    for k in np.flatnonzero(~clean):
        out[k] = np.maximum(_turn_angles(steps[k]) - threshold, 0.0).sum()
    return out[0] if single else out


def jitter_batch(F, m=DEFAULT_JITTER_THRESHOLD):
    """Sum of z-score excess over ``m`` of the force series' second differences."""
    F = np.asarray(F, dtype=float)
    if F.shape[-1] < 5:
        raise DomainError("jitter needs at least 5 samples")
    d2 = F[..., 2:] - 2.0 * F[..., 1:-1] + F[..., :-2]
    mu = d2.mean(axis=-1, keepdims=True)
    sigma = d2.std(axis=-1, keepdims=True)
    scale = np.max(np.abs(F), axis=-1, keepdims=True)
    flat = sigma <= _FLAT_CURVATURE * scale
    safe = np.where(flat, 1.0, sigma)
    z = np.abs((d2 - mu) / safe)
    out = np.maximum(z - m, 0.0).sum(axis=-1)
    return np.where(flat[..., 0], 0.0, out)


# -- strategies ------------------------------------------------------------


def f_s1_max_detachment(ctx):
    """Peak predicted detachment force."""
    return float(max_force_batch(_nonempty(ctx.detachment)))


def f_s2_mean_detachment(ctx):
    return float(mean_force_batch(_nonempty(ctx.detachment)))


def f_s3_adhesion_performance(ctx):
    """Distance of the predicted peak pre-pressure from the optimum ``a``."""
    return float(adhesion_error_batch(_nonempty(ctx.prepressure), ctx.optimal_prepressure))


def f_s4_lift_height(ctx):
    return float(lift_height_batch(ctx.trajectory.position))


def f_s5_adhesion_path_length(ctx):
    traj = ctx.trajectory
    if not np.any(traj.segment_of == 3):
        raise DomainError("trajectory has no adhesion-segment samples")
    return float(adhesion_path_length_batch(traj.times, traj.velocity, traj.durations[1]))


def f_s6_bending(ctx):
    return float(bending_batch(ctx.trajectory.position, ctx.bend_threshold))


def f_s7_jitter(ctx):
    return float(jitter_batch(_nonempty(ctx.detachment), ctx.jitter_threshold))


STRATEGIES = {
    "f_s1": f_s1_max_detachment,
    "f_s2": f_s2_mean_detachment,
    "f_s3": f_s3_adhesion_performance,
    "f_s4": f_s4_lift_height,
    "f_s5": f_s5_adhesion_path_length,
    "f_s6": f_s6_bending,
    "f_s7": f_s7_jitter,
}


def evaluate_batch(names, times, pos, vel, Fd, Fp, T2, a=DEFAULT_OPTIMAL_PREPRESSURE,
                   m=DEFAULT_JITTER_THRESHOLD, bend_threshold=DEFAULT_BEND_THRESHOLD):
    """Evaluate the named strategies on a population; returns ``(N, len(names))``."""
    cols = []
    for name in names:
        if name == "f_s1":
            cols.append(max_force_batch(Fd))
        elif name == "f_s2":
            cols.append(mean_force_batch(Fd))
        elif name == "f_s3":
            cols.append(adhesion_error_batch(Fp, a))
        elif name == "f_s4":
            cols.append(lift_height_batch(pos))
        elif name == "f_s5":
            cols.append(adhesion_path_length_batch(times, vel, T2))
        elif name == "f_s6":
            cols.append(bending_batch(pos, bend_threshold))
        elif name == "f_s7":
            cols.append(jitter_batch(Fd, m))
        else:
            raise DomainError(f"unknown strategy {name!r}")
    return np.stack(cols, axis=-1)
