"""3-DOF leg kinematics and the maximum foot position / velocity bounds.

The leg is a yaw joint about z at the hip followed by two pitch joints.  With
all angles zero the three links lie along +x.  Positive pitch raises the
foot (+z).  Every position is expressed in the trajectory frame whose origin
is the foot's stance point, so ``hip_offset`` is the hip seen from the foot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .exceptions import InfeasibleError, ReachabilityError, ValidationError

# Default safety factors for the MST-M3F position and velocity bounds.
DEFAULT_POSITION_SAFETY = 0.85
DEFAULT_VELOCITY_SAFETY = 0.80


@dataclass(frozen=True)
class LegModel:
    link_lengths: tuple
    joint_limits: tuple
    joint_velocity_limits: tuple
    hip_offset: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        links = np.asarray(self.link_lengths, dtype=float)
        lim = np.asarray(self.joint_limits, dtype=float)
        vlim = np.asarray(self.joint_velocity_limits, dtype=float)
        hip = np.asarray(self.hip_offset, dtype=float)
        if links.shape != (3,) or np.any(links <= 0) or not np.all(np.isfinite(links)):
            raise ValidationError("link_lengths must be three positive lengths")
        for name, arr in (("joint_limits", lim), ("joint_velocity_limits", vlim)):
            if arr.shape != (3, 2) or not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} must be three finite (min, max) pairs")
            if np.any(arr[:, 0] > arr[:, 1]):
                raise ValidationError(f"{name}: min must not exceed max")
        if hip.shape != (3,) or not np.all(np.isfinite(hip)):
            raise ValidationError("hip_offset must be a finite 3-vector")
        object.__setattr__(self, "link_lengths", tuple(links.tolist()))
        object.__setattr__(self, "joint_limits", tuple(map(tuple, lim.tolist())))
        object.__setattr__(self, "joint_velocity_limits", tuple(map(tuple, vlim.tolist())))
        object.__setattr__(self, "hip_offset", tuple(hip.tolist()))

    @property
    def limits(self):
        return np.asarray(self.joint_limits)

    @property
    def velocity_limits(self):
        return np.asarray(self.joint_velocity_limits)

    def to_dict(self):
        return {
            "link_lengths": list(self.link_lengths),
            "joint_limits": [list(p) for p in self.joint_limits],
            "joint_velocity_limits": [list(p) for p in self.joint_velocity_limits],
            "hip_offset": list(self.hip_offset),
        }

    @classmethod
    def from_dict(cls, data):
        missing = [k for k in ("link_lengths", "joint_limits", "joint_velocity_limits") if k not in data]
        if missing:
            raise ValidationError(f"leg model missing field: {missing[0]}")
        return cls(
            tuple(data["link_lengths"]),
            tuple(map(tuple, data["joint_limits"])),
            tuple(map(tuple, data["joint_velocity_limits"])),
            tuple(data.get("hip_offset", (0.0, 0.0, 0.0))),
        )


def default_leg():
    """Stand-in geometry whose workspace covers the stride (0,0,0) -> (0.12,0,0)."""
    return LegModel(
        link_lengths=(0.06, 0.12, 0.14),
        joint_limits=((0.95, 2.15), (-1.9, -1.25), (1.7, 2.6)),
        joint_velocity_limits=((-4.0, 4.0), (-4.0, 4.0), (-4.0, 4.0)),
        hip_offset=(0.06, -0.16, 0.06),
    )


@dataclass(frozen=True)
class MotionBounds:
    """Safety-scaled foot position and velocity bounds in the x-z plane."""

    position_bound: tuple
    velocity_bound: tuple
    position_safety: float = DEFAULT_POSITION_SAFETY
    velocity_safety: float = DEFAULT_VELOCITY_SAFETY
    raw_position: tuple | None = None
    raw_velocity: tuple | None = None

    def __post_init__(self):
        for s in (self.position_safety, self.velocity_safety):
            if not 0.0 < s <= 1.0:
                raise ValidationError(f"safety factor {s} outside (0, 1]")
        if any(v <= 0 for v in self.position_bound):
            raise ValidationError("position bound components must be positive")
        if any(v < 0 for v in self.velocity_bound):
            raise ValidationError("velocity bound components must be non-negative")

    @classmethod
    def from_raw(cls, raw_position, raw_velocity, s_p=DEFAULT_POSITION_SAFETY, s_v=DEFAULT_VELOCITY_SAFETY):
        rp = tuple(float(v) for v in raw_position)
        rv = tuple(float(v) for v in raw_velocity)
        return cls(
            scale_bound(rp, s_p), scale_bound(rv, s_v), float(s_p), float(s_v), rp, rv
        )

    def to_dict(self):
        return {
            "position_bound": list(self.position_bound),
            "velocity_bound": list(self.velocity_bound),
            "position_safety": self.position_safety,
            "velocity_safety": self.velocity_safety,
            "raw_position": None if self.raw_position is None else list(self.raw_position),
            "raw_velocity": None if self.raw_velocity is None else list(self.raw_velocity),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            tuple(data["position_bound"]),
            tuple(data["velocity_bound"]),
            data.get("position_safety", DEFAULT_POSITION_SAFETY),
            data.get("velocity_safety", DEFAULT_VELOCITY_SAFETY),
            None if data.get("raw_position") is None else tuple(data["raw_position"]),
            None if data.get("raw_velocity") is None else tuple(data["raw_velocity"]),
        )


def paper_bounds():
    """The MST-M3F bounds as published (already safety-scaled and rounded)."""
    return MotionBounds((0.160, 0.064), (0.80, 0.77), 0.85, 0.80, (0.189, 0.074), (1.012, 0.961))


def scale_bound(raw, factor):
    if not 0.0 < factor <= 1.0:
        raise ValidationError(f"safety factor {factor} outside (0, 1]")
    return tuple(float(v) * factor for v in raw)


def forward_kinematics(model, theta):
    """Foot position for joint angles ``theta`` (shape ``(3,)`` or ``(N, 3)``)."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValidationError("joint angles must be finite")
    l1, l2, l3 = model.link_lengths
    t1, t2, t3 = theta[..., 0], theta[..., 1], theta[..., 2]
    r = l1 + l2 * np.cos(t2) + l3 * np.cos(t2 + t3)
    h = l2 * np.sin(t2) + l3 * np.sin(t2 + t3)
    return np.stack([r * np.cos(t1), r * np.sin(t1), h], axis=-1) + np.asarray(model.hip_offset)


def jacobian(model, theta):
    """Foot linear-velocity Jacobian, shape ``(3, 3)`` or ``(N, 3, 3)``."""
    theta = np.asarray(theta, dtype=float)
    l1, l2, l3 = model.link_lengths
    t1, t2, t3 = theta[..., 0], theta[..., 1], theta[..., 2]
    s1, c1 = np.sin(t1), np.cos(t1)
    s2, c2 = np.sin(t2), np.cos(t2)
    s23, c23 = np.sin(t2 + t3), np.cos(t2 + t3)
    r = l1 + l2 * c2 + l3 * c23
    dr2 = -l2 * s2 - l3 * s23
    dr3 = -l3 * s23
    dh2 = l2 * c2 + l3 * c23
    dh3 = l3 * c23
    zero = np.zeros_like(r)
    J = np.stack(
        [
            np.stack([-r * s1, c1 * dr2, c1 * dr3], axis=-1),
            np.stack([r * c1, s1 * dr2, s1 * dr3], axis=-1),
            np.stack([zero, dh2, dh3], axis=-1),
        ],
        axis=-2,
    )
    return J


def inverse_kinematics(model, p):
    """Joint angles placing the foot at ``p``; knee-down branch (theta3 >= 0).

    Raises :class:`ReachabilityError` carrying the distance from the target to
    the nearest reachable point when ``p`` lies outside the workspace.
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValidationError("target must be a finite 3-vector")
    l1, l2, l3 = model.link_lengths
    q = p - np.asarray(model.hip_offset)
    rho = np.hypot(q[0], q[1])
    t1 = np.arctan2(q[1], q[0])
    r = rho - l1
    h = q[2]
    d = np.hypot(r, h)
    outer, inner = l2 + l3, abs(l2 - l3)
    tol = 1e-12 * outer
    if d > outer + tol:
        raise ReachabilityError(f"target {d:.6g} m from the knee pivot exceeds reach {outer:.6g} m", d - outer)
    if d < inner - tol:
        raise ReachabilityError(f"target {d:.6g} m from the knee pivot inside dead zone {inner:.6g} m", inner - d)
    cos3 = np.clip((d * d - l2 * l2 - l3 * l3) / (2.0 * l2 * l3), -1.0, 1.0)
    t3 = np.arccos(cos3)
    t2 = np.arctan2(h, r) - np.arctan2(l3 * np.sin(t3), l2 + l3 * np.cos(t3))
    return np.array([t1, t2, t3])


# -- bound solving --------------------------------------------------------


def _feasibility(model, theta):
    """Violation of ``z <= x`` at the foot (0 when satisfied)."""
    p = forward_kinematics(model, theta)
    return np.maximum(p[..., 2] - p[..., 0], 0.0)


def _differential_evolution(objective, violation, lo, hi, rng, pop_size=64, iterations=500, F=0.6, CR=0.9):
    """Minimise ``objective`` over the box with Deb's feasibility rules.

    Both callables take an ``(N, d)`` array and return ``(N,)``.
    """
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    d = lo.size
    width = hi - lo
    pop = lo + rng.random((pop_size, d)) * width
    f = objective(pop)
    g = violation(pop)
    for _ in range(iterations):
        a, b, c = (rng.integers(0, pop_size, pop_size) for _ in range(3))
        mutant = np.clip(pop[a] + F * (pop[b] - pop[c]), lo, hi)
        cross = rng.random((pop_size, d)) < CR
        cross[np.arange(pop_size), rng.integers(0, d, pop_size)] = True
        trial = np.where(cross, mutant, pop)
        ft = objective(trial)
        gt = violation(trial)
        better = np.where(
            (gt == 0) & (g == 0), ft <= f, np.where((gt == 0) | (g == 0), gt == 0, gt <= g)
        )
        pop[better], f[better], g[better] = trial[better], ft[better], gt[better]
    feasible = g == 0
    if not np.any(feasible):
        return None, None
    k = np.flatnonzero(feasible)[np.argmin(f[feasible])]
    return pop[k].copy(), float(f[k])


def _polish(objective, violation, x0, f0, lo, hi):
    """SLSQP refinement from the population best; kept only if it improves."""
    free = hi > lo
    if not np.any(free):
        return x0, f0

    def expand(y):
        x = x0.copy()
        x[free] = y
        return x

    res = minimize(
        lambda y: float(objective(expand(y)[None])[0]),
        x0[free],
        method="SLSQP",
        bounds=list(zip(lo[free], hi[free])),
        constraints=[{"type": "ineq", "fun": lambda y: -violation.signed(expand(y)[None])[0]}],
        options={"ftol": 1e-14, "maxiter": 200},
    )
    x = np.clip(expand(res.x), lo, hi)
    fx = float(objective(x[None])[0])
    if violation(x[None])[0] == 0 and fx < f0:
        return x, fx
    return x0, f0


class _ZLeqX:
    def __init__(self, model):
        self.model = model

    def __call__(self, theta):
        return _feasibility(self.model, theta)

    def signed(self, theta):
        p = forward_kinematics(self.model, theta)
        return p[..., 2] - p[..., 0]


def _solve_max(model, score, lo, hi, seed, pop_size, iterations):
    violation = _ZLeqX(model)
    rng = np.random.default_rng(seed)
    x, f = _differential_evolution(lambda t: -score(t), violation, lo, hi, rng, pop_size, iterations)
    if x is None:
        raise InfeasibleError("no joint configuration satisfies z <= x within the joint limits")
    x, f = _polish(lambda t: -score(t), violation, x, f, lo, hi)
    return x, -f


def solve_position_bound(model, s_p=DEFAULT_POSITION_SAFETY, seed=0, pop_size=64, iterations=500):
    """Largest forward reach (x) and lift (z) over the joint box with ``z <= x``.

    Each component is maximised separately.  Returns ``(raw, scaled, thetas)``
    where ``thetas`` holds the maximising joint angles for x and for z.
    """
    lim = model.limits
    tx, x = _solve_max(model, lambda t: forward_kinematics(model, t)[..., 0], lim[:, 0], lim[:, 1], seed, pop_size, iterations)
    tz, z = _solve_max(model, lambda t: forward_kinematics(model, t)[..., 2], lim[:, 0], lim[:, 1], seed + 1, pop_size, iterations)
    raw = (float(x), float(z))
    return raw, scale_bound(raw, s_p), (tx, tz)


def max_abs_rate(J_rows, rate_limits):
    """Largest ``|J_row . theta_dot|`` over the joint-rate box, per row.

    The product is linear in the rates, so the optimum sits at a box corner
    chosen row-by-row from the sign of each Jacobian entry.
    """
    lo = rate_limits[:, 0]
    hi = rate_limits[:, 1]
    a = J_rows * lo
    b = J_rows * hi
    upper = np.maximum(a, b).sum(axis=-1)
    lower = np.minimum(a, b).sum(axis=-1)
    return np.maximum(upper, -lower)


def solve_velocity_bound(model, s_v=DEFAULT_VELOCITY_SAFETY, seed=0, pop_size=64, iterations=500):
    """Largest foot speed along x and along z over joint and rate boxes.

    Returns ``(raw, scaled, thetas)`` like :func:`solve_position_bound`.
    """
    lim = model.limits
    vlim = model.velocity_limits

    def speed(axis):
        return lambda t: max_abs_rate(jacobian(model, t)[..., axis, :], vlim)

    tx, vx = _solve_max(model, speed(0), lim[:, 0], lim[:, 1], seed + 2, pop_size, iterations)
    tz, vz = _solve_max(model, speed(2), lim[:, 0], lim[:, 1], seed + 3, pop_size, iterations)
    raw = (float(vx), float(vz))
    return raw, scale_bound(raw, s_v), (tx, tz)


def solve_bounds(model, s_p=DEFAULT_POSITION_SAFETY, s_v=DEFAULT_VELOCITY_SAFETY, seed=0, pop_size=64, iterations=500):
    """Both bounds as a :class:`MotionBounds`."""
    raw_p, _, _ = solve_position_bound(model, s_p, seed, pop_size, iterations)
    raw_v, _, _ = solve_velocity_bound(model, s_v, seed, pop_size, iterations)
    return MotionBounds.from_raw(raw_p, raw_v, s_p, s_v)


def load_leg(path):
    with open(path) as fh:
        return LegModel.from_dict(json.load(fh))
