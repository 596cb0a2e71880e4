"""Three-segment quintic Bezier foot trajectories.

A foot trajectory is three fifth-order Bezier curves sharing the control
points P5 and P10 (detachment, swing, adhesion).  The start and end points
are tripled so the foot leaves and lands with zero velocity and
acceleration, and the swing curve's inner points P6..P9 are fixed by the
C2 stitching conditions.  What remains free are P3, P4, P5, P10, P11, P12;
in the planar case that is 12 scalars, ordered

    P3x, P4x, P5x, P10x, P11x, P12x, P3z, P4z, P5z, P10z, P11z, P12z.

Velocities and accelerations are always world-time derivatives (local
Bezier derivatives divided by the segment duration once or twice).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .exceptions import DomainError, ValidationError

DEFAULT_DURATIONS = (1.0 / 3.0, 2.0 / 3.0, 1.0)

FREE_INDICES = (3, 4, 5, 10, 11, 12)
FREE_NAMES = tuple(f"P{i}x" for i in FREE_INDICES) + tuple(f"P{i}z" for i in FREE_INDICES)
N_FREE = 12

TRAJECTORY_CSV_HEADER = ("t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az", "segment")

_RATIO_SNAP = 1e-12


def bernstein(i, n, t):
    """Bernstein basis polynomial ``C(n, i) t^i (1 - t)^(n - i)``."""
    if not 0 <= i <= n:
        raise DomainError(f"basis index {i} outside 0..{n}")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"parameter t={t} outside [0, 1]")
    return comb(n, i) * t**i * (1.0 - t) ** (n - i)


def bernstein_matrix(n, u):
    """Basis values for every degree-``n`` polynomial at the parameters ``u``.

    Returns an array of shape ``(len(u), n + 1)``.
    """
    u = np.asarray(u, dtype=float)[:, None]
    i = np.arange(n + 1)[None, :]
    coef = np.array([comb(n, k) for k in range(n + 1)], dtype=float)[None, :]
    return coef * u**i * (1.0 - u) ** (n - i)


def _check_durations(durations):
    d = np.asarray(durations, dtype=float)
    if d.shape != (3,) or not np.all(np.isfinite(d)):
        raise ValidationError("durations must be three finite segment end times")
    if not (0.0 < d[0] < d[1] < d[2]):
        raise ValidationError(f"durations must satisfy 0 < T1 < T2 < T3, got {tuple(d)}")
    return tuple(float(x) for x in d)


def segment_lengths(durations):
    T1, T2, T3 = durations
    return np.array([T1, T2 - T1, T3 - T2])


def _ratio(num, den):
    r = num / den
    return 1.0 if abs(r - 1.0) < _RATIO_SNAP else r


@dataclass(frozen=True)
class ControlPolygon:
    """The 16 control points P0..P15 together with segment end times."""

    points: np.ndarray
    durations: tuple = DEFAULT_DURATIONS

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.shape != (16, 3):
            raise ValidationError(f"expected 16 3-vectors, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("control points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "durations", _check_durations(self.durations))

    @property
    def free(self):
        """The 12 free coordinates in canonical order."""
        idx = list(FREE_INDICES)
        return np.concatenate([self.points[idx, 0], self.points[idx, 2]])

    @property
    def start(self):
        return self.points[0].copy()

    @property
    def landing(self):
        return self.points[15].copy()

    def to_dict(self):
        return {
            "points": self.points.tolist(),
            "free": dict(zip(FREE_NAMES, self.free.tolist())),
            "durations": {"T1": self.durations[0], "T2": self.durations[1], "T3": self.durations[2]},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        d = data["durations"]
        if isinstance(d, dict):
            d = (d["T1"], d["T2"], d["T3"])
        return cls(np.asarray(data["points"], dtype=float), tuple(d))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, ControlPolygon):
            return NotImplemented
        return self.durations == other.durations and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash((self.points.tobytes(), self.durations))


def complete_points(free, start, landing, durations=DEFAULT_DURATIONS):
    """Vectorised polygon completion.

    ``free`` has shape ``(12,)`` or ``(N, 12)``; returns ``(16, 3)`` or
    ``(N, 16, 3)`` control points.  Free points take the y coordinate of the
    end they belong to (P3..P5 from the start, P10..P12 from the landing).
    """
    free = np.asarray(free, dtype=float)
    single = free.ndim == 1
    free = np.atleast_2d(free)
    if free.shape[1] != N_FREE:
        raise ValidationError(f"expected {N_FREE} free coordinates, got {free.shape[1]}")
    start = np.asarray(start, dtype=float)
    landing = np.asarray(landing, dtype=float)
    if start.shape != (3,) or landing.shape != (3,):
        raise ValidationError("start and landing must be 3-vectors")
    if not (np.all(np.isfinite(free)) and np.all(np.isfinite(start)) and np.all(np.isfinite(landing))):
        raise ValidationError("non-finite input to polygon completion")
    h1, h2, h3 = segment_lengths(_check_durations(durations))
    r1 = _ratio(h2, h1)
    r3 = _ratio(h2, h3)

    N = free.shape[0]
    P = np.empty((N, 16, 3))
    P[:, 0:3] = start
    P[:, 13:16] = landing
    for k, idx in enumerate(FREE_INDICES):
        P[:, idx, 0] = free[:, k]
        P[:, idx, 2] = free[:, k + 6]
        P[:, idx, 1] = start[1] if idx < 8 else landing[1]

    P3, P4, P5 = P[:, 3], P[:, 4], P[:, 5]
    P10, P11, P12 = P[:, 10], P[:, 11], P[:, 12]
    if r1 == 1.0:
        P[:, 6] = 2.0 * P5 - P4
        P[:, 7] = 4.0 * (P5 - P4) + P3
    else:
        P[:, 6] = P5 + r1 * (P5 - P4)
        P[:, 7] = 2.0 * P[:, 6] - P5 + r1**2 * (P5 - 2.0 * P4 + P3)
    if r3 == 1.0:
        P[:, 9] = 2.0 * P10 - P11
        P[:, 8] = 4.0 * (P10 - P11) + P12
    else:
        P[:, 9] = P10 - r3 * (P11 - P10)
        P[:, 8] = 2.0 * P[:, 9] - P10 + r3**2 * (P10 - 2.0 * P11 + P12)
    return P[0] if single else P


def complete_polygon(free, start, landing, durations=DEFAULT_DURATIONS):
    """Build the full :class:`ControlPolygon` from the 12 free coordinates."""
    return ControlPolygon(complete_points(free, start, landing, durations), durations)


@dataclass(frozen=True)
class CompositeTrajectory:
    """Time-sampled position, velocity and acceleration of the stitched curve."""

    times: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    segment_of: np.ndarray
    durations: tuple = field(default=DEFAULT_DURATIONS)

    def __post_init__(self):
        n = len(self.times)
        if n < 3:
            raise ValidationError("a trajectory needs at least 3 samples")
        for name in ("position", "velocity", "acceleration"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n, 3):
                raise ValidationError(f"{name} must have shape ({n}, 3), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        t = np.asarray(self.times, dtype=float)
        if np.any(np.diff(t) <= 0):
            raise ValidationError("times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        seg = np.asarray(self.segment_of, dtype=int)
        seg.setflags(write=False)
        object.__setattr__(self, "segment_of", seg)

    def __len__(self):
        return len(self.times)

    @property
    def features(self):
        """Per-step (position, velocity) 6-vectors."""
        return np.hstack([self.position, self.velocity])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_CSV_HEADER)
        for k in range(len(self)):
            w.writerow(
                [repr(float(self.times[k]))]
                + [repr(float(v)) for v in self.position[k]]
                + [repr(float(v)) for v in self.velocity[k]]
                + [repr(float(v)) for v in self.acceleration[k]]
                + [int(self.segment_of[k])]
            )
        return buf.getvalue()


def segment_index(t, durations):
    """1-based segment for each time; boundaries belong to the earlier segment."""
    T1, T2, _ = durations
    t = np.asarray(t, dtype=float)
    return np.where(t <= T1, 1, np.where(t <= T2, 2, 3))


def _local_parameter(t, seg, durations):
    T1, T2, T3 = durations
    starts = np.array([0.0, T1, T2])[seg - 1]
    lengths = segment_lengths(durations)[seg - 1]
    u = (t - starts) / lengths
    return np.clip(u, 0.0, 1.0), lengths


def _evaluate_at(points, durations, t, seg):
    """Evaluate ``(N, 16, 3)`` polygons at times ``t`` with forced segments."""
    u, h = _local_parameter(t, seg, durations)
    base = (seg - 1) * 5
    idx = base[:, None] + np.arange(6)[None, :]
    ctrl = points[:, idx]  # (N, n, 6, 3)
    d1 = np.diff(ctrl, axis=2)
    d2 = np.diff(d1, axis=2)
    B5 = bernstein_matrix(5, u)
    B4 = bernstein_matrix(4, u)
    B3 = bernstein_matrix(3, u)
    pos = np.einsum("tk,ntkd->ntd", B5, ctrl)
    vel = 5.0 * np.einsum("tk,ntkd->ntd", B4, d1) / h[None, :, None]
    acc = 20.0 * np.einsum("tk,ntkd->ntd", B3, d2) / (h**2)[None, :, None]
    return pos, vel, acc


def evaluate_batch(points, durations, times):
    """Evaluate ``(N, 16, 3)`` control points at ``times``.

    Returns ``(pos, vel, acc)`` each of shape ``(N, len(times), 3)``.
    """
    durations = _check_durations(durations)
    times = np.asarray(times, dtype=float)
    seg = segment_index(times, durations)
    return _evaluate_at(np.asarray(points, dtype=float), durations, times, seg)


def evaluate(polygon, t, segment=None):
    """Position, velocity and acceleration at world time ``t``.

    ``segment`` forces evaluation on a given segment (1-3), which is how the
    one-sided limits at a junction are obtained.
    """
    T3 = polygon.durations[2]
    t = float(t)
    if not np.isfinite(t) or t < 0.0 or t > T3:
        raise DomainError(f"t={t} outside [0, {T3}]")
    if segment is None:
        seg = segment_index(np.array([t]), polygon.durations)
    else:
        if segment not in (1, 2, 3):
            raise DomainError(f"segment must be 1, 2 or 3, got {segment}")
        seg = np.array([segment])
    pos, vel, acc = _evaluate_at(polygon.points[None], polygon.durations, np.array([t]), seg)
    return pos[0, 0], vel[0, 0], acc[0, 0]


def time_grid(durations, n):
    if n < 3:
        raise ValidationError(f"need at least 3 samples, got {n}")
    return np.linspace(0.0, durations[2], int(n))


def sample(polygon, n=200):
    """Sample the trajectory on a uniform ``n``-point grid over ``[0, T3]``."""
    times = time_grid(polygon.durations, n)
    pos, vel, acc = evaluate_batch(polygon.points[None], polygon.durations, times)
    return CompositeTrajectory(
        times, pos[0], vel[0], acc[0], segment_index(times, polygon.durations), polygon.durations
    )


def arc_length(trajectory):
    return float(np.sum(np.linalg.norm(np.diff(trajectory.position, axis=0), axis=1)))
