"""Reference gait trajectories the optimized one is compared against."""

from __future__ import annotations

import numpy as np

from .constraints import sample_climbable
from .geometry import CompositeTrajectory, sample, segment_index, time_grid

BASELINE_NAMES = ("Polynomial", "Cycloidal", "Random bezier")


def _assemble(times, durations, x, z, vx, vz, ax, az, start, y):
    n = len(times)
    pos = np.column_stack([start[0] + x, np.full(n, y), start[2] + z])
    vel = np.column_stack([vx, np.zeros(n), vz])
    acc = np.column_stack([ax, np.zeros(n), az])
    return CompositeTrajectory(times, pos, vel, acc, segment_index(times, durations), tuple(durations))


def cycloidal(stride, height, durations, n=200, start=(0.0, 0.0, 0.0)):
    """Cycloid in x with a raised-cosine lift of the same period."""
    T = durations[2]
    t = time_grid(durations, n)
    phi = 2.0 * np.pi * t / T
    w = 2.0 * np.pi / T
    x = stride * (phi - np.sin(phi)) / (2.0 * np.pi)
    z = height * (1.0 - np.cos(phi)) / 2.0
    vx = stride * (1.0 - np.cos(phi)) / T
    vz = height * np.sin(phi) * w / 2.0
    ax = stride * np.sin(phi) * w / T
    az = height * np.cos(phi) * w * w / 2.0
    return _assemble(t, durations, x, z, vx, vz, ax, az, start, start[1])


def polynomial(stride, height, durations, n=200, start=(0.0, 0.0, 0.0)):
    """Degree-6 lift ``64 h s^3 (1-s)^3`` with a quintic smooth-step stride.

    Both have zero velocity and acceleration at the ends; the lift peaks at
    exactly ``height`` mid-stride.
    """
    T = durations[2]
    t = time_grid(durations, n)
    s = t / T
    x = stride * (10 * s**3 - 15 * s**4 + 6 * s**5)
    vx = stride * 30 * s**2 * (1 - s) ** 2 / T
    ax = stride * 60 * s * (1 - s) * (1 - 2 * s) / T**2
    z = 64 * height * s**3 * (1 - s) ** 3
    vz = 64 * height * 3 * s**2 * (1 - s) ** 2 * (1 - 2 * s) / T
    az = 64 * height * 6 * s * (1 - s) * ((1 - 2 * s) ** 2 - s * (1 - s)) / T**2
    return _assemble(t, durations, x, z, vx, vz, ax, az, start, start[1])


def random_bezier(policy, count=1, seed=0, n=200):
    """Trajectories of uniformly sampled climbable polygons."""
    return [sample(p, n) for p in sample_climbable(policy, count, seed=seed)]


def matched_baselines(reference, policy, n=200, seed=0, random_count=1):
    """Baselines sharing stride and lift height with ``reference``."""
    pos = reference.position
    start = tuple(pos[0])
    stride = float(pos[-1, 0] - pos[0, 0])
    height = float(pos[:, 2].max() - pos[0, 2])
    d = reference.durations
    return {
        "Polynomial": [polynomial(stride, height, d, n, start)],
        "Cycloidal": [cycloidal(stride, height, d, n, start)],
        "Random bezier": random_bezier(policy, random_count, seed, n),
    }
