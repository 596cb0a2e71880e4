"""Foot-structure constraint policy, validator and climbable-set sampler.

A :class:`ConstraintPolicy` turns a foot description plus motion bounds into
a box over the 12 free control-point coordinates and a list of named rules.
Rules are margin functions: positive margin means violated, by that much.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .exceptions import InfeasibleError, PolicyError, SamplerStarvationError, ValidationError
from .geometry import FREE_NAMES, complete_points, evaluate_batch, time_grid
from .kinematics import MotionBounds, paper_bounds
from .strategies import bending_batch

PEEL_FORWARD = "peel-forward"
VERTICAL = "vertical"

# Default foot: PET-backed adhesive, bend radius 6 mm, 50 mm long.
DEFAULT_BEND_RADIUS = 0.006
DEFAULT_ADHESIVE_LENGTH = 0.05
DEFAULT_DETACH_LENGTH = 0.0045
DEFAULT_DROOP = 0.002
DETACH_HEIGHT_FACTOR = 1.5

BENDING_TOLERANCE = 1e-9
EQUALITY_TOLERANCE = 1e-12

_FREE_INDEX = {name: k for k, name in enumerate(FREE_NAMES)}


@dataclass(frozen=True)
class FootSpec:
    adhesive_length: float = DEFAULT_ADHESIVE_LENGTH
    min_bend_radius: float = DEFAULT_BEND_RADIUS
    droop_height: float = DEFAULT_DROOP
    landing_point: tuple = (0.12, 0.0, 0.0)
    detachment_mode: str = PEEL_FORWARD
    detach_length: float | None = None
    detach_height: float | None = None

    def __post_init__(self):
        if self.adhesive_length <= 0:
            raise ValidationError("adhesive_length must be positive")
        if self.min_bend_radius < 0 or self.droop_height < 0:
            raise ValidationError("min_bend_radius and droop_height must be non-negative")
        if self.detachment_mode not in (PEEL_FORWARD, VERTICAL):
            raise ValidationError(f"unknown detachment mode {self.detachment_mode!r}")
        lp = tuple(float(v) for v in self.landing_point)
        if len(lp) != 3:
            raise ValidationError("landing_point must be a 3-vector")
        object.__setattr__(self, "landing_point", lp)

    @property
    def h_d(self):
        """Minimum detachment height."""
        if self.detach_height is not None:
            return float(self.detach_height)
        return DETACH_HEIGHT_FACTOR * self.min_bend_radius

    @property
    def l_d(self):
        """Minimum detachment length along the stride."""
        if self.detach_length is not None:
            return float(self.detach_length)
        return DEFAULT_DETACH_LENGTH if self.detachment_mode == PEEL_FORWARD else 0.0

    def to_dict(self):
        return {
            "adhesive_length": self.adhesive_length,
            "min_bend_radius": self.min_bend_radius,
            "droop_height": self.droop_height,
            "landing_point": list(self.landing_point),
            "detachment_mode": self.detachment_mode,
            "detach_length": self.detach_length,
            "detach_height": self.detach_height,
        }

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown foot field: {sorted(unknown)[0]}")
        return cls(**data)


def mst_q_foot():
    """Vertical-detachment foot of the MST-Q robot (19 mm lift, no peel)."""
    return FootSpec(detachment_mode=VERTICAL, detach_length=0.0, detach_height=0.019)


@dataclass(frozen=True)
class Rule:
    name: str
    fn: object
    kind: str = "shape"
    # Which free coordinates the rule reads: "lift" (P3..P5), "land" (P10..P12) or "both".
    block: str = "both"

    def margin(self, P):
        return self.fn(P)


def _slope_rule(k):
    """Point ``Pk`` lies on or above the line from P0 to P5 (x-z plane)."""

    def fn(P):
        dx = P[:, 5, 0] - P[:, 0, 0]
        dz = P[:, 5, 2] - P[:, 0, 2]
        slope = dz / np.where(dx == 0, np.finfo(float).tiny, dx)
        return slope * (P[:, k, 0] - P[:, 0, 0]) + P[:, 0, 2] - P[:, k, 2]

    return fn


def _less(a, ca, b, cb):
    """Margin for ``P[a, ca] <= P[b, cb]``."""
    return lambda P: P[:, a, ca] - P[:, b, cb]


def _circular_rule(l_f):
    """P10 clears the arc traced by a fully stretched adhesive strip."""

    def fn(P):
        x = P[:, 10, 0] - P[:, 0, 0]
        z = P[:, 10, 2] - P[:, 0, 2]
        inside = np.clip(l_f**2 - (x - l_f) ** 2, 0.0, None)
        return np.where(x < 2.0 * l_f, np.sqrt(inside) - z, -np.inf)

    return fn


def _swing_rule(k, pos_bound):
    """Swing control point ``Pk`` inside the box spanned by P0 and the bound."""

    def fn(P):
        lo = P[:, 0, [0, 2]]
        hi = lo + np.asarray(pos_bound)
        pk = P[:, k, [0, 2]]
        return np.maximum(lo - pk, pk - hi).max(axis=1)

    return fn


def _equal_rule(a, b):
    return lambda P: np.abs(P[:, a, [0, 2]] - P[:, b, [0, 2]]).max(axis=1) - EQUALITY_TOLERANCE


@dataclass(frozen=True)
class ConstraintPolicy:
    bounds: MotionBounds
    foot: FootSpec
    min_detachment: tuple
    complete_detachment: tuple
    var_box: np.ndarray
    shape_rules: tuple
    equalities: tuple = ()
    start_point: tuple = (0.0, 0.0, 0.0)
    durations: tuple = geometry.DEFAULT_DURATIONS
    n_samples: int = 200
    ties: tuple = ()

    @property
    def landing_point(self):
        return np.asarray(self.foot.landing_point)

    @property
    def rules(self):
        return self.shape_rules + self.equalities

    def tie(self, free):
        """Copy equality-tied free coordinates from their source coordinate."""
        free = np.array(free, dtype=float)
        for target, source in self.ties:
            free[..., target] = free[..., source]
        return free

    def complete(self, free):
        free = self.tie(free)
        return complete_points(free, self.start_point, self.landing_point, self.durations)

    def polygon(self, free):
        return geometry.ControlPolygon(self.complete(free), self.durations)

    def summary(self):
        return {
            "min_detachment": list(self.min_detachment),
            "complete_detachment": list(self.complete_detachment),
            "var_box": {n: list(map(float, b)) for n, b in zip(FREE_NAMES, self.var_box)},
            "shape_rules": [r.name for r in self.shape_rules],
            "equalities": [r.name for r in self.equalities],
            "bounds": self.bounds.to_dict(),
            "foot": self.foot.to_dict(),
            "durations": list(self.durations),
        }


def build_policy(foot=None, bounds=None, durations=geometry.DEFAULT_DURATIONS, n_samples=200,
                 start_point=(0.0, 0.0, 0.0)):
    """Instantiate the constraint policy for a foot and motion bounds."""
    foot = FootSpec() if foot is None else foot
    bounds = paper_bounds() if bounds is None else bounds
    start = np.asarray(start_point, dtype=float)
    pxl, pzl = bounds.position_bound
    land = np.asarray(foot.landing_point) - start
    if not (0.0 <= land[0] < pxl and 0.0 <= land[2] < pzl):
        raise PolicyError(f"landing point {tuple(land)} outside position bound {(pxl, pzl)}")
    l_f, h_s = foot.adhesive_length, foot.droop_height
    l_d, h_d = foot.l_d, foot.h_d
    if h_s >= pzl:
        raise PolicyError(f"droop height {h_s} leaves no clearance below bound z {pzl}")
    if h_d >= pzl or l_d >= pxl:
        raise PolicyError(f"minimum detachment point {(l_d, h_d)} outside position bound")

    x0, z0 = start[0], start[2]
    lx, lz = land[0] + x0, land[2] + z0
    box = {
        "P3x": (x0, x0 + pxl), "P4x": (x0, x0 + pxl), "P5x": (x0 + l_d, x0 + pxl),
        "P3z": (z0, z0 + pzl), "P4z": (z0, z0 + pzl), "P5z": (z0 + h_d, z0 + pzl),
        "P11x": (lx, x0 + pxl), "P12x": (lx, x0 + pxl),
        "P11z": (lz, z0 + pzl), "P12z": (lz, z0 + pzl),
    }
    rules = [
        Rule("P3x<P5x", _less(3, 0, 5, 0), block="lift"),
        Rule("P3z>slope(P0,P5)", _slope_rule(3), block="lift"),
        Rule("P3z<P5z", _less(3, 2, 5, 2), block="lift"),
        Rule("P3x<P4x", _less(3, 0, 4, 0), block="lift"),
        Rule("P4x<P5x", _less(4, 0, 5, 0), block="lift"),
        Rule("P4z>slope(P0,P5)", _slope_rule(4), block="lift"),
        Rule("P4z<P5z", _less(4, 2, 5, 2), block="lift"),
        Rule("P5x<P10x", _less(5, 0, 10, 0)),
    ] + [
        Rule(f"P{k} in swing box", _swing_rule(k, (pxl, pzl)), block="lift" if k < 8 else "land")
        for k in (6, 7, 8, 9)
    ]
    equalities = []
    ties = ()
    if foot.detachment_mode == PEEL_FORWARD:
        c_d = (l_f, h_d)
        box["P10x"] = (x0 + max(l_f, l_d), x0 + pxl)
        box["P10z"] = (z0 + max(h_s, h_d), z0 + pzl)
        rules.append(Rule("P10 clears adhesive arc", _circular_rule(l_f), block="land"))
    else:
        c_d = (0.0, h_d)
        for name in ("P10x", "P11x", "P12x"):
            box[name] = (lx, lx)
        for name in ("P10z", "P11z", "P12z"):
            box[name] = (z0 + max(h_s, h_d), z0 + pzl)
        ties = ((FREE_NAMES.index("P11z"), FREE_NAMES.index("P10z")),
                (FREE_NAMES.index("P12z"), FREE_NAMES.index("P10z")))
        equalities = [Rule("P10=P11", _equal_rule(10, 11), "equality", "land"),
                      Rule("P11=P12", _equal_rule(11, 12), "equality", "land")]
    var_box = np.array([box[n] for n in FREE_NAMES], dtype=float)
    for name, (lo, hi) in zip(FREE_NAMES, var_box):
        if lo > hi or (lo == hi and name not in ("P10x", "P11x", "P12x")):
            raise InfeasibleError(f"empty interval for {name}: ({lo}, {hi})")
    return ConstraintPolicy(
        bounds=bounds,
        foot=foot,
        min_detachment=(l_d, h_d),
        complete_detachment=c_d,
        var_box=var_box,
        shape_rules=tuple(rules),
        equalities=tuple(equalities),
        start_point=tuple(start.tolist()),
        durations=tuple(durations),
        n_samples=int(n_samples),
        ties=ties,
    )


def variable_box(policy):
    """The 12 ``(lo, hi)`` intervals for the free coordinates."""
    box = np.asarray(policy.var_box, dtype=float)
    for name, (lo, hi) in zip(FREE_NAMES, box):
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise InfeasibleError(f"empty interval for {name}: ({lo}, {hi})")
    return box.copy()


# -- validation ------------------------------------------------------------


def trajectory_margins(policy, P, times, pos, vel):
    """Named margins for a batch: ``P (N,16,3)``, ``pos``/``vel`` ``(N,n,3)``."""
    x0, _, z0 = policy.start_point
    pxl, pzl = policy.bounds.position_bound
    vxl, vzl = policy.bounds.velocity_bound
    dx = pos[..., 0] - x0
    dz = pos[..., 2] - z0
    l_d, h_d = policy.min_detachment
    # the detachment segment ends exactly at P5, which must lie beyond m_d
    clear = np.maximum(l_d - (P[:, 5, 0] - x0), h_d - (P[:, 5, 2] - z0))
    return {
        "position x upper": dx.max(axis=1) - pxl,
        "position z upper": dz.max(axis=1) - pzl,
        "position x lower": -dx.min(axis=1),
        "position z lower": -dz.min(axis=1),
        "velocity x": np.abs(vel[..., 0]).max(axis=1) - vxl,
        "velocity z": np.abs(vel[..., 2]).max(axis=1) - vzl,
        "detachment clearance": clear,
    }


def margins_batch(policy, P, times, pos, vel, rules=None):
    """All margins (trajectory rules then shape rules) as ``{name: (N,)}``."""
    out = trajectory_margins(policy, P, times, pos, vel)
    for rule in policy.rules if rules is None else rules:
        out[rule.name] = rule.margin(P)
    return out


@dataclass
class Violation:
    rule: str
    margin: float


@dataclass
class ViolationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok

    def names(self):
        return [v.rule for v in self.violations]


def validate(polygon, trajectory, policy, rules=None):
    """Check one sampled polygon against every rule of the policy."""
    P = polygon.points[None]
    m = margins_batch(policy, P, trajectory.times, trajectory.position[None], trajectory.velocity[None], rules)
    return ViolationReport([Violation(k, float(v[0])) for k, v in m.items() if v[0] > 0])


def total_violation(margins):
    return np.sum([np.maximum(v, 0.0) for v in margins.values()], axis=0)


def evaluate_free(policy, free):
    """Complete and sample free vectors; returns ``(P, times, pos, vel, acc)``."""
    P = policy.complete(np.atleast_2d(free))
    times = time_grid(policy.durations, policy.n_samples)
    pos, vel, acc = evaluate_batch(P, policy.durations, times)
    return P, times, pos, vel, acc


def feasibility_batch(policy, free):
    """Total violation (rules plus bending) for each row of ``free``."""
    P, times, pos, vel, _ = evaluate_free(policy, free)
    cv = total_violation(margins_batch(policy, P, times, pos, vel))
    bend = bending_batch(pos)
    return cv + np.where(bend > BENDING_TOLERANCE, bend, 0.0)


# -- sampling --------------------------------------------------------------


_LIFT = slice(0, 3), slice(6, 9)
_LAND = slice(3, 6), slice(9, 12)


def _block_ok(policy, free, block):
    """Necessary conditions that read only one block of free coordinates.

    Segment 1 depends on P0..P5 alone and segment 3 on P10..P15 alone, so the
    trajectory rules restricted to those samples are block-local too.
    """
    P, times, pos, vel, _ = evaluate_free(policy, free)
    T1, T2 = policy.durations[0], policy.durations[1]
    mask = times <= T1 if block == "lift" else times > T2
    m = trajectory_margins(policy, P, times[mask], pos[:, mask], vel[:, mask])
    if block == "land":
        del m["detachment clearance"]
    rules = [r for r in policy.rules if r.block == block]
    m.update({r.name: r.margin(P) for r in rules})
    box = policy.var_box
    inside = np.all((free >= box[:, 0]) & (free <= box[:, 1]), axis=1)
    return inside & (total_violation(m) == 0.0)


def _ordered_lift_proposal(box, rng, n):
    """Uniform draws restricted to P3x < P4x < P5x and P3z, P4z < P5z.

    These orderings are hard rules of the policy, so proposing inside them
    (sorted uniforms on the shared interval) changes nothing about the target
    distribution; draws that leave a coordinate's own interval are rejected
    later by the box check.
    """
    lo, hi = box[:, 0], box[:, 1]
    free = lo + rng.random((n, lo.size)) * (hi - lo)
    # a degenerate interval has zero measure on the shared range, so fall back
    # to the plain box draw for that axis
    if np.all(hi[0:3] > lo[0:3]):
        xl, xh = lo[0:3].min(), hi[0:3].max()
        free[:, 0:3] = np.sort(xl + rng.random((n, 3)) * (xh - xl), axis=1)
    if np.all(hi[6:9] > lo[6:9]):
        zl, zh = lo[6:9].min(), hi[6:9].max()
        z = np.sort(zl + rng.random((n, 3)) * (zh - zl), axis=1)
        swap = rng.random(n) < 0.5
        z[swap, 0], z[swap, 1] = z[swap, 1], z[swap, 0].copy()
        free[:, 6:9] = z
    return free


def sample_climbable(policy, count, seed=0, batch=4096, max_draws=1_000_000, min_acceptance=1e-3):
    """Rejection-sample ``count`` climbable polygons uniformly from the box.

    Each raw draw is uniform in the box, restricted to the hard ordering
    rules on P3..P5 (see :func:`_ordered_lift_proposal`).  Its lift half (P3..P5) and landing
    half (P10..P12) are screened separately against rules that read only that
    half; survivors are paired across draws and the pair is fully validated.
    Halves are independent under a product-uniform proposal, so the accepted
    set is still uniform over the climbable region.

    Raises :class:`SamplerStarvationError` when fewer than ``min_acceptance``
    of the raw draws are accepted by the time ``max_draws`` is reached.
    """
    if count < 1:
        raise ValidationError("count must be at least 1")
    box = variable_box(policy)
    rng = np.random.default_rng(seed)
    lift_pool = np.empty((0, 6))
    land_pool = np.empty((0, 6))
    accepted = []
    draws = 0
    while len(accepted) < count:
        if draws >= max_draws:
            rate = len(accepted) / draws
            if rate < min_acceptance:
                raise SamplerStarvationError(
                    f"acceptance rate {rate:.2e} below {min_acceptance:.0e} after {draws} draws"
                )
            max_draws += max_draws
        free = policy.tie(_ordered_lift_proposal(box, rng, batch))
        draws += batch
        lift_ok = _block_ok(policy, free, "lift")
        land_ok = _block_ok(policy, free, "land")
        lift_pool = np.vstack([lift_pool, np.hstack([free[lift_ok][:, s] for s in _LIFT])])
        land_pool = np.vstack([land_pool, np.hstack([free[land_ok][:, s] for s in _LAND])])
        k = min(len(lift_pool), len(land_pool))
        if k == 0:
            continue
        cand = np.empty((k, 12))
        cand[:, 0:3], cand[:, 6:9] = lift_pool[:k, :3], lift_pool[:k, 3:]
        cand[:, 3:6], cand[:, 9:12] = land_pool[:k, :3], land_pool[:k, 3:]
        lift_pool, land_pool = lift_pool[k:], land_pool[k:]
        ok = feasibility_batch(policy, cand) == 0.0
        accepted.extend(cand[ok])
    return [policy.polygon(f) for f in accepted[:count]]


def write_jsonl(polygons, path):
    with open(path, "w") as fh:
        for poly in polygons:
            fh.write(poly.to_json() + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [geometry.ControlPolygon.from_json(line) for line in fh if line.strip()]


def policy_from_config(cfg, bounds=None):
    foot = FootSpec.from_dict(cfg.get("foot", {}))
    return build_policy(
        foot,
        bounds,
        tuple(cfg.get("durations", geometry.DEFAULT_DURATIONS)),
        int(cfg.get("n_samples", 200)),
    )


def dump_policy(policy):
    return json.dumps(policy.summary(), sort_keys=True, indent=2)
