"""Piecewise-linear region predicates and task definitions.

Regions are immutable predicate trees over state vectors. Every node kind is
piecewise-linear in the state, which is what lets the verifier encode region
membership exactly. Membership evaluation is vectorized: predicates accept a
single state vector or an (N, d) batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Mlp

__all__ = [
    "StateLayout",
    "BoxRegion",
    "Region",
    "Box",
    "ComplementBox",
    "VelocityUnsafeOverapprox",
    "CertSublevel",
    "Union",
    "Intersection",
    "Complement",
    "RwaTask",
    "RegionSamplingError",
    "DanglingCertificateError",
    "under_norm",
    "over_norm",
    "velocity_unsafe_overapprox",
    "region_contains",
    "sample_region",
    "make_docking_task",
    "make_surrogate_task",
    "regions_equal",
    "region_to_dict",
    "region_from_dict",
    "MEAN_MOTION",
    "SPEED_CAP",
]

# Spacecraft constants: mean orbital rate and the base of the speed cap.
MEAN_MOTION = 0.001027
SPEED_CAP = 0.2


class RegionSamplingError(RuntimeError):
    """Rejection sampling exhausted its attempt budget for a region."""


class DanglingCertificateError(ValueError):
    """A sublevel-set node references a certificate network that is absent."""


@dataclass(frozen=True)
class StateLayout:
    """Which state dimensions are positions and which are velocities."""

    pos: tuple[int, ...]
    vel: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.pos) + len(self.vel)


SPACECRAFT_LAYOUT = StateLayout(pos=(0, 1), vel=(2, 3))
SURROGATE_LAYOUT = StateLayout(pos=(0,), vel=(1,))


def _vec(values, dim_name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{dim_name} must be a flat vector, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class BoxRegion:
    """Axis-aligned box, componentwise lower <= upper. Bounds may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", _vec(self.lower, "lower"))
        object.__setattr__(self, "upper", _vec(self.upper, "upper"))
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower/upper dimension mismatch")
        if np.any(self.lower > self.upper):
            raise ValueError("box has lower > upper in some dimension")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, s) -> np.ndarray | bool:
        pts, squeeze = _as_points(s, self.dim)
        inside = np.all((pts >= self.lower) & (pts <= self.upper), axis=1)
        return bool(inside[0]) if squeeze else inside

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if not np.all(np.isfinite(self.lower)) or not np.all(np.isfinite(self.upper)):
            raise ValueError("cannot sample from a box with infinite bounds")
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def equals(self, other: BoxRegion) -> bool:
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)


def _as_points(s, dim: int) -> tuple[np.ndarray, bool]:
    pts = np.asarray(s, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
        squeeze = True
    elif pts.ndim == 2:
        squeeze = False
    else:
        raise ValueError(f"expected state vector or batch, got shape {pts.shape}")
    if pts.shape[1] != dim:
        raise ValueError(f"state dimension {pts.shape[1]} != region dimension {dim}")
    return pts, squeeze


# ---------------------------------------------------------------------------
# Norm approximations
# ---------------------------------------------------------------------------


def _check_directions(n_directions: int) -> int:
    nd = int(n_directions)
    if nd <= 0 or nd % 4 != 0:
        raise ValueError(f"n_directions must be a positive multiple of 4, got {n_directions}")
    return nd


def norm_direction_angles(n_directions: int) -> np.ndarray:
    """Quarter-circle direction angles 2*(i-1)*pi/nd for i = 1 .. nd/4 + 1."""
    nd = _check_directions(n_directions)
    i = np.arange(1, nd // 4 + 2)
    return 2.0 * (i - 1) * np.pi / nd


def under_norm(u1, u2, n_directions: int):
    """Piecewise-linear lower bound on sqrt(u1^2 + u2^2) from nd directions."""
    angles = norm_direction_angles(n_directions)
    a1 = np.abs(np.asarray(u1, dtype=np.float64))
    a2 = np.abs(np.asarray(u2, dtype=np.float64))
    vals = a1[..., None] * np.cos(angles) + a2[..., None] * np.sin(angles)
    out = np.max(vals, axis=-1)
    return float(out) if out.ndim == 0 else out


def over_norm(u1, u2, n_directions: int):
    """Piecewise-linear upper bound: under_norm scaled by 1/cos(pi/nd)."""
    nd = _check_directions(n_directions)
    return under_norm(u1, u2, nd) / math.cos(math.pi / nd)


# ---------------------------------------------------------------------------
# Region predicate tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Box:
    box: BoxRegion


@dataclass(frozen=True, eq=False)
class ComplementBox:
    """Strict exterior of a box (the open complement)."""

    box: BoxRegion


@dataclass(frozen=True, eq=False)
class VelocityUnsafeOverapprox:
    """Overapproximated violation of the distance-dependent speed cap.

    A state is a member when over(vel) >= speed_cap + speed_slope * under(pos),
    which contains every state whose true speed exceeds the cap.
    """

    n_directions: int
    layout: StateLayout
    speed_cap: float = SPEED_CAP
    speed_slope: float = 2.0 * MEAN_MOTION

    def __post_init__(self):
        _check_directions(self.n_directions)
        if not (1 <= len(self.layout.pos) <= 2 and 1 <= len(self.layout.vel) <= 2):
            raise ValueError("speed-cap node supports 1 or 2 position/velocity dimensions")


@dataclass(frozen=True, eq=False)
class CertSublevel:
    """Sublevel set {s : net(s) <= threshold} of a raw certificate network."""

    net: Mlp | None
    threshold: float
    name: str = ""


@dataclass(frozen=True, eq=False)
class Union:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True, eq=False)
class Intersection:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True, eq=False)
class Complement:
    child: "Region"


Region = (
    Box
    | ComplementBox
    | VelocityUnsafeOverapprox
    | CertSublevel
    | Union
    | Intersection
    | Complement
)


def _speed_margin(node: VelocityUnsafeOverapprox, pts: np.ndarray) -> np.ndarray:
    """over(vel) - cap - slope * under(pos); membership is margin >= 0."""
    pos = [pts[:, i] for i in node.layout.pos]
    vel = [pts[:, i] for i in node.layout.vel]
    p2 = pos[1] if len(pos) == 2 else np.zeros_like(pos[0])
    v2 = vel[1] if len(vel) == 2 else np.zeros_like(vel[0])
    over_v = over_norm(vel[0], v2, node.n_directions)
    under_p = under_norm(pos[0], p2, node.n_directions)
    return over_v - node.speed_cap - node.speed_slope * under_p


def velocity_unsafe_overapprox(
    s,
    n_directions: int,
    layout: StateLayout = SPACECRAFT_LAYOUT,
    speed_cap: float = SPEED_CAP,
    speed_slope: float = 2.0 * MEAN_MOTION,
):
    """True when the piecewise-linear speed-cap violation test fires."""
    node = VelocityUnsafeOverapprox(n_directions, layout, speed_cap, speed_slope)
    return region_contains(node, s)


def region_contains(region: Region, s) -> np.ndarray | bool:
    """Evaluate the predicate tree at one state or a batch of states."""
    dim = region_dim(region)
    pts, squeeze = _as_points(s, dim)
    result = _contains(region, pts)
    return bool(result[0]) if squeeze else result


def _contains(region: Region, pts: np.ndarray) -> np.ndarray:
    if isinstance(region, Box):
        return np.all((pts >= region.box.lower) & (pts <= region.box.upper), axis=1)
    if isinstance(region, ComplementBox):
        return np.any((pts < region.box.lower) | (pts > region.box.upper), axis=1)
    if isinstance(region, VelocityUnsafeOverapprox):
        return _speed_margin(region, pts) >= 0.0
    if isinstance(region, CertSublevel):
        if region.net is None:
            raise DanglingCertificateError(
                f"sublevel node {region.name!r} has no certificate network attached"
            )
        return nn.forward(region.net, pts)[:, 0] <= region.threshold
    if isinstance(region, Union):
        out = np.zeros(pts.shape[0], dtype=bool)
        for child in region.children:
            out |= _contains(child, pts)
        return out
    if isinstance(region, Intersection):
        out = np.ones(pts.shape[0], dtype=bool)
        for child in region.children:
            out &= _contains(child, pts)
        return out
    if isinstance(region, Complement):
        return ~_contains(region.child, pts)
    raise TypeError(f"not a region node: {region!r}")


def region_dim(region: Region) -> int:
    """State dimension the region is defined over."""
    if isinstance(region, (Box, ComplementBox)):
        return region.box.dim
    if isinstance(region, VelocityUnsafeOverapprox):
        return region.layout.dim
    if isinstance(region, CertSublevel):
        if region.net is None:
            raise DanglingCertificateError(
                f"sublevel node {region.name!r} has no certificate network attached"
            )
        return region.net.input_size
    if isinstance(region, (Union, Intersection)):
        return region_dim(region.children[0])
    if isinstance(region, Complement):
        return region_dim(region.child)
    raise TypeError(f"not a region node: {region!r}")


def sample_region(
    region: Region,
    bounds: BoxRegion,
    count: int,
    seed,
    max_attempts: int | None = None,
) -> np.ndarray:
    """Uniform rejection samples from region ∩ bounds, seed-deterministic.

    Raises RegionSamplingError when the attempt budget runs out, which signals
    that the region is (nearly) empty inside the given bounds.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    proposal = bounds
    if isinstance(region, Box):
        # Thin boxes (e.g. near-zero-velocity initial sets) would essentially
        # never be hit by rejection from the full domain; uniform sampling of
        # the intersection box is the same distribution with acceptance 1.
        lo = np.maximum(bounds.lower, region.box.lower)
        hi = np.minimum(bounds.upper, region.box.upper)
        if np.any(lo > hi):
            raise RegionSamplingError(
                f"region {region_to_dict(region, inline_networks=False)!r} does not "
                "intersect the sampling bounds"
            )
        proposal = BoxRegion(lo, hi)
    budget = max_attempts if max_attempts is not None else max(200_000, 2_000 * count)
    chunk = max(1024, 4 * count)
    accepted: list[np.ndarray] = []
    have = 0
    used = 0
    while have < count:
        take = min(chunk, budget - used)
        if take <= 0:
            raise RegionSamplingError(
                f"rejection budget ({budget} attempts) exhausted after {have}/{count} "
                f"samples for region {region_to_dict(region, inline_networks=False)!r}"
            )
        pts = proposal.sample(rng, take)
        used += take
        keep = pts[_contains(region, pts)]
        if keep.size:
            accepted.append(keep)
            have += keep.shape[0]
    return np.concatenate(accepted, axis=0)[:count]


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RwaTask:
    """A reach-while-avoid task: initial / goal / unsafe regions in a domain box."""

    initial: Region
    goal: Region
    unsafe: Region
    domain: BoxRegion
    layout: StateLayout
    n_directions: int = 8

    @property
    def dim(self) -> int:
        return self.domain.dim


def _speed_cap_node(layout: StateLayout, n_directions: int, mean_motion: float):
    return VelocityUnsafeOverapprox(
        n_directions=n_directions,
        layout=layout,
        speed_cap=SPEED_CAP,
        speed_slope=2.0 * mean_motion,
    )


def make_docking_task(
    a: float,
    *,
    n_directions: int = 8,
    v_tol: float = 1e-6,
    v_max: float = 0.5,
    goal_half_width: float = 0.35,
    mean_motion: float = MEAN_MOTION,
) -> RwaTask:
    """Spacecraft docking task with start positions in [-a, a]^2.

    Initial states have (near-)zero velocity, modeled as |v| <= v_tol so that
    the initial set is a box rather than a measure-zero slice. The unsafe set
    is the strict exterior of the [-(a+1), a+1]^2 position box together with
    the overapproximated speed-cap violations; the goal is the small position
    square with cap-satisfying velocities.
    """
    if a < 1.0:
        raise ValueError("docking task requires half-width a >= 1")
    layout = SPACECRAFT_LAYOUT
    inf = np.inf
    cap = _speed_cap_node(layout, n_directions, mean_motion)
    initial = Box(BoxRegion([-a, -a, -v_tol, -v_tol], [a, a, v_tol, v_tol]))
    goal = Intersection(
        (
            Box(BoxRegion([-goal_half_width, -goal_half_width, -inf, -inf],
                          [goal_half_width, goal_half_width, inf, inf])),
            Complement(cap),
        )
    )
    outer = a + 1.0
    unsafe = Union(
        (
            ComplementBox(BoxRegion([-outer, -outer, -inf, -inf], [outer, outer, inf, inf])),
            cap,
        )
    )
    domain = BoxRegion([-outer, -outer, -v_max, -v_max], [outer, outer, v_max, v_max])
    return RwaTask(initial, goal, unsafe, domain, layout, n_directions)


def make_surrogate_task(
    a: float,
    *,
    n_directions: int = 8,
    v_tol: float = 1e-6,
    v_max: float = 0.5,
    goal_half_width: float = 0.35,
    mean_motion: float = MEAN_MOTION,
) -> RwaTask:
    """Double-integrator analogue of the docking task on a 2D (p, v) state."""
    if a < 0.5:
        raise ValueError("surrogate task requires half-width a >= 0.5")
    layout = SURROGATE_LAYOUT
    inf = np.inf
    cap = _speed_cap_node(layout, n_directions, mean_motion)
    initial = Box(BoxRegion([-a, -v_tol], [a, v_tol]))
    goal = Intersection(
        (
            Box(BoxRegion([-goal_half_width, -inf], [goal_half_width, inf])),
            Complement(cap),
        )
    )
    outer = a + 1.0
    unsafe = Union(
        (
            ComplementBox(BoxRegion([-outer, -inf], [outer, inf])),
            cap,
        )
    )
    domain = BoxRegion([-outer, -v_max], [outer, v_max])
    return RwaTask(initial, goal, unsafe, domain, layout, n_directions)


# ---------------------------------------------------------------------------
# Structural equality and serialization
# ---------------------------------------------------------------------------


def regions_equal(a: Region, b: Region) -> bool:
    """Structural equality of two region trees (networks compared by value)."""
    if type(a) is not type(b):
        return False
    if isinstance(a, (Box, ComplementBox)):
        return a.box.equals(b.box)
    if isinstance(a, VelocityUnsafeOverapprox):
        return (
            a.n_directions == b.n_directions
            and a.layout == b.layout
            and a.speed_cap == b.speed_cap
            and a.speed_slope == b.speed_slope
        )
    if isinstance(a, CertSublevel):
        if a.threshold != b.threshold:
            return False
        if (a.net is None) != (b.net is None):
            return False
        if a.net is None:
            return a.name == b.name
        return a.net.layer_sizes == b.net.layer_sizes and all(
            np.array_equal(wa, wb) for wa, wb in zip(a.net.weights, b.net.weights)
        ) and all(np.array_equal(ba, bb) for ba, bb in zip(a.net.biases, b.net.biases))
    if isinstance(a, (Union, Intersection)):
        return len(a.children) == len(b.children) and all(
            regions_equal(ca, cb) for ca, cb in zip(a.children, b.children)
        )
    if isinstance(a, Complement):
        return regions_equal(a.child, b.child)
    raise TypeError(f"not a region node: {a!r}")


def _bound_to_json(v: float):
    return None if np.isinf(v) else float(v)


def _bound_from_json(v, sign: float) -> float:
    return sign * np.inf if v is None else float(v)


def _box_to_dict(box: BoxRegion) -> dict:
    return {
        "lower": [_bound_to_json(v) for v in box.lower],
        "upper": [_bound_to_json(v) for v in box.upper],
    }


def _box_from_dict(doc: dict) -> BoxRegion:
    lower = [_bound_from_json(v, -1.0) for v in doc["lower"]]
    upper = [_bound_from_json(v, +1.0) for v in doc["upper"]]
    return BoxRegion(lower, upper)


def region_to_dict(region: Region, inline_networks: bool = True) -> dict:
    """JSON-serializable form of a region tree.

    Sublevel nodes embed their network inline by default; with
    ``inline_networks=False`` only the node name is recorded and loading
    requires a network registry.
    """
    if isinstance(region, Box):
        return {"kind": "box", **_box_to_dict(region.box)}
    if isinstance(region, ComplementBox):
        return {"kind": "complement_box", **_box_to_dict(region.box)}
    if isinstance(region, VelocityUnsafeOverapprox):
        return {
            "kind": "velocity_unsafe_overapprox",
            "n_directions": region.n_directions,
            "pos": list(region.layout.pos),
            "vel": list(region.layout.vel),
            "speed_cap": region.speed_cap,
            "speed_slope": region.speed_slope,
        }
    if isinstance(region, CertSublevel):
        doc = {"kind": "cert_sublevel", "threshold": region.threshold, "name": region.name}
        if inline_networks and region.net is not None:
            doc["network"] = nn.to_dict(region.net)
        return doc
    if isinstance(region, Union):
        return {
            "kind": "union",
            "children": [region_to_dict(c, inline_networks) for c in region.children],
        }
    if isinstance(region, Intersection):
        return {
            "kind": "intersection",
            "children": [region_to_dict(c, inline_networks) for c in region.children],
        }
    if isinstance(region, Complement):
        return {"kind": "complement", "child": region_to_dict(region.child, inline_networks)}
    raise TypeError(f"not a region node: {region!r}")


def region_from_dict(doc: dict, networks: dict[str, Mlp] | None = None) -> Region:
    kind = doc.get("kind")
    if kind == "box":
        return Box(_box_from_dict(doc))
    if kind == "complement_box":
        return ComplementBox(_box_from_dict(doc))
    if kind == "velocity_unsafe_overapprox":
        return VelocityUnsafeOverapprox(
            n_directions=int(doc["n_directions"]),
            layout=StateLayout(tuple(doc["pos"]), tuple(doc["vel"])),
            speed_cap=float(doc["speed_cap"]),
            speed_slope=float(doc["speed_slope"]),
        )
    if kind == "cert_sublevel":
        net = None
        if "network" in doc:
            net = nn.from_dict(doc["network"])
        elif networks is not None:
            net = networks.get(doc.get("name", ""))
        return CertSublevel(net=net, threshold=float(doc["threshold"]), name=doc.get("name", ""))
    if kind == "union":
        return Union(tuple(region_from_dict(c, networks) for c in doc["children"]))
    if kind == "intersection":
        return Intersection(tuple(region_from_dict(c, networks) for c in doc["children"]))
    if kind == "complement":
        return Complement(region_from_dict(doc["child"], networks))
    raise ValueError(f"unknown region kind: {kind!r}")


def task_to_dict(task: RwaTask) -> dict:
    return {
        "initial": region_to_dict(task.initial),
        "goal": region_to_dict(task.goal),
        "unsafe": region_to_dict(task.unsafe),
        "domain": _box_to_dict(task.domain),
        "pos": list(task.layout.pos),
        "vel": list(task.layout.vel),
        "n_directions": task.n_directions,
    }


def task_from_dict(doc: dict, networks: dict[str, Mlp] | None = None) -> RwaTask:
    return RwaTask(
        initial=region_from_dict(doc["initial"], networks),
        goal=region_from_dict(doc["goal"], networks),
        unsafe=region_from_dict(doc["unsafe"], networks),
        domain=_box_from_dict(doc["domain"]),
        layout=StateLayout(tuple(doc["pos"]), tuple(doc["vel"])),
        n_directions=int(doc.get("n_directions", 8)),
    )
