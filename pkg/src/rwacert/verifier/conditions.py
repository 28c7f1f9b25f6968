"""Certificate condition checks.

Each check compiles the relevant networks, clipped controller, affine
dynamics, and region predicates into one expression graph, states the
condition as an and/or tree over graph outputs, and runs branch-and-bound.
Counterexamples are re-checked against an independent semantic evaluator
built from the plain region/dynamics/network code before being reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import geometry, nn
from ..certificate import FrwaCertificate, RwaCertificate, evaluate, evaluate_raw
from ..dynamics import Plant
from ..geometry import (
    Box,
    BoxRegion,
    CertSublevel,
    Complement,
    ComplementBox,
    DanglingCertificateError,
    Intersection,
    Region,
    RwaTask,
    StateLayout,
    Union,
    VelocityUnsafeOverapprox,
)
from .bnb import And, Atom, BnbConfig, Or, Query, Verdict, branch_and_bound, negate
from .graph import GraphBuilder

__all__ = [
    "check_condition1",
    "check_condition2_filtered",
    "check_condition2_plain",
    "check_condition3",
    "check_safety_direct",
    "region_query",
]


# ---------------------------------------------------------------------------
# Encoding helpers
# ---------------------------------------------------------------------------


class _Encoder:
    """Encodes region predicates at designated state nodes, memoizing shared
    subgraphs (coordinates, speed margins, sublevel networks)."""

    def __init__(self, builder: GraphBuilder):
        self.b = builder
        self._coord: dict[tuple[int, int], str] = {}
        self._margin: dict[tuple[int, int], str] = {}
        self._sublevel: dict[tuple[int, int], str] = {}
        self._n = 0

    def _fresh(self, stem: str) -> str:
        self._n += 1
        return f"{stem}_{self._n}"

    def coord(self, point: int, i: int) -> str:
        key = (point, i)
        if key not in self._coord:
            name = self._fresh(f"p{point}c{i}")
            self.b.add_output(name, self.b.select(point, [i]))
            self._coord[key] = name
        return self._coord[key]

    def norm_pair(self, point: int, idx: tuple[int, ...], n_directions: int) -> tuple[int, int]:
        """Graph nodes for (under, over) of the euclidean norm of selected dims."""
        sel = self.b.select(point, idx)
        mag = self.b.abs(sel)
        angles = geometry.norm_direction_angles(n_directions)
        cols = [np.cos(angles)] if len(idx) == 1 else [np.cos(angles), np.sin(angles)]
        dir_mat = np.stack(cols, axis=1)
        dirs = self.b.affine([(mag, dir_mat)])
        under = self.b.max_reduce(dirs)
        over = self.b.scale(under, 1.0 / math.cos(math.pi / n_directions))
        return under, over

    def speed_margin(self, point: int, node: VelocityUnsafeOverapprox) -> str:
        """over(vel) - cap - slope * under(pos); membership is margin >= 0."""
        key = (point, id(node))
        if key not in self._margin:
            under_p, _ = self.norm_pair(point, node.layout.pos, node.n_directions)
            _, over_v = self.norm_pair(point, node.layout.vel, node.n_directions)
            g = self.b.affine(
                [(over_v, np.eye(1)), (under_p, -node.speed_slope * np.eye(1))],
                [-node.speed_cap],
            )
            name = self._fresh(f"speed{point}")
            self.b.add_output(name, g)
            self._margin[key] = name
        return self._margin[key]

    def sublevel_value(self, point: int, node: CertSublevel) -> str:
        if node.net is None:
            raise DanglingCertificateError(
                f"sublevel node {node.name!r} has no certificate network attached"
            )
        key = (point, id(node))
        if key not in self._sublevel:
            name = self._fresh(f"sub{point}")
            self.b.add_output(name, self.b.mlp(point, node.net))
            self._sublevel[key] = name
        return self._sublevel[key]

    def region(self, region: Region, point: int):
        """Condition tree equivalent to region membership at the point node."""
        if isinstance(region, Box):
            atoms = []
            for i in range(region.box.dim):
                lo, hi = region.box.lower[i], region.box.upper[i]
                if np.isfinite(lo):
                    atoms.append(Atom(self.coord(point, i), "ge", float(lo)))
                if np.isfinite(hi):
                    atoms.append(Atom(self.coord(point, i), "le", float(hi)))
            return And(tuple(atoms)) if atoms else And(())
        if isinstance(region, ComplementBox):
            atoms = []
            for i in range(region.box.dim):
                lo, hi = region.box.lower[i], region.box.upper[i]
                if np.isfinite(lo):
                    atoms.append(Atom(self.coord(point, i), "le", float(lo), strict=True))
                if np.isfinite(hi):
                    atoms.append(Atom(self.coord(point, i), "ge", float(hi), strict=True))
            return Or(tuple(atoms))
        if isinstance(region, VelocityUnsafeOverapprox):
            return Atom(self.speed_margin(point, region), "ge", 0.0)
        if isinstance(region, CertSublevel):
            return Atom(self.sublevel_value(point, region), "le", float(region.threshold))
        if isinstance(region, Union):
            return Or(tuple(self.region(c, point) for c in region.children))
        if isinstance(region, Intersection):
            return And(tuple(self.region(c, point) for c in region.children))
        if isinstance(region, Complement):
            return negate(self.region(region.child, point))
        raise TypeError(f"not a region node: {region!r}")


def _box_array(box: BoxRegion) -> np.ndarray:
    return np.stack([box.lower, box.upper], axis=1)


def _initial_box(task: RwaTask) -> BoxRegion:
    if not isinstance(task.initial, Box):
        raise ValueError("condition 1 expects a box-shaped initial set")
    return task.initial.box


def _closed_loop(builder: GraphBuilder, controller, plant: Plant) -> int:
    """Graph node for the successor state x' = A x + B clip(pi(x)) + c."""
    u_raw = builder.mlp(builder.input, controller)
    u = builder.clip(u_raw, -plant.control_limit, plant.control_limit)
    return builder.affine(
        [(builder.input, plant.step.a_matrix), (u, plant.step.b_matrix)],
        plant.step.c_vector,
    )


def region_query(region: Region, domain: BoxRegion, layout: StateLayout, cfg: BnbConfig, name="") -> Query:
    """Query asserting that every point of the domain box lies in the region.

    Violations of this query are exactly the points of domain \\ region, which
    is how the compositional sampler asks the verifier for annulus points.
    """
    builder = GraphBuilder(domain.dim)
    enc = _Encoder(builder)
    root = enc.region(region, builder.input)
    return Query(builder.build(), root, _box_array(domain), cfg.min_widths_for(layout), name)


# ---------------------------------------------------------------------------
# Condition checks
# ---------------------------------------------------------------------------


def check_condition1(cert: FrwaCertificate | RwaCertificate, task: RwaTask, cfg: BnbConfig) -> Verdict:
    """Every initial state lies in the certificate's beta-sublevel set.

    For filtered certificates the clamps are honored: a violation is an
    initial state outside the goal whose (unclamped) value exceeds beta.
    """
    beta = cert.witness.beta
    builder = GraphBuilder(task.dim)
    enc = _Encoder(builder)
    builder.add_output("V", builder.mlp(builder.input, cert.net))
    value_ok = Atom("V", "le", beta)
    if isinstance(cert, FrwaCertificate):
        root = Or((enc.region(task.goal, builder.input),
                   And((negate(enc.region(task.unsafe, builder.input)), value_ok))))

        def recheck(pt):
            return float(evaluate(cert, pt)) > beta

    else:
        root = value_ok

        def recheck(pt):
            return float(evaluate_raw(cert, pt)) > beta

    query = Query(
        builder.build(),
        root,
        _box_array(_initial_box(task)),
        cfg.min_widths_for(task.layout),
        name="condition1",
    )
    return branch_and_bound(query, cfg, recheck)


def check_condition2_filtered(
    cert: FrwaCertificate, controller, plant: Plant, task: RwaTask, cfg: BnbConfig
) -> Verdict:
    """One-step progress for filtered certificates.

    Over states that are neither goal nor unsafe and sit in the beta-sublevel
    set: the certificate drops by at least epsilon or the successor is a goal
    state, and the successor is never unsafe. Stage goals that reference an
    earlier certificate are encoded through its raw network on the successor.
    """
    w = cert.witness
    builder = GraphBuilder(task.dim)
    enc = _Encoder(builder)
    xp = _closed_loop(builder, controller, plant)
    v_x = builder.mlp(builder.input, cert.net)
    v_xp = builder.mlp(xp, cert.net)
    builder.add_output("Vx", v_x)
    builder.add_output("dec", builder.add(v_x, v_xp, 1.0, -1.0))

    unsafe_x = enc.region(task.unsafe, builder.input)
    goal_x = enc.region(task.goal, builder.input)
    goal_xp = enc.region(task.goal, xp)
    unsafe_xp = enc.region(task.unsafe, xp)
    root = Or(
        (
            unsafe_x,
            goal_x,
            Atom("Vx", "ge", w.beta, strict=True),
            And((Or((Atom("dec", "ge", w.epsilon), goal_xp)), negate(unsafe_xp))),
        )
    )

    def recheck(pt):
        if geometry.region_contains(task.unsafe, pt) or geometry.region_contains(task.goal, pt):
            return False
        if float(evaluate_raw(cert, pt)) > w.beta:
            return False
        nxt = plant.next_state(pt, nn.forward(controller, pt))
        decrease = float(evaluate_raw(cert, pt)) - float(evaluate_raw(cert, nxt))
        conclusion = (
            decrease >= w.epsilon or bool(geometry.region_contains(task.goal, nxt))
        ) and not bool(geometry.region_contains(task.unsafe, nxt))
        return not conclusion

    query = Query(
        builder.build(),
        root,
        _box_array(task.domain),
        cfg.min_widths_for(task.layout),
        name="condition2",
    )
    return branch_and_bound(query, cfg, recheck)


def check_condition2_plain(
    cert: RwaCertificate, controller, plant: Plant, task: RwaTask, cfg: BnbConfig
) -> Verdict:
    """One-step decrease for unfiltered certificates over all non-goal states."""
    w = cert.witness
    builder = GraphBuilder(task.dim)
    enc = _Encoder(builder)
    xp = _closed_loop(builder, controller, plant)
    v_x = builder.mlp(builder.input, cert.net)
    v_xp = builder.mlp(xp, cert.net)
    builder.add_output("Vx", v_x)
    builder.add_output("dec", builder.add(v_x, v_xp, 1.0, -1.0))
    root = Or(
        (
            enc.region(task.goal, builder.input),
            Atom("Vx", "ge", w.beta, strict=True),
            Atom("dec", "ge", w.epsilon),
        )
    )

    def recheck(pt):
        if geometry.region_contains(task.goal, pt):
            return False
        if float(evaluate_raw(cert, pt)) > w.beta:
            return False
        nxt = plant.next_state(pt, nn.forward(controller, pt))
        return float(evaluate_raw(cert, pt)) - float(evaluate_raw(cert, nxt)) < w.epsilon

    query = Query(
        builder.build(),
        root,
        _box_array(task.domain),
        cfg.min_widths_for(task.layout),
        name="condition2",
    )
    return branch_and_bound(query, cfg, recheck)


def check_condition3(cert: RwaCertificate, task: RwaTask, cfg: BnbConfig) -> Verdict:
    """Unfiltered certificates must sit at or above alpha on the unsafe set.

    Filtered certificates satisfy this by construction, so passing one here is
    a caller bug.
    """
    if isinstance(cert, FrwaCertificate):
        raise TypeError("filtered certificates hold the unsafe floor by construction")
    alpha = cert.witness.alpha
    builder = GraphBuilder(task.dim)
    enc = _Encoder(builder)
    builder.add_output("V", builder.mlp(builder.input, cert.net))
    root = Or((negate(enc.region(task.unsafe, builder.input)), Atom("V", "ge", alpha)))

    def recheck(pt):
        return bool(geometry.region_contains(task.unsafe, pt)) and (
            float(evaluate_raw(cert, pt)) < alpha
        )

    query = Query(
        builder.build(),
        root,
        _box_array(task.domain),
        cfg.min_widths_for(task.layout),
        name="condition3",
    )
    return branch_and_bound(query, cfg, recheck)


def check_safety_direct(
    controller,
    plant: Plant,
    domain: BoxRegion,
    layout: StateLayout,
    n_directions: int,
    cfg: BnbConfig,
    speed_cap: float = geometry.SPEED_CAP,
    speed_slope: float = 2.0 * geometry.MEAN_MOTION,
) -> Verdict:
    """One-step inductive safety of the speed cap, in overapproximated form.

    Proves that no state that conservatively satisfies the cap can have a
    successor that even loosely violates it: under(v) <= cap + slope*over(p)
    at one step implies not(over(v') >= cap + slope*under(p')) at the next.
    """
    builder = GraphBuilder(domain.dim)
    enc = _Encoder(builder)
    xp = _closed_loop(builder, controller, plant)
    nd = n_directions

    under_p, over_p = enc.norm_pair(builder.input, layout.pos, nd)
    under_v, over_v = enc.norm_pair(builder.input, layout.vel, nd)
    under_pp, over_pp = enc.norm_pair(xp, layout.pos, nd)
    under_vp, over_vp = enc.norm_pair(xp, layout.vel, nd)
    # pre := under(v) - cap - slope*over(p)   (conservatively safe iff <= 0)
    pre = builder.affine(
        [(under_v, np.eye(1)), (over_p, -speed_slope * np.eye(1))], [-speed_cap]
    )
    # post := over(v') - cap - slope*under(p')  (loose violation iff >= 0)
    post = builder.affine(
        [(over_vp, np.eye(1)), (under_pp, -speed_slope * np.eye(1))], [-speed_cap]
    )
    builder.add_output("pre", pre)
    builder.add_output("post", post)
    root = Or((Atom("pre", "ge", 0.0, strict=True), Atom("post", "le", 0.0, strict=True)))

    def _norms(pt):
        pos = np.asarray(pt)[list(layout.pos)]
        vel = np.asarray(pt)[list(layout.vel)]
        p2 = pos[1] if pos.shape[0] == 2 else 0.0
        v2 = vel[1] if vel.shape[0] == 2 else 0.0
        return (
            geometry.under_norm(pos[0], p2, nd),
            geometry.over_norm(pos[0], p2, nd),
            geometry.under_norm(vel[0], v2, nd),
            geometry.over_norm(vel[0], v2, nd),
        )

    def recheck(pt):
        _, over_pos, under_vel, _ = _norms(pt)
        if under_vel > speed_cap + speed_slope * over_pos:
            return False
        nxt = plant.next_state(pt, nn.forward(controller, pt))
        under_posn, _, _, over_veln = _norms(nxt)
        return over_veln >= speed_cap + speed_slope * under_posn

    query = Query(
        builder.build(),
        root,
        _box_array(domain),
        cfg.min_widths_for(layout),
        name="safety_direct",
    )
    return branch_and_bound(query, cfg, recheck)
