"""Chained certificates: stage construction, validation, and the runtime
stage-switching controller.

A chain covers a large initial set with a sequence of certificate/controller
pairs. Stage 0 targets the true goal; each later stage's goal is the previous
stage's verified safe sublevel set (outside its unsafe set) united with the
true goal, so finishing stage i hands the state to stage i-1 in a region
where that stage's guarantee applies.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry, nn
from .certificate import FrwaCertificate, RwaCertificate, certificate_from_dict, certificate_to_dict
from .dynamics import Outcome, Plant, Trajectory
from .geometry import (
    Box,
    BoxRegion,
    CertSublevel,
    Complement,
    ComplementBox,
    Intersection,
    Region,
    RwaTask,
    Union,
    regions_equal,
)
from .nn import Mlp
from .training import BnbConfig, CegisResult, TrainConfig, cegis
from .verifier import branch_and_bound, find_violations, region_query

__all__ = [
    "Stage",
    "CrwaCertificate",
    "MetaState",
    "StageSpec",
    "ChainCheck",
    "ChainReport",
    "CrwaResult",
    "build_stage_goal",
    "validate_chain",
    "train_crwa",
    "init_meta_state",
    "meta_control_step",
    "simulate_meta",
    "sample_annulus",
    "docking_stage_specs",
    "chain_to_dict",
    "chain_from_dict",
]


@dataclass(frozen=True, eq=False)
class Stage:
    index: int
    controller: Mlp
    certificate: FrwaCertificate | RwaCertificate
    initial: Region
    unsafe: Region
    goal: Region


@dataclass(frozen=True, eq=False)
class CrwaCertificate:
    """Ordered stages 0..n-1; stage 0 reaches the true goal."""

    stages: tuple[Stage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("a chain needs at least one stage")
        for i, stage in enumerate(self.stages):
            if stage.index != i:
                raise ValueError(f"stage {i} carries index {stage.index}")

    def __len__(self) -> int:
        return len(self.stages)


@dataclass(frozen=True)
class MetaState:
    current_stage: int
    state: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "state", np.asarray(self.state, dtype=np.float64))


def build_stage_goal(prev: Stage, base_goal: Region) -> Region:
    """Goal for the stage above ``prev``: the true goal united with the states
    outside prev's unsafe set whose raw certificate value is within beta."""
    return Union(
        (
            base_goal,
            Intersection(
                (
                    Complement(prev.unsafe),
                    CertSublevel(
                        net=prev.certificate.net,
                        threshold=prev.certificate.witness.beta,
                        name=f"stage{prev.index}",
                    ),
                )
            ),
        )
    )


# ---------------------------------------------------------------------------
# Chain validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ChainReport:
    checks: tuple[ChainCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[ChainCheck]:
        return [c for c in self.checks if not c.passed]


def _region_subset(
    a: Region, b: Region, bounds: BoxRegion, cfg: BnbConfig | None, seed: int
) -> tuple[bool, str]:
    """A ⊆ B, decided exactly for box-structured pairs, by a verifier query
    when A is a box, and by sampling otherwise."""
    if isinstance(a, Box) and isinstance(b, Box):
        ok = bool(np.all(a.box.lower >= b.box.lower) and np.all(a.box.upper <= b.box.upper))
        return ok, "box inclusion"
    if isinstance(a, ComplementBox) and isinstance(b, ComplementBox):
        ok = bool(np.all(b.box.lower >= a.box.lower) and np.all(b.box.upper <= a.box.upper))
        return ok, "complement-box inclusion"
    if isinstance(a, Union):
        results = [_region_subset(c, b, bounds, cfg, seed) for c in a.children]
        ok = all(r[0] for r in results)
        return ok, "unionwise: " + "; ".join(r[1] for r in results)
    if regions_equal(a, b):
        return True, "structurally equal"
    if isinstance(b, Union) and any(regions_equal(a, c) for c in b.children):
        return True, "matches a union member"
    if isinstance(a, Box) and cfg is not None:
        layout = geometry.StateLayout(tuple(range(bounds.dim)), ())
        query = region_query(b, a.box, layout, cfg, name="subset")
        verdict = branch_and_bound(query, cfg)
        if verdict.is_verified:
            return True, "verified by branch-and-bound"
        if verdict.is_counterexample:
            return False, f"witness outside superset: {verdict.counterexample.tolist()}"
        # fall through to sampling on Unknown
    try:
        pts = geometry.sample_region(a, bounds, 4096, seed)
    except geometry.RegionSamplingError:
        return True, "subset region empty within bounds (sampled)"
    inside = geometry.region_contains(b, pts)
    if bool(np.all(inside)):
        return True, "sampled (4096 points)"
    witness = pts[~inside][0]
    return False, f"sampled witness outside superset: {witness.tolist()}"


def _regions_differ(a: Region, b: Region) -> bool:
    return not regions_equal(a, b)


def validate_chain(
    crwa: CrwaCertificate, task: RwaTask, cfg: BnbConfig | None = None, seed: int = 0
) -> ChainReport:
    """Mechanical audit of the chain-consistency conditions.

    Checks, for the base stage: the goal is the task goal, the initial set is
    inside the task's, and the unsafe set sits between the task's unsafe set
    and the complement of (initial ∪ goal). For each later stage: initial
    sets grow, unsafe sets shrink (both within the task's), the goal matches
    the construction from the previous stage, and something changed. The
    final stage must match the task exactly.
    """
    checks: list[ChainCheck] = []
    bounds = task.domain
    s0 = crwa.stages[0]

    checks.append(
        ChainCheck("(i) base goal is the task goal", regions_equal(s0.goal, task.goal))
    )
    ok, how = _region_subset(s0.initial, task.initial, bounds, cfg, seed)
    checks.append(ChainCheck("(i) base initial within task initial", ok, how))
    ok, how = _region_subset(task.unsafe, s0.unsafe, bounds, cfg, seed + 1)
    checks.append(ChainCheck("(i) task unsafe within base unsafe", ok, how))
    ok, how = _region_subset(
        s0.unsafe, Complement(Union((s0.initial, s0.goal))), bounds, cfg, seed + 2
    )
    checks.append(ChainCheck("(i) base unsafe avoids initial and goal", ok, how))

    for i in range(1, len(crwa.stages)):
        prev, cur = crwa.stages[i - 1], crwa.stages[i]
        ok, how = _region_subset(prev.initial, cur.initial, bounds, cfg, seed + 10 * i)
        checks.append(ChainCheck(f"(ii) stage {i} initial grows", ok, how))
        ok, how = _region_subset(cur.initial, task.initial, bounds, cfg, seed + 10 * i + 1)
        checks.append(ChainCheck(f"(ii) stage {i} initial within task", ok, how))
        ok, how = _region_subset(task.unsafe, cur.unsafe, bounds, cfg, seed + 10 * i + 2)
        checks.append(ChainCheck(f"(ii) stage {i} unsafe contains task unsafe", ok, how))
        ok, how = _region_subset(cur.unsafe, prev.unsafe, bounds, cfg, seed + 10 * i + 3)
        checks.append(ChainCheck(f"(ii) stage {i} unsafe shrinks", ok, how))
        expected_goal = build_stage_goal(prev, crwa.stages[0].goal)
        checks.append(
            ChainCheck(
                f"(ii) stage {i} goal built from stage {i - 1}",
                regions_equal(cur.goal, expected_goal),
            )
        )
        changed = _regions_differ(cur.initial, prev.initial) or _regions_differ(
            cur.unsafe, prev.unsafe
        )
        checks.append(ChainCheck(f"(iii) stage {i} changes initial or unsafe", changed))

    last = crwa.stages[-1]
    checks.append(
        ChainCheck("(iv) final initial is the task initial", regions_equal(last.initial, task.initial))
    )
    checks.append(
        ChainCheck("(iv) final unsafe is the task unsafe", regions_equal(last.unsafe, task.unsafe))
    )
    return ChainReport(tuple(checks))


# ---------------------------------------------------------------------------
# Chain training
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StageSpec:
    initial: Region
    unsafe: Region
    domain: BoxRegion


def docking_stage_specs(a_values, task: RwaTask) -> list[StageSpec]:
    """Stage schedule for box-family tasks: half-widths a_0 < ... < a_{n-1},
    the last of which must reproduce the task's own initial set."""
    if not a_values:
        raise ValueError("schedule must name at least one stage")
    if any(b <= a for a, b in zip(a_values, a_values[1:])):
        raise ValueError("schedule half-widths must strictly increase")
    if not isinstance(task.initial, Box):
        raise ValueError("stage schedules require a box-shaped task initial set")
    layout = task.layout
    v_tol = float(task.initial.box.upper[layout.vel[0]])
    cap = None
    if isinstance(task.unsafe, Union):
        for child in task.unsafe.children:
            if isinstance(child, geometry.VelocityUnsafeOverapprox):
                cap = child
    if cap is None:
        raise ValueError("task unsafe set lacks the speed-cap component")
    specs = []
    inf = np.inf
    for a in a_values:
        lower = np.empty(task.dim)
        upper = np.empty(task.dim)
        blower = np.empty(task.dim)
        bupper = np.empty(task.dim)
        for p in layout.pos:
            lower[p], upper[p] = -a, a
            blower[p], bupper[p] = -(a + 1.0), a + 1.0
        for v in layout.vel:
            lower[v], upper[v] = -v_tol, v_tol
            blower[v], bupper[v] = -inf, inf
        initial = Box(BoxRegion(lower, upper))
        unsafe = Union((ComplementBox(BoxRegion(blower, bupper)), cap))
        dlower = blower.copy()
        dupper = bupper.copy()
        for v in layout.vel:
            dlower[v] = task.domain.lower[v]
            dupper[v] = task.domain.upper[v]
        specs.append(StageSpec(initial, unsafe, BoxRegion(dlower, dupper)))
    final = specs[-1]
    if not (regions_equal(final.initial, task.initial) and regions_equal(final.unsafe, task.unsafe)):
        raise ValueError("the last schedule entry must reproduce the task's initial/unsafe sets")
    return specs


@dataclass(frozen=True)
class StageRecord:
    index: int
    cegis: CegisResult
    wall_time_s: float


@dataclass(frozen=True, eq=False)
class CrwaResult:
    chain: CrwaCertificate | None
    records: list
    failed_stage: int | None = None

    @property
    def complete(self) -> bool:
        return self.chain is not None and self.failed_stage is None


def train_crwa(
    specs: list[StageSpec],
    task: RwaTask,
    plant: Plant,
    cfg: TrainConfig,
    bnb_cfg: BnbConfig,
    stage_budget_s: float,
    annulus_count: int = 1000,
    **cegis_kwargs,
) -> CrwaResult:
    """Run the synthesis loop once per stage, wiring each stage's goal to the
    previous stage's certificate. Aborts on the first stage that fails,
    returning the partial chain with the failing index marked."""
    if not specs:
        raise ValueError("empty stage schedule")
    stages: list[Stage] = []
    records: list[StageRecord] = []
    for i, spec in enumerate(specs):
        goal = task.goal if i == 0 else build_stage_goal(stages[-1], task.goal)
        stage_task = RwaTask(spec.initial, goal, spec.unsafe, spec.domain, task.layout, task.n_directions)
        extra = None
        if i > 0:
            extra = sample_annulus(
                spec.initial, goal, spec.domain, annulus_count, bnb_cfg, cfg.seed + 50 + i
            )
        start = time.perf_counter()
        result = cegis(
            stage_task,
            plant,
            cfg,
            bnb_cfg,
            stage_budget_s,
            extra_points=extra,
            **cegis_kwargs,
        )
        elapsed = time.perf_counter() - start
        records.append(StageRecord(i, result, elapsed))
        if not result.verified:
            chain = CrwaCertificate(tuple(stages)) if stages else None
            return CrwaResult(chain, records, failed_stage=i)
        stages.append(Stage(i, result.controller, result.certificate, spec.initial, spec.unsafe, goal))
    return CrwaResult(CrwaCertificate(tuple(stages)), records)


# ---------------------------------------------------------------------------
# Meta-controller
# ---------------------------------------------------------------------------


def init_meta_state(crwa: CrwaCertificate, state) -> MetaState:
    """Start at the smallest stage whose initial set covers the state."""
    s = np.asarray(state, dtype=np.float64)
    for stage in crwa.stages:
        if geometry.region_contains(stage.initial, s):
            return MetaState(stage.index, s)
    raise ValueError("state is not covered by any stage's initial set")


def meta_control_step(crwa: CrwaCertificate, ms: MetaState, plant: Plant) -> tuple[np.ndarray, MetaState]:
    """Switch down through satisfied stage goals, then emit the clipped
    command of the active stage's controller. The stage index never
    increases along a trajectory."""
    idx = ms.current_stage
    while idx > 0 and geometry.region_contains(crwa.stages[idx].goal, ms.state):
        idx -= 1
    u = plant.clip(nn.forward(crwa.stages[idx].controller, ms.state))
    return u, MetaState(idx, ms.state)


def simulate_meta(
    crwa: CrwaCertificate,
    s0,
    task: RwaTask,
    plant: Plant,
    max_steps: int = 2000,
) -> tuple[Trajectory, np.ndarray]:
    """Roll out the stage-switching controller; returns the trajectory and
    the active stage per visited state."""
    s = np.asarray(s0, dtype=np.float64)
    states = [s.copy()]
    inputs: list[np.ndarray] = []
    if geometry.region_contains(task.goal, s):
        return (
            Trajectory(np.array(states), np.zeros((0, plant.control_dim)), Outcome.DOCKED),
            np.array([init_meta_state(crwa, s).current_stage]),
        )
    ms = init_meta_state(crwa, s)
    trace = [ms.current_stage]
    outcome = Outcome.TRUNCATED
    for _ in range(max_steps):
        u, ms = meta_control_step(crwa, ms, plant)
        s = plant.step.apply(s, u)
        ms = MetaState(ms.current_stage, s)
        states.append(s.copy())
        inputs.append(u)
        trace.append(ms.current_stage)
        if geometry.region_contains(task.unsafe, s):
            outcome = Outcome.UNSAFE
            break
        if geometry.region_contains(task.goal, s):
            outcome = Outcome.DOCKED
            break
    return Trajectory(np.array(states), np.array(inputs), outcome), np.array(trace)


def sample_annulus(
    stage_initial: Region,
    stage_goal: Region,
    bounds: BoxRegion,
    count: int,
    cfg: BnbConfig,
    seed: int,
) -> np.ndarray:
    """States in stage_initial \\ stage_goal, for training-data emphasis.

    Straight rejection sampling first; if it stalls (the annulus can be a thin
    sliver of the initial set), fall back to verifier queries that hunt for
    points of the initial box not in the goal, then pad with their neighbors.
    Returns an empty array when the region is provably or apparently empty.
    """
    region = Intersection((stage_initial, Complement(stage_goal)))
    try:
        return geometry.sample_region(
            region, bounds, count, seed, max_attempts=max(50_000, 200 * count)
        )
    except geometry.RegionSamplingError:
        pass
    if not isinstance(stage_initial, Box):
        return np.zeros((0, bounds.dim))
    layout = geometry.StateLayout(tuple(range(bounds.dim)), ())
    query = region_query(stage_goal, stage_initial.box, layout, cfg, name="annulus")
    seeds_found = find_violations(query, cfg, max_points=max(8, count // 32))
    if seeds_found.shape[0] == 0:
        return np.zeros((0, bounds.dim))
    rng = np.random.default_rng(seed)
    widths = stage_initial.box.upper - stage_initial.box.lower
    radius = 0.05 * np.where(np.isfinite(widths), widths, 1.0)
    pool = [seeds_found]
    per_seed = max(1, count // seeds_found.shape[0])
    for pt in seeds_found:
        nb = pt + rng.uniform(-radius, radius, size=(4 * per_seed, bounds.dim))
        nb = np.clip(nb, stage_initial.box.lower, stage_initial.box.upper)
        keep = geometry.region_contains(region, nb)
        pool.append(nb[keep])
    pts = np.concatenate(pool, axis=0)
    return pts[:count]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def chain_to_dict(crwa: CrwaCertificate) -> dict:
    return {
        "format": "rwacert-chain-v1",
        "stages": [
            {
                "index": st.index,
                "controller": nn.to_dict(st.controller),
                "certificate": certificate_to_dict(st.certificate),
                "initial": geometry.region_to_dict(st.initial),
                "unsafe": geometry.region_to_dict(st.unsafe),
                "goal": geometry.region_to_dict(st.goal),
            }
            for st in crwa.stages
        ],
    }


def chain_from_dict(doc: dict) -> CrwaCertificate:
    if doc.get("format") != "rwacert-chain-v1":
        raise ValueError(f"not a chain bundle: {doc.get('format')!r}")
    stages = tuple(
        Stage(
            index=int(item["index"]),
            controller=nn.from_dict(item["controller"]),
            certificate=certificate_from_dict(item["certificate"]),
            initial=geometry.region_from_dict(item["initial"]),
            unsafe=geometry.region_from_dict(item["unsafe"]),
            goal=geometry.region_from_dict(item["goal"]),
        )
        for item in doc["stages"]
    )
    return CrwaCertificate(stages)
