"""Branch-and-bound over box domains for piecewise-linear conditions.

A query pairs an expression graph with a quantifier-free condition over its
scalar outputs (atoms combined with and/or). A box is *proved* when the
three-valued evaluation of the condition from sound output bounds comes back
true; otherwise the box is probed concretely (center, corners, then uniform
samples) for a counterexample and split along its widest normalized dimension.

Verified is returned only when every box is proved. Counterexamples are
always concrete points that violate the condition under exact evaluation,
re-checked by the caller-supplied semantic oracle when one is given. Budget
or minimum-width exhaustion yields Unknown, never a verdict.
"""

from __future__ import annotations

import enum
import heapq
import itertools
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..nn import Mlp
from .bounds import output_bounds
from .graph import ExprGraph, GraphBuilder

__all__ = [
    "Atom",
    "And",
    "Or",
    "negate",
    "BnbConfig",
    "Query",
    "Verdict",
    "VerdictStatus",
    "branch_and_bound",
    "find_violations",
    "minimize_lower_bound",
    "verdict_to_dict",
    "verdict_from_dict",
]


# ---------------------------------------------------------------------------
# Conditions over graph outputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    """A threshold test on one named scalar output of the graph."""

    output: str
    op: str  # "le" or "ge"
    threshold: float
    strict: bool = False

    def __post_init__(self):
        if self.op not in ("le", "ge"):
            raise ValueError(f"atom op must be 'le' or 'ge', got {self.op!r}")


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))


Condition = Atom | And | Or


def negate(expr: Condition) -> Condition:
    """De-Morgan negation; strictness flips so semantics stay exact."""
    if isinstance(expr, Atom):
        op = "ge" if expr.op == "le" else "le"
        return Atom(expr.output, op, expr.threshold, not expr.strict)
    if isinstance(expr, And):
        return Or(tuple(negate(c) for c in expr.children))
    if isinstance(expr, Or):
        return And(tuple(negate(c) for c in expr.children))
    raise TypeError(f"not a condition: {expr!r}")


def condition_atoms(expr: Condition):
    if isinstance(expr, Atom):
        yield expr
    else:
        for c in expr.children:
            yield from condition_atoms(c)


def _status(expr: Condition, lo, hi, index: dict[str, int], margin: float) -> np.ndarray:
    """Three-valued evaluation: +1 proved, -1 refuted, 0 undecided, per box."""
    if isinstance(expr, Atom):
        j = index[expr.output]
        l, h = lo[:, j], hi[:, j]
        t = expr.threshold
        out = np.zeros(l.shape[0], dtype=np.int8)
        if expr.op == "le":
            out[h <= (t - margin if expr.strict else t)] = 1
            out[(l >= t) if expr.strict else (l > t)] = -1
        else:
            out[l >= (t + margin if expr.strict else t)] = 1
            out[(h <= t) if expr.strict else (h < t)] = -1
        return out
    parts = [_status(c, lo, hi, index, margin) for c in expr.children]
    stack = np.stack(parts)
    if isinstance(expr, And):
        out = np.zeros(stack.shape[1], dtype=np.int8)
        out[np.all(stack == 1, axis=0)] = 1
        out[np.any(stack == -1, axis=0)] = -1
        return out
    out = np.zeros(stack.shape[1], dtype=np.int8)
    out[np.any(stack == 1, axis=0)] = 1
    out[np.all(stack == -1, axis=0)] = -1
    return out


def _concrete(expr: Condition, vals: np.ndarray, index: dict[str, int]) -> np.ndarray:
    """Exact boolean evaluation of the condition at concrete output values."""
    if isinstance(expr, Atom):
        v = vals[:, index[expr.output]]
        t = expr.threshold
        if expr.op == "le":
            return v < t if expr.strict else v <= t
        return v > t if expr.strict else v >= t
    parts = [_concrete(c, vals, index) for c in expr.children]
    stack = np.stack(parts)
    return np.all(stack, axis=0) if isinstance(expr, And) else np.any(stack, axis=0)


# ---------------------------------------------------------------------------
# Queries, verdicts, configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BnbConfig:
    """Budgets and precision knobs for branch-and-bound."""

    max_boxes: int = 5_000_000
    min_width_pos: float = 1e-4
    min_width_vel: float = 1e-5
    relaxation: str = "linear"  # "linear" or "interval"
    soundness_margin: float = 1e-9
    parallel_workers: int = 1
    batch_size: int = 512
    probe_samples: int = 32
    probe_seed: int = 20240801

    def __post_init__(self):
        if self.relaxation not in ("linear", "interval"):
            raise ValueError(f"unknown relaxation {self.relaxation!r}")
        if self.soundness_margin < 0:
            raise ValueError("soundness margin must be >= 0")

    def min_widths_for(self, layout) -> np.ndarray:
        w = np.empty(layout.dim)
        for i in layout.pos:
            w[i] = self.min_width_pos
        for i in layout.vel:
            w[i] = self.min_width_vel
        return w


@dataclass(frozen=True, eq=False)
class Query:
    """A condition to prove over a union of boxes."""

    graph: ExprGraph
    root: Condition
    domain: np.ndarray  # (M, d, 2)
    min_widths: np.ndarray  # (d,)
    name: str = ""

    def __post_init__(self):
        dom = np.asarray(self.domain, dtype=np.float64)
        if dom.ndim == 2:
            dom = dom[None, :, :]
        object.__setattr__(self, "domain", dom)
        object.__setattr__(self, "min_widths", np.asarray(self.min_widths, dtype=np.float64))
        names = set(self.graph.output_names)
        for atom in condition_atoms(self.root):
            if atom.output not in names:
                raise ValueError(f"atom references unknown output {atom.output!r}")


class VerdictStatus(enum.Enum):
    VERIFIED = "verified"
    COUNTEREXAMPLE = "counterexample"
    UNKNOWN = "unknown"


@dataclass(frozen=True, eq=False)
class Verdict:
    status: VerdictStatus
    counterexample: np.ndarray | None = None
    reason: str | None = None
    boxes_processed: int = 0
    unknown_box: np.ndarray | None = None
    condition: str = ""

    @property
    def is_verified(self) -> bool:
        return self.status is VerdictStatus.VERIFIED

    @property
    def is_counterexample(self) -> bool:
        return self.status is VerdictStatus.COUNTEREXAMPLE

    @property
    def is_unknown(self) -> bool:
        return self.status is VerdictStatus.UNKNOWN


def verdict_to_dict(v: Verdict) -> dict:
    return {
        "status": v.status.value,
        "condition": v.condition,
        "counterexample": None if v.counterexample is None else [float(x) for x in v.counterexample],
        "reason": v.reason,
        "boxes_processed": v.boxes_processed,
        "unknown_box": None if v.unknown_box is None else np.asarray(v.unknown_box).tolist(),
    }


def verdict_from_dict(doc: dict) -> Verdict:
    return Verdict(
        status=VerdictStatus(doc["status"]),
        counterexample=None if doc.get("counterexample") is None else np.array(doc["counterexample"]),
        reason=doc.get("reason"),
        boxes_processed=int(doc.get("boxes_processed", 0)),
        unknown_box=None if doc.get("unknown_box") is None else np.array(doc["unknown_box"]),
        condition=doc.get("condition", ""),
    )


# ---------------------------------------------------------------------------
# Probing and generation processing
# ---------------------------------------------------------------------------


def _unit_probes(dim: int, samples: int, seed: int) -> np.ndarray:
    """Probe layout in the unit cube: center, corners, then uniform samples."""
    pts = [np.full(dim, 0.5)]
    if dim <= 4:
        pts.extend(np.array(c, dtype=np.float64) for c in itertools.product((0.0, 1.0), repeat=dim))
    else:
        for i in range(dim):
            for v in (0.0, 1.0):
                p = np.full(dim, 0.5)
                p[i] = v
                pts.append(p)
    rng = np.random.default_rng(seed)
    if samples > 0:
        pts.append(rng.random((samples, dim)))
    return np.vstack([np.atleast_2d(p) for p in pts])


def _process_chunk(graph, root, boxes, unit_probes, margin, relaxation):
    """Statuses plus the first concretely violating probe point per box."""
    lo, hi = output_bounds(graph, boxes, relaxation)
    index = {name: i for i, name in enumerate(graph.output_names)}
    statuses = _status(root, lo, hi, index, margin)
    m, d = boxes.shape[0], boxes.shape[1]
    viol_idx = np.full(m, -1, dtype=np.int64)
    viol_pts = np.zeros((m, d))
    todo = np.flatnonzero(statuses != 1)
    if todo.size:
        blo = boxes[todo, :, 0]
        bhi = boxes[todo, :, 1]
        pts = blo[:, None, :] + unit_probes[None, :, :] * (bhi - blo)[:, None, :]
        flat = pts.reshape(-1, d)
        vals = graph.evaluate(flat)
        ok = _concrete(root, vals, index).reshape(todo.size, -1)
        has_viol = ~np.all(ok, axis=1)
        first = np.argmin(ok, axis=1)  # index of first False where one exists
        for k in np.flatnonzero(has_viol):
            viol_idx[todo[k]] = first[k]
            viol_pts[todo[k]] = pts[k, first[k]]
    return statuses, viol_idx, viol_pts


def _chunk_worker(args):
    return _process_chunk(*args)


class _Frontier:
    """FIFO of boxes kept as array chunks for cheap batched pops/pushes."""

    def __init__(self, boxes: np.ndarray):
        self._chunks: deque[np.ndarray] = deque()
        self._count = 0
        if boxes.shape[0]:
            self._chunks.append(boxes)
            self._count = boxes.shape[0]

    def __len__(self) -> int:
        return self._count

    def pop_batch(self, size: int) -> np.ndarray:
        out = []
        need = size
        while need > 0 and self._chunks:
            head = self._chunks.popleft()
            if head.shape[0] > need:
                out.append(head[:need])
                self._chunks.appendleft(head[need:])
                self._count -= need
                need = 0
            else:
                out.append(head)
                self._count -= head.shape[0]
                need -= head.shape[0]
        return np.concatenate(out, axis=0)

    def peek(self) -> np.ndarray:
        return self._chunks[0][0]

    def push(self, boxes: np.ndarray) -> None:
        if boxes.shape[0]:
            self._chunks.append(boxes)
            self._count += boxes.shape[0]


def _split_batch(boxes: np.ndarray, min_widths: np.ndarray, norm_widths: np.ndarray):
    """Split each splittable box in half on its widest normalized dimension.

    Returns (children, n_unsplittable, example_unsplittable). Children keep
    the parent order, lower half first.
    """
    widths = boxes[:, :, 1] - boxes[:, :, 0]
    splittable_dims = widths > min_widths
    any_split = np.any(splittable_dims, axis=1)
    stuck = boxes[~any_split]
    todo = boxes[any_split]
    if todo.shape[0] == 0:
        return np.zeros((0,) + boxes.shape[1:]), stuck.shape[0], (stuck[0] if stuck.shape[0] else None)
    w = widths[any_split] / norm_widths
    w[~splittable_dims[any_split]] = -np.inf
    dims = np.argmax(w, axis=1)
    mids = 0.5 * (todo[np.arange(todo.shape[0]), dims, 0] + todo[np.arange(todo.shape[0]), dims, 1])
    lo_half = todo.copy()
    hi_half = todo.copy()
    lo_half[np.arange(todo.shape[0]), dims, 1] = mids
    hi_half[np.arange(todo.shape[0]), dims, 0] = mids
    children = np.empty((2 * todo.shape[0],) + boxes.shape[1:])
    children[0::2] = lo_half
    children[1::2] = hi_half
    return children, stuck.shape[0], (stuck[0] if stuck.shape[0] else None)


def _run_generations(query: Query, cfg: BnbConfig, recheck, collect, max_points):
    """Shared engine for branch_and_bound and find_violations."""
    d = query.domain.shape[1]
    norm_widths = query.domain[:, :, 1].max(axis=0) - query.domain[:, :, 0].min(axis=0)
    norm_widths = np.where(norm_widths > 0, norm_widths, 1.0)
    unit_probes = _unit_probes(d, cfg.probe_samples, cfg.probe_seed)
    frontier = _Frontier(query.domain.copy())
    processed = 0
    min_width_hit = False
    stuck_example = None
    mismatches = 0
    found: list[np.ndarray] = []

    pool = None
    workers = max(1, int(cfg.parallel_workers))
    try:
        if workers > 1:
            pool = ProcessPoolExecutor(max_workers=workers)
        while len(frontier):
            if processed >= cfg.max_boxes:
                return Verdict(
                    VerdictStatus.UNKNOWN,
                    reason=f"box budget exhausted ({cfg.max_boxes})",
                    boxes_processed=processed,
                    unknown_box=np.array(frontier.peek()),
                    condition=query.name,
                ), found, mismatches
            batch = frontier.pop_batch(cfg.batch_size)
            processed += batch.shape[0]
            if pool is not None and batch.shape[0] >= 2 * workers:
                chunks = np.array_split(batch, workers)
                args = [
                    (query.graph, query.root, c, unit_probes, cfg.soundness_margin, cfg.relaxation)
                    for c in chunks
                    if c.shape[0]
                ]
                parts = list(pool.map(_chunk_worker, args))
                statuses = np.concatenate([p[0] for p in parts])
                viol_idx = np.concatenate([p[1] for p in parts])
                viol_pts = np.concatenate([p[2] for p in parts])
            else:
                statuses, viol_idx, viol_pts = _process_chunk(
                    query.graph, query.root, batch, unit_probes, cfg.soundness_margin, cfg.relaxation
                )
            for k in np.flatnonzero(viol_idx >= 0):
                point = viol_pts[k]
                if recheck is not None and not recheck(point):
                    mismatches += 1
                    continue
                if collect:
                    found.append(point.copy())
                    if len(found) >= max_points:
                        return None, found, mismatches
                else:
                    return Verdict(
                        VerdictStatus.COUNTEREXAMPLE,
                        counterexample=point.copy(),
                        boxes_processed=processed,
                        condition=query.name,
                    ), found, mismatches
            undecided = batch[statuses != 1]
            if undecided.shape[0]:
                children, n_stuck, example = _split_batch(undecided, query.min_widths, norm_widths)
                if n_stuck:
                    min_width_hit = True
                    if stuck_example is None:
                        stuck_example = example
                frontier.push(children)
    finally:
        if pool is not None:
            pool.shutdown()

    if min_width_hit:
        return Verdict(
            VerdictStatus.UNKNOWN,
            reason="minimum box width reached with the condition still undecided",
            boxes_processed=processed,
            unknown_box=stuck_example,
            condition=query.name,
        ), found, mismatches
    return Verdict(
        VerdictStatus.VERIFIED, boxes_processed=processed, condition=query.name
    ), found, mismatches


def branch_and_bound(query: Query, cfg: BnbConfig, recheck=None) -> Verdict:
    """Prove the query on every box, or produce a concrete counterexample.

    ``recheck``, when given, is an independent semantic oracle called on every
    candidate counterexample; candidates it rejects are discarded (and the
    search continues), so a returned counterexample is always doubly checked.
    """
    verdict, _, _ = _run_generations(query, cfg, recheck, collect=False, max_points=0)
    return verdict


def find_violations(query: Query, cfg: BnbConfig, max_points: int, recheck=None) -> np.ndarray:
    """Collect up to ``max_points`` concrete violating points of the query.

    Unlike branch_and_bound this does not stop at the first counterexample.
    Returns an (n, d) array; n may be zero when the condition actually holds.
    """
    _, found, _ = _run_generations(query, cfg, recheck, collect=True, max_points=max_points)
    if not found:
        return np.zeros((0, query.domain.shape[1]))
    return np.stack(found)


def minimize_lower_bound(net: Mlp, box, cfg: BnbConfig, split_budget: int = 2048) -> float:
    """A sound global lower bound of a scalar network over a box, refined by
    repeatedly splitting the box whose bound is loosest."""
    if net.output_size != 1:
        raise ValueError("lower-bound pass expects a scalar network")
    lower = np.asarray(box.lower, dtype=np.float64)
    upper = np.asarray(box.upper, dtype=np.float64)
    builder = GraphBuilder(lower.shape[0])
    builder.add_output("v", builder.mlp(builder.input, net))
    graph = builder.build()

    def bound_of(boxes: np.ndarray) -> np.ndarray:
        lo, _ = output_bounds(graph, boxes, cfg.relaxation)
        return lo[:, 0]

    widths = np.where(upper - lower > 0, upper - lower, 1.0)
    min_w = widths / 2**24
    first = np.stack([lower, upper], axis=1)[None, :, :]
    heap: list[tuple[float, int, np.ndarray]] = []
    counter = 0
    heapq.heappush(heap, (float(bound_of(first)[0]), counter, first[0]))
    splits = 0
    while splits < split_budget:
        lb, _, bx = heap[0]
        w = bx[:, 1] - bx[:, 0]
        if not np.any(w > min_w):
            break
        heapq.heappop(heap)
        dim = int(np.argmax(np.where(w > min_w, w / widths, -np.inf)))
        mid = 0.5 * (bx[dim, 0] + bx[dim, 1])
        lo_half = bx.copy()
        hi_half = bx.copy()
        lo_half[dim, 1] = mid
        hi_half[dim, 0] = mid
        pair = np.stack([lo_half, hi_half])
        for b, child in zip(bound_of(pair), pair):
            counter += 1
            heapq.heappush(heap, (float(b), counter, child))
        splits += 1
    return min(item[0] for item in heap)
