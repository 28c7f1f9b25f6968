"""Sound output bounds for expression graphs over batches of boxes.

Two relaxations are available:

* ``interval``: plain interval arithmetic, cheap and loose.
* ``linear``: per-node affine lower/upper forms in the input variables with
  the triangle relaxation for unstable ReLUs, concretized against the box and
  intersected with the interval bounds at every node, so it can never be
  looser than interval mode on the same boxes.

Both are inclusion-monotone: shrinking a box never loosens the bounds.
"""

from __future__ import annotations

import numpy as np

from .graph import AffineNode, ExprGraph, InputNode, ReluNode

__all__ = ["output_bounds"]


def _split_boxes(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = boxes[:, :, 0]
    hi = boxes[:, :, 1]
    if np.any(lo > hi):
        raise ValueError("box has lower > upper")
    return lo, hi


def _interval_pass(graph: ExprGraph, lo0: np.ndarray, hi0: np.ndarray):
    los: list[np.ndarray] = []
    his: list[np.ndarray] = []
    for node in graph.nodes:
        if isinstance(node, InputNode):
            los.append(lo0)
            his.append(hi0)
        elif isinstance(node, AffineNode):
            n = lo0.shape[0]
            lo = np.broadcast_to(node.bias, (n, node.dim)).copy()
            hi = lo.copy()
            for pid, mat in zip(node.parents, node.mats):
                pos = np.maximum(mat, 0.0)
                neg = np.minimum(mat, 0.0)
                lo += los[pid] @ pos.T + his[pid] @ neg.T
                hi += his[pid] @ pos.T + los[pid] @ neg.T
            los.append(lo)
            his.append(hi)
        else:
            los.append(np.maximum(los[node.parent], 0.0))
            his.append(np.maximum(his[node.parent], 0.0))
    return los, his


def _concretize(w: np.ndarray, b: np.ndarray, mid: np.ndarray, rad: np.ndarray, upper: bool):
    val = np.einsum("mod,md->mo", w, mid) + b
    spread = np.einsum("mod,md->mo", np.abs(w), rad)
    return val + spread if upper else val - spread


def _linear_pass(graph: ExprGraph, lo0: np.ndarray, hi0: np.ndarray):
    """Affine lower/upper forms per node, with concrete bounds tightened by
    the interval pass. Returns per-node concrete (lo, hi)."""
    n, d = lo0.shape
    mid = 0.5 * (lo0 + hi0)
    rad = 0.5 * (hi0 - lo0)
    ilos, ihis = _interval_pass(graph, lo0, hi0)

    lws: list[np.ndarray] = []
    lbs: list[np.ndarray] = []
    uws: list[np.ndarray] = []
    ubs: list[np.ndarray] = []
    clos: list[np.ndarray] = []
    chis: list[np.ndarray] = []

    for nid, node in enumerate(graph.nodes):
        if isinstance(node, InputNode):
            eye = np.broadcast_to(np.eye(d), (n, d, d)).copy()
            zero = np.zeros((n, d))
            lw, lb, uw, ub = eye, zero, eye.copy(), zero.copy()
        elif isinstance(node, AffineNode):
            lw = np.zeros((n, node.dim, d))
            uw = np.zeros((n, node.dim, d))
            lb = np.broadcast_to(node.bias, (n, node.dim)).copy()
            ub = lb.copy()
            for pid, mat in zip(node.parents, node.mats):
                pos = np.maximum(mat, 0.0)
                neg = np.minimum(mat, 0.0)
                lw += np.einsum("oj,njd->nod", pos, lws[pid]) + np.einsum(
                    "oj,njd->nod", neg, uws[pid]
                )
                uw += np.einsum("oj,njd->nod", pos, uws[pid]) + np.einsum(
                    "oj,njd->nod", neg, lws[pid]
                )
                lb += lbs[pid] @ pos.T + ubs[pid] @ neg.T
                ub += ubs[pid] @ pos.T + lbs[pid] @ neg.T
        else:  # ReLU with the triangle relaxation
            pid = node.parent
            plo, phi = clos[pid], chis[pid]
            active = plo >= 0.0
            inactive = phi <= 0.0
            unstable = ~(active | inactive)
            # Upper chord: slope z + intercept, slope = hi/(hi-lo), through (lo,0),(hi,hi).
            denom = np.where(unstable, phi - plo, 1.0)
            slope = np.where(unstable, phi / denom, 0.0)
            intercept = np.where(unstable, -slope * plo, 0.0)
            slope = np.where(active, 1.0, slope)
            uw = uws[pid] * slope[:, :, None]
            ub = ubs[pid] * slope + intercept
            # Lower: keep the identity when the neuron is mostly positive, else zero.
            keep = active | (unstable & (phi >= -plo))
            lam = keep.astype(np.float64)
            lw = lws[pid] * lam[:, :, None]
            lb = lbs[pid] * lam

        clo = _concretize(lw, lb, mid, rad, upper=False)
        chi = _concretize(uw, ub, mid, rad, upper=True)
        if isinstance(node, ReluNode):
            clo = np.maximum(clo, np.maximum(ilos[nid], 0.0))
            chi = np.minimum(chi, np.maximum(ihis[nid], 0.0))
            clo = np.maximum(clo, 0.0)
        else:
            clo = np.maximum(clo, ilos[nid])
            chi = np.minimum(chi, ihis[nid])
        # Intersecting two sound bounds can only cross from rounding noise.
        chi = np.maximum(chi, clo)
        lws.append(lw)
        lbs.append(lb)
        uws.append(uw)
        ubs.append(ub)
        clos.append(clo)
        chis.append(chi)
    return clos, chis


def output_bounds(
    graph: ExprGraph, boxes: np.ndarray, relaxation: str = "linear"
) -> tuple[np.ndarray, np.ndarray]:
    """Sound per-output bounds over a batch of boxes.

    ``boxes`` has shape (M, d, 2); the result is a pair of (M, n_outputs)
    arrays (lower, upper).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim == 2:
        boxes = boxes[None, :, :]
    lo0, hi0 = _split_boxes(boxes)
    if relaxation == "interval":
        los, his = _interval_pass(graph, lo0, hi0)
    elif relaxation == "linear":
        los, his = _linear_pass(graph, lo0, hi0)
    else:
        raise ValueError(f"unknown relaxation {relaxation!r}")
    m = boxes.shape[0]
    k = len(graph.output_names)
    out_lo = np.empty((m, k))
    out_hi = np.empty((m, k))
    for j, name in enumerate(graph.output_names):
        nid, row = graph.outputs[name]
        out_lo[:, j] = los[nid][:, row]
        out_hi[:, j] = his[nid][:, row]
    return out_lo, out_hi
