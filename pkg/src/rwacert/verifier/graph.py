"""Piecewise-linear expression graphs.

Everything the verifier reasons about (networks, thrust clipping, the affine
dynamics, norm approximations) compiles down to a DAG with exactly three node
kinds: input, affine, and ReLU. Clip, abs, min and max are expressed through
ReLU at build time, so the bound propagator only ever has to relax one
nonlinearity. Graph evaluation at a point reproduces the concrete composed
functions exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import Mlp

__all__ = ["ExprGraph", "GraphBuilder", "InputNode", "AffineNode", "ReluNode"]


@dataclass(frozen=True, eq=False)
class InputNode:
    dim: int


@dataclass(frozen=True, eq=False)
class AffineNode:
    """out = sum_p mats[p] @ value(parents[p]) + bias"""

    parents: tuple[int, ...]
    mats: tuple[np.ndarray, ...]
    bias: np.ndarray

    @property
    def dim(self) -> int:
        return self.bias.shape[0]


@dataclass(frozen=True, eq=False)
class ReluNode:
    parent: int
    dim: int


Node = InputNode | AffineNode | ReluNode


@dataclass(frozen=True, eq=False)
class ExprGraph:
    nodes: tuple[Node, ...]
    input_dim: int
    outputs: dict  # name -> (node_id, row)
    output_names: tuple[str, ...]

    def output_index(self, name: str) -> int:
        return self.output_names.index(name)

    def evaluate(self, points) -> np.ndarray:
        """Concrete evaluation; returns (N, n_outputs) for an (N, d) batch."""
        pts = np.asarray(points, dtype=np.float64)
        squeeze = pts.ndim == 1
        if squeeze:
            pts = pts[None, :]
        if pts.shape[1] != self.input_dim:
            raise ValueError(f"input dim {pts.shape[1]} != graph input {self.input_dim}")
        values: list[np.ndarray] = []
        for node in self.nodes:
            if isinstance(node, InputNode):
                values.append(pts)
            elif isinstance(node, AffineNode):
                acc = np.broadcast_to(node.bias, (pts.shape[0], node.dim)).copy()
                for pid, mat in zip(node.parents, node.mats):
                    acc += values[pid] @ mat.T
                values.append(acc)
            else:
                values.append(np.maximum(values[node.parent], 0.0))
        out = np.empty((pts.shape[0], len(self.output_names)))
        for k, name in enumerate(self.output_names):
            nid, row = self.outputs[name]
            out[:, k] = values[nid][:, row]
        return out[0] if squeeze else out


class GraphBuilder:
    """Constructs an ExprGraph; all helpers return node ids."""

    def __init__(self, input_dim: int):
        self._nodes: list[Node] = [InputNode(input_dim)]
        self._dims: list[int] = [input_dim]
        self._outputs: dict[str, tuple[int, int]] = {}
        self._output_names: list[str] = []
        self.input = 0

    def dim(self, node: int) -> int:
        return self._dims[node]

    def affine(self, terms: list[tuple[int, np.ndarray]], bias=None) -> int:
        """terms are (parent, matrix) pairs; matrices are (out_dim, parent_dim)."""
        if not terms:
            raise ValueError("affine node needs at least one parent")
        mats = []
        parents = []
        out_dim = None
        for pid, mat in terms:
            m = np.atleast_2d(np.asarray(mat, dtype=np.float64))
            if m.shape[1] != self._dims[pid]:
                raise ValueError(f"matrix columns {m.shape[1]} != parent dim {self._dims[pid]}")
            if out_dim is None:
                out_dim = m.shape[0]
            elif m.shape[0] != out_dim:
                raise ValueError("all matrices must agree on output dimension")
            m.flags.writeable = False
            mats.append(m)
            parents.append(pid)
        b = np.zeros(out_dim) if bias is None else np.asarray(bias, dtype=np.float64).reshape(out_dim)
        b.flags.writeable = False
        self._nodes.append(AffineNode(tuple(parents), tuple(mats), b))
        self._dims.append(out_dim)
        return len(self._nodes) - 1

    def relu(self, parent: int) -> int:
        self._nodes.append(ReluNode(parent, self._dims[parent]))
        self._dims.append(self._dims[parent])
        return len(self._nodes) - 1

    # -- sugar, all reducible to affine/relu ---------------------------------

    def select(self, parent: int, rows) -> int:
        rows = list(rows)
        mat = np.zeros((len(rows), self._dims[parent]))
        for i, r in enumerate(rows):
            mat[i, r] = 1.0
        return self.affine([(parent, mat)])

    def scale(self, parent: int, factor: float, offset=None) -> int:
        d = self._dims[parent]
        return self.affine([(parent, factor * np.eye(d))], offset)

    def add(self, a: int, b: int, coeff_a: float = 1.0, coeff_b: float = 1.0, bias=None) -> int:
        da, db = self._dims[a], self._dims[b]
        if da != db:
            raise ValueError("add needs equal dimensions")
        return self.affine([(a, coeff_a * np.eye(da)), (b, coeff_b * np.eye(db))], bias)

    def abs(self, parent: int) -> int:
        """|z| = relu(z) + relu(-z), componentwise."""
        d = self._dims[parent]
        pos = self.relu(parent)
        neg = self.relu(self.affine([(parent, -np.eye(d))]))
        return self.add(pos, neg)

    def clip(self, parent: int, lo: float, hi: float) -> int:
        """Componentwise clamp to [lo, hi] via two ReLU kinks."""
        if not lo < hi:
            raise ValueError("clip needs lo < hi")
        d = self._dims[parent]
        shifted = self.affine([(parent, np.eye(d))], -lo * np.ones(d))  # z - lo
        r1 = self.relu(shifted)
        r2 = self.relu(self.affine([(r1, np.eye(d))], -(hi - lo) * np.ones(d)))
        return self.affine([(r1, np.eye(d)), (r2, -np.eye(d))], lo * np.ones(d))

    def max_pair(self, a: int, b: int) -> int:
        """max(a, b) = a + relu(b - a), componentwise."""
        gap = self.relu(self.add(b, a, 1.0, -1.0))
        return self.add(a, gap)

    def max_reduce(self, parent: int) -> int:
        """Scalar maximum over the components of a vector node."""
        d = self._dims[parent]
        acc = self.select(parent, [0])
        for j in range(1, d):
            acc = self.max_pair(acc, self.select(parent, [j]))
        return acc

    def min_pair(self, a: int, b: int) -> int:
        """min(a, b) = -max(-a, -b)."""
        na = self.scale(a, -1.0)
        nb = self.scale(b, -1.0)
        return self.scale(self.max_pair(na, nb), -1.0)

    def concat(self, parts: list[int]) -> int:
        total = sum(self._dims[p] for p in parts)
        terms = []
        offset = 0
        for p in parts:
            d = self._dims[p]
            mat = np.zeros((total, d))
            mat[offset : offset + d] = np.eye(d)
            terms.append((p, mat))
            offset += d
        return self.affine(terms)

    def mlp(self, parent: int, net: Mlp) -> int:
        """Inline a ReLU MLP applied to the parent node; returns the linear output."""
        if self._dims[parent] != net.input_size:
            raise ValueError(
                f"network expects input {net.input_size}, parent has dim {self._dims[parent]}"
            )
        h = parent
        last = len(net.weights) - 1
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            h = self.affine([(h, w)], b)
            if i != last:
                h = self.relu(h)
        return h

    # -- outputs --------------------------------------------------------------

    def add_output(self, name: str, node: int, row: int = 0) -> str:
        if name in self._outputs:
            raise ValueError(f"duplicate output name {name!r}")
        if not 0 <= row < self._dims[node]:
            raise ValueError(f"row {row} out of range for node of dim {self._dims[node]}")
        self._outputs[name] = (node, row)
        self._output_names.append(name)
        return name

    def build(self) -> ExprGraph:
        if not self._outputs:
            raise ValueError("graph has no outputs")
        return ExprGraph(
            nodes=tuple(self._nodes),
            input_dim=self._dims[0],
            outputs=dict(self._outputs),
            output_names=tuple(self._output_names),
        )
