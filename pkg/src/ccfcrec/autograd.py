"""Reverse-mode differentiation over the small set of array primitives the model needs.

A :class:`Tape` records primitive applications eagerly (values are computed as
they are recorded) and :meth:`Tape.backward` replays the records in reverse to
produce a :class:`GradBag`.  Gradients flowing into embedding tables through
:meth:`Tape.lookup` are kept as coalesced sparse rows; everything else is dense.

Everything runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""

    def __init__(self, primitive: str, *shapes):
        shape_txt = ", ".join(str(s) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {shape_txt}")
        self.primitive = primitive
        self.shapes = shapes


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


@dataclass
class GradBag:
    """Gradients keyed by parameter name.

    ``dense`` maps a name to a full-shape array.  ``sparse_rows`` maps a name to
    ``(rows, values)`` where ``rows`` are unique, sorted row indices and
    ``values[i]`` is the gradient of row ``rows[i]``.  Absent names are zero.
    """

    dense: dict[str, np.ndarray] = field(default_factory=dict)
    sparse_rows: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def names(self) -> set[str]:
        return set(self.dense) | set(self.sparse_rows)

    def __contains__(self, name):
        return name in self.dense or name in self.sparse_rows

    def add_dense(self, name: str, grad: np.ndarray) -> None:
        if name in self.dense:
            self.dense[name] = self.dense[name] + grad
        else:
            self.dense[name] = np.array(grad, dtype=np.float64, copy=True)

    def add_rows(self, name: str, rows: np.ndarray, values: np.ndarray) -> None:
        if name in self.sparse_rows:
            old_rows, old_vals = self.sparse_rows[name]
            rows = np.concatenate([old_rows, rows])
            values = np.concatenate([old_vals, values])
        self.sparse_rows[name] = coalesce_rows(rows, values)

    def merge(self, other: "GradBag") -> "GradBag":
        """Return the sum of two bags (used to combine worker shards)."""
        out = GradBag()
        for bag in (self, other):
            for name, g in bag.dense.items():
                out.add_dense(name, g)
            for name, (rows, vals) in bag.sparse_rows.items():
                out.add_rows(name, rows, vals)
        return out

    def scaled(self, alpha: float) -> "GradBag":
        return GradBag(
            dense={k: alpha * v for k, v in self.dense.items()},
            sparse_rows={k: (r, alpha * v) for k, (r, v) in self.sparse_rows.items()},
        )

    def to_dense(self, name: str, shape) -> np.ndarray:
        """Full gradient for ``name`` with sparse rows scattered in."""
        out = np.zeros(shape, dtype=np.float64)
        if name in self.dense:
            out += self.dense[name]
        if name in self.sparse_rows:
            rows, vals = self.sparse_rows[name]
            out[rows] += vals
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.dense.values()) and all(
            np.all(np.isfinite(v)) for _, v in self.sparse_rows.values()
        )


def coalesce_rows(rows: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum duplicate row indices; returns sorted unique rows."""
    rows = np.asarray(rows, dtype=np.int64)
    uniq, inv = np.unique(rows, return_inverse=True)
    if len(uniq) == len(rows) and np.all(rows[:-1] < rows[1:]):
        return rows, np.asarray(values, dtype=np.float64)
    out = np.zeros((len(uniq),) + values.shape[1:], dtype=np.float64)
    np.add.at(out, inv, values)
    return uniq, out


def _segment_matrix(segments, cols, n_out, n_cols):
    data = np.ones(len(cols), dtype=np.float64)
    return sp.csr_matrix((data, (segments, cols)), shape=(n_out, n_cols))


def _matmul_sparse(m, x):
    # csr @ ndarray for 1-d and 2-d right-hand sides
    if x.ndim == 1:
        return np.asarray(m @ x).reshape(-1)
    return np.asarray(m @ x.reshape(x.shape[0], -1)).reshape((m.shape[0],) + x.shape[1:])


class Tape:
    """Records primitive applications against a fixed parameter mapping.

    Parameters are referenced by name.  ``param`` exposes a parameter as a
    dense leaf; ``lookup`` with a parameter name gathers rows and routes its
    adjoint into sparse rows.
    """

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params = params if params is not None else {}
        self.nodes: list[Node] = []
        self._backward: list[Callable | None] = []
        self._parents: list[tuple[int, ...]] = []
        self.leaky_inputs: list[np.ndarray] = []

    # -- recording helpers -------------------------------------------------

    def _record(self, value, parents=(), backward=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), value)
        self.nodes.append(node)
        self._parents.append(tuple(p.index for p in parents))
        self._backward.append(backward)
        return node

    def _check(self, *nodes):
        for n in nodes:
            if not isinstance(n, Node) or n.tape is not self:
                raise TypeError("operands must be nodes recorded on this tape")

    def constant(self, value) -> Node:
        return self._record(value)

    def param(self, name: str) -> Node:
        """Dense leaf for parameter ``name``."""
        value = self.params[name]
        node = self._record(value)
        node_param = name

        def back(g, bag, adj):
            bag.add_dense(node_param, g)

        self._backward[node.index] = back
        return node

    # -- primitives --------------------------------------------------------

    def lookup(self, source, indices, segments=None, n_out=None) -> Node:
        """Gather rows of ``source`` and optionally sum them per segment.

        ``source`` is a parameter name (adjoint goes to sparse rows) or a node
        (adjoint is dense).  With ``segments``, output row ``s`` is the sum of
        ``source[indices[j]]`` over all ``j`` with ``segments[j] == s``; empty
        segments give zero rows.
        """
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if isinstance(source, str):
            table = self.params[source]
            parent = ()
        else:
            self._check(source)
            table = source.value
            parent = (source,)
        if table.ndim == 0:
            raise ShapeError("lookup", table.shape)
        n_rows = table.shape[0]
        if len(indices) and (indices.min() < 0 or indices.max() >= n_rows):
            raise IndexError(f"lookup: index out of range for {n_rows} rows")

        if segments is None:
            value = table[indices]
            uniq, inv = np.unique(indices, return_inverse=True)
            scatter = _segment_matrix(inv, np.arange(len(indices)), len(uniq), len(indices))
        else:
            segments = np.asarray(segments, dtype=np.int64).reshape(-1)
            if segments.shape != indices.shape:
                raise ShapeError("lookup", indices.shape, segments.shape)
            if n_out is None:
                n_out = int(segments.max()) + 1 if len(segments) else 0
            if len(segments) and (segments.min() < 0 or segments.max() >= n_out):
                raise IndexError("lookup: segment id out of range")
            uniq, inv = np.unique(indices, return_inverse=True)
            gather = _segment_matrix(segments, inv, n_out, len(uniq))
            value = _matmul_sparse(gather, table[uniq])
            scatter = gather.T.tocsr()

        def back(g, bag, adj):
            rows_grad = _matmul_sparse(scatter, g)
            if isinstance(source, str):
                bag.add_rows(source, uniq, rows_grad)
            else:
                full = np.zeros_like(table)
                full[uniq] += rows_grad
                adj(source, full)

        return self._record(value, parent, back)

    def affine(self, x: Node, weight: Node, bias: Node | None = None) -> Node:
        """Row-wise ``x @ weight.T + bias`` with weight shaped (out, in)."""
        self._check(x, weight)
        if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[1]:
            raise ShapeError("affine", x.shape, weight.shape)
        value = x.value @ weight.value.T
        parents = [x, weight]
        if bias is not None:
            self._check(bias)
            if bias.shape != (weight.shape[0],):
                raise ShapeError("affine", x.shape, weight.shape, bias.shape)
            value = value + bias.value
            parents.append(bias)

        def back(g, bag, adj):
            adj(x, g @ weight.value)
            adj(weight, g.T @ x.value)
            if bias is not None:
                adj(bias, g.sum(axis=0))

        return self._record(value, parents, back)

    def leaky_relu(self, x: Node, slope: float = 0.01) -> Node:
        self._check(x)
        self.leaky_inputs.append(x.value)
        # at exactly 0 the positive branch (slope 1) is used
        mask = np.where(x.value >= 0, 1.0, slope)
        value = x.value * mask

        def back(g, bag, adj):
            adj(x, g * mask)

        return self._record(value, (x,), back)

    def concat(self, parts: list[Node], axis: int = -1) -> Node:
        for p in parts:
            self._check(p)
        try:
            value = np.concatenate([p.value for p in parts], axis=axis)
        except ValueError:
            raise ShapeError("concat", *[p.shape for p in parts]) from None
        sizes = [p.value.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def back(g, bag, adj):
            for p, gp in zip(parts, np.split(g, splits, axis=axis)):
                adj(p, gp)

        return self._record(value, parts, back)

    def inner(self, a: Node, b: Node) -> Node:
        """Inner product along the last axis."""
        self._check(a, b)
        if a.shape != b.shape or a.value.ndim == 0:
            raise ShapeError("inner", a.shape, b.shape)
        value = np.einsum("...i,...i->...", a.value, b.value)

        def back(g, bag, adj):
            g = np.asarray(g)[..., None]
            adj(a, g * b.value)
            adj(b, g * a.value)

        return self._record(value, (a, b), back)

    def log_sigmoid(self, x: Node) -> Node:
        self._check(x)
        v = x.value
        value = -(np.maximum(-v, 0.0) + np.log1p(np.exp(-np.abs(v))))

        def back(g, bag, adj):
            # d/dx log sigma(x) = sigma(-x)
            adj(x, g * _sigmoid(-v))

        return self._record(value, (x,), back)

    def log_sum_exp(self, x: Node, segments=None, n_out=None) -> Node:
        """Max-shifted log-sum-exp.

        Without ``segments`` reduces the last axis.  With ``segments`` (1-d
        input only) reduces each group of entries sharing a segment id.
        """
        self._check(x)
        v = x.value
        if segments is None:
            if v.ndim == 0:
                raise ShapeError("log_sum_exp", v.shape)
            shift = v.max(axis=-1, keepdims=True)
            e = np.exp(v - shift)
            s = e.sum(axis=-1, keepdims=True)
            value = (shift + np.log(s))[..., 0]
            soft = e / s

            def back(g, bag, adj):
                adj(x, np.asarray(g)[..., None] * soft)

            return self._record(value, (x,), back)

        segments = np.asarray(segments, dtype=np.int64)
        if v.ndim != 1 or segments.shape != v.shape:
            raise ShapeError("log_sum_exp", v.shape, segments.shape)
        if n_out is None:
            n_out = int(segments.max()) + 1
        shift = np.full(n_out, -np.inf)
        np.maximum.at(shift, segments, v)
        e = np.exp(v - shift[segments])
        s = np.bincount(segments, weights=e, minlength=n_out)
        value = shift + np.log(s)
        soft = e / s[segments]

        def back(g, bag, adj):
            adj(x, g[segments] * soft)

        return self._record(value, (x,), back)

    def add(self, a: Node, b: Node) -> Node:
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError("add", a.shape, b.shape)

        def back(g, bag, adj):
            adj(a, g)
            adj(b, g)

        return self._record(a.value + b.value, (a, b), back)

    def scale(self, x: Node, alpha: float) -> Node:
        """Multiply by a constant scalar."""
        self._check(x)
        alpha = float(alpha)

        def back(g, bag, adj):
            adj(x, alpha * g)

        return self._record(alpha * x.value, (x,), back)

    def sum(self, x: Node) -> Node:
        self._check(x)

        def back(g, bag, adj):
            adj(x, np.broadcast_to(g, x.shape))

        return self._record(x.value.sum(), (x,), back)

    # -- reverse sweep -----------------------------------------------------

    def backward(self, root: Node, seed: float = 1.0) -> GradBag:
        """Gradient of scalar ``root`` w.r.t. every parameter it touches."""
        self._check(root)
        if root.value.shape != ():
            raise ShapeError("backward (root must be scalar)", root.shape)
        adjoints: dict[int, np.ndarray] = {root.index: np.asarray(seed, dtype=np.float64)}

        def adj(node, g):
            i = node.index
            if i in adjoints:
                adjoints[i] = adjoints[i] + g
            else:
                adjoints[i] = np.array(g, dtype=np.float64, copy=True)

        bag = GradBag()
        for i in range(root.index, -1, -1):
            g = adjoints.pop(i, None)
            if g is None or self._backward[i] is None:
                continue
            self._backward[i](g, bag, adj)
        return bag


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple[str, tuple] | None = None


def gradient_check(
    loss_builder: Callable[[Mapping[str, np.ndarray]], tuple[Tape, Node]],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    n_coords: int = 200,
    rng: np.random.Generator | None = None,
    kink_factor: float = 10.0,
) -> GradCheckResult:
    """Compare tape gradients with central differences at sampled coordinates.

    ``loss_builder(params)`` must return ``(tape, scalar_node)`` and be a pure
    function of ``params``.  Coordinates are drawn among entries with a
    recorded gradient (touched rows for sparse tables).  A coordinate is
    skipped when moving it shifts a leaky-relu input that sits within
    ``kink_factor * h`` of zero.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    tape, root = loss_builder(params)
    base = float(root.value)
    if not np.isfinite(base):
        raise FloatingPointError("gradient_check: non-finite loss")
    bag = tape.backward(root)
    base_leaky = [np.array(x, copy=True) for x in tape.leaky_inputs]

    candidates = []
    for name in sorted(bag.names()):
        shape = params[name].shape
        if name in bag.sparse_rows:
            rows = bag.sparse_rows[name][0]
            per_row = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            for r in rows:
                for k in range(per_row):
                    candidates.append((name, (int(r),) + np.unravel_index(k, shape[1:])))
        if name in bag.dense:
            for flat in range(params[name].size):
                candidates.append((name, np.unravel_index(flat, shape)))
    candidates = list(dict.fromkeys((n, tuple(int(i) for i in idx)) for n, idx in candidates))
    if not candidates:
        return GradCheckResult(0.0, 0, 0)
    pick = rng.choice(len(candidates), size=min(n_coords, len(candidates)), replace=False)

    worst, worst_err, checked, skipped = None, 0.0, 0, 0
    for j in sorted(pick):
        name, idx = candidates[j]
        analytic = bag.to_dense(name, params[name].shape)[idx]
        orig = params[name][idx]
        evals, leaky = [], []
        for step in (h, -h):
            params[name][idx] = orig + step
            t, r = loss_builder(params)
            evals.append(float(r.value))
            # leaf values alias params, so snapshot before restoring
            leaky.append([np.array(x, copy=True) for x in t.leaky_inputs])
        params[name][idx] = orig
        if not all(np.isfinite(evals)):
            raise FloatingPointError("gradient_check: non-finite loss under perturbation")
        if _near_kink(base_leaky, leaky, kink_factor * h):
            skipped += 1
            continue
        cd = (evals[0] - evals[1]) / (2 * h)
        err = abs(analytic - cd) / max(abs(analytic), abs(cd), 1e-12)
        checked += 1
        if err > worst_err:
            worst_err, worst = err, (name, idx)
    return GradCheckResult(worst_err, checked, skipped, worst)


def _near_kink(base, perturbed, guard):
    for k, x0 in enumerate(base):
        moved = np.zeros(x0.shape, dtype=bool)
        for run in perturbed:
            if k < len(run) and run[k].shape == x0.shape:
                moved |= run[k] != x0
        if np.any(moved & (np.abs(x0) < guard)):
            return True
    return False
