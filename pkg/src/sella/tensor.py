"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (the mini language model, the collaborative model,
the projection stacks) runs on this substrate. Arrays are 64-bit floats in
row-major order, immutable once wrapped in a Tensor, and every primitive
checks its output for NaN/Inf so numerical failures surface at the op that
produced them instead of propagating.

Shape rules per primitive (the only broadcasting allowed anywhere is the
bias-row form of ``add``):

    matmul(a, b)            (m,k) @ (k,n) -> (m,n)
    add(a, b)               same shape, or (m,n) + (n,) bias row -> (m,n)
    mul(a, b)               elementwise, same shape
    scale(a, c)             c * a for a Python float c
    row_softmax(a)          softmax along the last axis of a 1-D or 2-D array
    layer_norm(a)           per-row (x - mean) / sqrt(var + 1e-5), no affine
    gelu(a)                 tanh-approximation GELU, elementwise
    embedding_lookup(t, ix) rows ix of a (V,d) table -> (len(ix), d)
    transpose(a)            2-D transpose
    concat_rows(xs...)      stack 2-D blocks with equal column counts
    sum(a) / mean(a)        full reduction to a () scalar
    sigmoid(a), exp(a)      elementwise
    log(a)                  elementwise, requires strictly positive input
    cosine_similarity(a, b) (m,d),(n,d) -> (m,n); or two 1-D vectors -> ()
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

PRIMITIVE_OPS = frozenset({
    "matmul", "add", "mul", "scale", "row_softmax", "layer_norm", "gelu",
    "embedding_lookup", "transpose", "concat_rows", "sum", "mean",
    "sigmoid", "log", "exp", "cosine_similarity",
})


class TensorError(Exception):
    """Base error for tensor-core contract violations."""


class ShapeError(TensorError):
    """Input shapes do not conform to the primitive's shape rule."""


class NonFiniteError(TensorError):
    """A primitive produced (or was handed) NaN or Inf values."""


class IndexError_(TensorError):
    """An embedding lookup index fell outside the table."""


class Tensor:
    """Immutable dense array: a shape and contiguous float64 data.

    Wraps a numpy array as a read-only view. Callers that hand in arrays
    they keep mutating (e.g. optimizer-owned parameters) must not mutate
    them while a graph referencing the tensor is still in use.
    """

    __slots__ = ("data", "shape")

    def __init__(self, array) -> None:
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor: non-finite values in data")
        view = arr.view()
        view.setflags(write=False)
        self.data = view
        self.shape = tuple(int(d) for d in arr.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the underlying array."""
        return np.array(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, not scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


# ---------------------------------------------------------------------------
# forward rules


def _check_finite(op: str, out: np.ndarray) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite values in output")
    return out


def _fw_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b


def _fw_add(a, b):
    if a.shape == b.shape:
        return a + b
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return a + b[None, :]
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")


def _fw_mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return a * b


def _fw_scale(a, c):
    return c * a


def _row_axis_check(op, a):
    if a.ndim not in (1, 2):
        raise ShapeError(f"{op}: expected 1-D or 2-D input, got shape {a.shape}")


def _fw_row_softmax(a):
    _row_axis_check("row_softmax", a)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _fw_layer_norm(a):
    _row_axis_check("layer_norm", a)
    mean = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    return (a - mean) / np.sqrt(var + LAYER_NORM_EPS)


def _fw_gelu(a):
    inner = _GELU_C * (a + 0.044715 * a**3)
    return 0.5 * a * (1.0 + np.tanh(inner))


def _fw_embedding_lookup(table, indices):
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    ix = np.asarray(indices, dtype=np.int64)
    if ix.ndim != 1:
        raise ShapeError("embedding_lookup: indices must be a flat sequence")
    if ix.size and (ix.min() < 0 or ix.max() >= table.shape[0]):
        raise IndexError_(
            f"embedding_lookup: index out of bounds for table with "
            f"{table.shape[0]} rows (got min {ix.min()}, max {ix.max()})"
        )
    return table[ix]


def _fw_transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got shape {a.shape}")
    return a.T.copy()


def _fw_concat_rows(*parts):
    if not parts:
        raise ShapeError("concat_rows: needs at least one input")
    cols = None
    for p in parts:
        if p.ndim != 2:
            raise ShapeError(f"concat_rows: expected 2-D blocks, got shape {p.shape}")
        if cols is None:
            cols = p.shape[1]
        elif p.shape[1] != cols:
            raise ShapeError(
                f"concat_rows: column counts differ ({cols} vs {p.shape[1]})")
    return np.concatenate(parts, axis=0)


def _fw_sum(a):
    return np.asarray(a.sum())


def _fw_mean(a):
    return np.asarray(a.mean())


def _fw_sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _fw_log(a):
    if (a <= 0).any():
        raise TensorError("log: non-positive input")
    return np.log(a)


def _fw_exp(a):
    return np.exp(a)


def _cosine_norms(op, a):
    norms = np.sqrt((a * a).sum(axis=1))
    if (norms == 0).any():
        raise TensorError(f"{op}: zero-norm vector (degenerate embedding)")
    return norms


def _fw_cosine_similarity(a, b):
    vector_mode = a.ndim == 1 and b.ndim == 1
    if vector_mode:
        a = a[None, :]
        b = b[None, :]
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"cosine_similarity: shapes {a.shape} and {b.shape} do not conform")
    na = _cosine_norms("cosine_similarity", a)
    nb = _cosine_norms("cosine_similarity", b)
    out = (a / na[:, None]) @ (b / nb[:, None]).T
    return np.asarray(out[0, 0]) if vector_mode else out


_FORWARD = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "mul": _fw_mul,
    "row_softmax": _fw_row_softmax,
    "layer_norm": _fw_layer_norm,
    "gelu": _fw_gelu,
    "transpose": _fw_transpose,
    "concat_rows": _fw_concat_rows,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "sigmoid": _fw_sigmoid,
    "log": _fw_log,
    "exp": _fw_exp,
    "cosine_similarity": _fw_cosine_similarity,
}


def primitive_forward(op: str, *inputs: Tensor, **extra) -> Tensor:
    """Apply a single primitive to Tensor inputs, outside any graph."""
    if op not in PRIMITIVE_OPS:
        raise TensorError(f"unknown primitive: {op!r}")
    arrays = [t.data for t in inputs]
    if op == "scale":
        out = _fw_scale(arrays[0], float(extra["c"]))
    elif op == "embedding_lookup":
        out = _fw_embedding_lookup(arrays[0], extra["indices"])
    else:
        out = _FORWARD[op](*arrays)
    return Tensor(_check_finite(op, out))


# ---------------------------------------------------------------------------
# backward rules: vjp(inputs, out, grad, extra) -> one gradient per input


def _bw_matmul(ins, out, g, extra):
    a, b = ins
    return [g @ b.T, a.T @ g]


def _bw_add(ins, out, g, extra):
    a, b = ins
    if a.shape == b.shape:
        return [g, g]
    return [g, g.sum(axis=0)]  # bias-row form


def _bw_mul(ins, out, g, extra):
    a, b = ins
    return [g * b, g * a]


def _bw_scale(ins, out, g, extra):
    return [extra["c"] * g]


def _bw_row_softmax(ins, out, g, extra):
    dot = (g * out).sum(axis=-1, keepdims=True)
    return [out * (g - dot)]


def _bw_layer_norm(ins, out, g, extra):
    (a,) = ins
    inv = 1.0 / np.sqrt(a.var(axis=-1, keepdims=True) + LAYER_NORM_EPS)
    gm = g.mean(axis=-1, keepdims=True)
    gx = (g * out).mean(axis=-1, keepdims=True)
    return [inv * (g - gm - out * gx)]


def _bw_gelu(ins, out, g, extra):
    (a,) = ins
    inner = _GELU_C * (a + 0.044715 * a**3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * a**2)
    return [g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner)]


def _bw_embedding_lookup(ins, out, g, extra):
    (table,) = ins
    gt = np.zeros_like(table)
    np.add.at(gt, np.asarray(extra["indices"], dtype=np.int64), g)
    return [gt]


def _bw_transpose(ins, out, g, extra):
    return [g.T.copy()]


def _bw_concat_rows(ins, out, g, extra):
    grads, at = [], 0
    for p in ins:
        grads.append(g[at:at + p.shape[0]])
        at += p.shape[0]
    return grads


def _bw_sum(ins, out, g, extra):
    return [np.full(ins[0].shape, float(g))]


def _bw_mean(ins, out, g, extra):
    return [np.full(ins[0].shape, float(g) / ins[0].size)]


def _bw_sigmoid(ins, out, g, extra):
    return [g * out * (1.0 - out)]


def _bw_log(ins, out, g, extra):
    return [g / ins[0]]


def _bw_exp(ins, out, g, extra):
    return [g * out]


def _bw_cosine_similarity(ins, out, g, extra):
    a, b = ins
    vector_mode = a.ndim == 1
    if vector_mode:
        a, b = a[None, :], b[None, :]
        out = np.asarray(out).reshape(1, 1)
        g = np.asarray(g).reshape(1, 1)
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    ah = a / na[:, None]
    bh = b / nb[:, None]
    ga = (g @ bh - (g * out).sum(axis=1, keepdims=True) * ah) / na[:, None]
    gb = (g.T @ ah - (g * out).sum(axis=0)[:, None] * bh) / nb[:, None]
    if vector_mode:
        return [ga[0], gb[0]]
    return [ga, gb]


_BACKWARD = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "row_softmax": _bw_row_softmax,
    "layer_norm": _bw_layer_norm,
    "gelu": _bw_gelu,
    "embedding_lookup": _bw_embedding_lookup,
    "transpose": _bw_transpose,
    "concat_rows": _bw_concat_rows,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "sigmoid": _bw_sigmoid,
    "log": _bw_log,
    "exp": _bw_exp,
    "cosine_similarity": _bw_cosine_similarity,
}


class Node:
    """One graph entry: an op tag, its input node ids, and the output Tensor.

    Leaves carry op "leaf" (or "param" for trainable leaves) and no inputs.
    """

    __slots__ = ("nid", "op", "input_ids", "out", "extra")

    def __init__(self, nid: int, op: str, input_ids: tuple[int, ...],
                 out: Tensor, extra: dict | None = None) -> None:
        self.nid = nid
        self.op = op
        self.input_ids = input_ids
        self.out = out
        self.extra = extra or {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.out.shape

    def __repr__(self) -> str:
        return f"Node({self.nid}, {self.op}, shape={self.out.shape})"


class Graph:
    """Computation tape. Nodes are appended in execution order, so the node
    list is topologically sorted by construction and the backward pass is a
    single reverse sweep. A graph is single-owner while being built; once
    built it is only read, so independent graphs can run concurrently.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.param_ids: list[int] = []

    # -- construction -------------------------------------------------------

    def _append(self, op: str, input_ids: tuple[int, ...], out: Tensor,
                extra: dict | None = None) -> Node:
        node = Node(len(self.nodes), op, input_ids, out, extra)
        self.nodes.append(node)
        return node

    def leaf(self, array, param: bool = False) -> Node:
        """Add an input tensor; param=True marks it trainable."""
        t = array if isinstance(array, Tensor) else Tensor(array)
        node = self._append("param" if param else "leaf", (), t)
        if param:
            self.param_ids.append(node.nid)
        return node

    def _owned(self, node: Node) -> Node:
        if node.nid >= len(self.nodes) or self.nodes[node.nid] is not node:
            raise TensorError("node does not belong to this graph")
        return node

    def apply(self, op: str, *inputs: Node, **extra) -> Node:
        """Record one primitive application and return its output node."""
        if op not in PRIMITIVE_OPS:
            raise TensorError(f"unknown primitive: {op!r}")
        arrays = [self._owned(n).out.data for n in inputs]
        if op == "scale":
            extra = {"c": float(extra["c"])}
            out = _fw_scale(arrays[0], extra["c"])
        elif op == "embedding_lookup":
            extra = {"indices": tuple(int(i) for i in extra["indices"])}
            out = _fw_embedding_lookup(arrays[0], extra["indices"])
        else:
            out = _FORWARD[op](*arrays)
        _check_finite(op, out)
        return self._append(op, tuple(n.nid for n in inputs), Tensor(out), extra)

    # thin wrappers, one per primitive

    def matmul(self, a: Node, b: Node) -> Node:
        return self.apply("matmul", a, b)

    def add(self, a: Node, b: Node) -> Node:
        return self.apply("add", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        return self.apply("mul", a, b)

    def scale(self, a: Node, c: float) -> Node:
        return self.apply("scale", a, c=c)

    def row_softmax(self, a: Node) -> Node:
        return self.apply("row_softmax", a)

    def layer_norm(self, a: Node) -> Node:
        return self.apply("layer_norm", a)

    def gelu(self, a: Node) -> Node:
        return self.apply("gelu", a)

    def embedding_lookup(self, table: Node, indices: Sequence[int]) -> Node:
        return self.apply("embedding_lookup", table, indices=indices)

    def transpose(self, a: Node) -> Node:
        return self.apply("transpose", a)

    def concat_rows(self, *parts: Node) -> Node:
        return self.apply("concat_rows", *parts)

    def sum(self, a: Node) -> Node:
        return self.apply("sum", a)

    def mean(self, a: Node) -> Node:
        return self.apply("mean", a)

    def sigmoid(self, a: Node) -> Node:
        return self.apply("sigmoid", a)

    def log(self, a: Node) -> Node:
        return self.apply("log", a)

    def exp(self, a: Node) -> Node:
        return self.apply("exp", a)

    def cosine_similarity(self, a: Node, b: Node) -> Node:
        return self.apply("cosine_similarity", a, b)

    # -- differentiation ----------------------------------------------------

    def backward(self, loss: Node) -> dict[int, Tensor]:
        """Reverse-mode sweep from a scalar loss.

        Returns a map from parameter node id to its gradient tensor.
        Parameters with no path to the loss get zero gradients.
        """
        self._owned(loss)
        if loss.out.size != 1:
            raise TensorError(
                f"backward: loss must be scalar-shaped, got {loss.out.shape}")
        grads: dict[int, np.ndarray] = {loss.nid: np.ones(loss.out.shape)}
        for node in reversed(self.nodes[:loss.nid + 1]):
            g = grads.pop(node.nid, None)
            if g is None or node.op in ("leaf", "param"):
                if g is not None and node.op == "param":
                    grads[node.nid] = g
                continue
            ins = [self.nodes[i].out.data for i in node.input_ids]
            for nid, gin in zip(node.input_ids,
                                _BACKWARD[node.op](ins, node.out.data, g,
                                                   node.extra)):
                if nid in grads:
                    grads[nid] = grads[nid] + gin
                else:
                    grads[nid] = gin
        out: dict[int, Tensor] = {}
        for pid in self.param_ids:
            g = grads.get(pid)
            out[pid] = Tensor(g if g is not None else
                              np.zeros(self.nodes[pid].out.shape))
        return out

    def recompute(self, target: Node, overrides: dict[int, np.ndarray]) -> np.ndarray:
        """Re-evaluate the graph up to ``target`` with some leaves replaced.

        Used by grad_check for finite differences; the graph itself is not
        mutated.
        """
        self._owned(target)
        values: dict[int, np.ndarray] = {}
        for node in self.nodes[:target.nid + 1]:
            if node.op in ("leaf", "param"):
                values[node.nid] = overrides.get(node.nid, node.out.data)
            else:
                ins = [values[i] for i in node.input_ids]
                if node.op == "scale":
                    values[node.nid] = _fw_scale(ins[0], node.extra["c"])
                elif node.op == "embedding_lookup":
                    values[node.nid] = _fw_embedding_lookup(
                        ins[0], node.extra["indices"])
                else:
                    values[node.nid] = _FORWARD[node.op](*ins)
        return values[target.nid]


def grad_check(graph: Graph, loss: Node, parameter: Node,
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per entry is |analytic - numeric| / max(1, |analytic|); the max
    over the parameter's entries is returned.
    """
    if step <= 0:
        raise TensorError("grad_check: step must be positive")
    analytic = graph.backward(loss)[parameter.nid].data
    base = parameter.out.numpy()
    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            perturbed = base.copy().reshape(-1)
            perturbed[i] += sign * step
            val = graph.recompute(
                loss, {parameter.nid: perturbed.reshape(base.shape)})
            if sign > 0:
                lp = float(val)
            else:
                lm = float(val)
        numeric = (lp - lm) / (2.0 * step)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# on-disk format: one ascii header line "shape: d0 d1 ...", then raw
# little-endian float64 bytes in row-major order


def tensor_bytes(array) -> bytes:
    """Serialized form of an array: header line plus raw payload.  Equal
    arrays always encode to equal bytes, so this doubles as the comparison
    key for freeze audits."""
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    header = ("shape: " + " ".join(str(d) for d in arr.shape) + "\n")
    return header.encode("ascii") + arr.astype("<f8").tobytes(order="C")


def save_tensor(path, array) -> None:
    with open(path, "wb") as f:
        f.write(tensor_bytes(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = bytearray()
        while True:
            ch = f.read(1)
            if not ch:
                raise TensorError(f"{path}: truncated tensor header")
            if ch == b"\n":
                break
            header.extend(ch)
        fields = header.decode("ascii").split()
        if not fields or fields[0] != "shape:":
            raise TensorError(f"{path}: malformed tensor header")
        shape = tuple(int(d) for d in fields[1:])
        count = 1
        for d in shape:
            count *= d
        data = np.frombuffer(f.read(count * 8), dtype="<f8", count=count)
        return data.astype(np.float64).reshape(shape)
