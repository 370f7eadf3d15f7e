"""Dense tensors with a reverse-mode tape and retained-activation accounting.

Tensors are immutable numpy buffers carrying a subsystem tag. Operations
executed inside an active ComputeGraph are recorded on an append-only tape;
each node saves exactly the tensors its backward pass will need, and the
graph keeps per-tag byte counters of everything saved. Those counters are
the artifact's operationalization of "training memory": a tensor is retained
iff some recorded node whose backward will execute needs it.

Frozen subgraphs (no grad-requiring input anywhere) save nothing, so a fully
frozen forward contributes zero retained bytes by construction.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

TAGS = ("backbone", "adaptation", "head", "data")

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Non-finite values or a failed numeric check."""


class GraphError(RuntimeError):
    """Misuse of the tape (detached loss, non-scalar loss, no active graph)."""


_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Select the element width for newly created tensors (float32/float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported element type {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def default_dtype():
    return _default_dtype


_graph_stack: list["ComputeGraph"] = []
_no_grad_depth = 0


def active_graph() -> Optional["ComputeGraph"]:
    return _graph_stack[-1] if _graph_stack else None


def grad_enabled() -> bool:
    return _no_grad_depth == 0 and bool(_graph_stack)


@contextmanager
def no_grad():
    """Run ops without recording; results are detached leaf tensors."""
    global _no_grad_depth
    _no_grad_depth += 1
    try:
        yield
    finally:
        _no_grad_depth -= 1


class Tensor:
    """Immutable dense array with a subsystem tag and optional node identity."""

    __slots__ = ("_data", "_tag", "_requires_grad", "_tid", "_node")

    _next_id = 0

    def __init__(self, data, tag: str = "data", requires_grad: bool = False,
                 dtype=None, _node: Optional["Node"] = None):
        if tag not in TAGS:
            raise ValueError(f"unknown tag {tag!r}; expected one of {TAGS}")
        if isinstance(data, np.ndarray) and dtype is None:
            arr = data if data.dtype in (np.float32, np.float64) else data.astype(_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        arr.setflags(write=False)
        self._data = arr
        self._tag = tag
        self._requires_grad = bool(requires_grad)
        self._node = _node
        self._tid = Tensor._next_id
        Tensor._next_id += 1

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def nbytes(self) -> int:
        return self._data.nbytes

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def tag(self) -> str:
        return self._tag

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def tid(self) -> int:
        return self._tid

    @property
    def node(self) -> Optional["Node"]:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self._data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self._data

    def detach(self, tag: Optional[str] = None) -> "Tensor":
        """Leaf copy sharing the buffer; drops graph identity and grad flag."""
        return Tensor(self._data, tag=tag or self._tag, requires_grad=False)

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.shape}, tag={self._tag!r}, "
                f"requires_grad={self._requires_grad}, id={self._tid})")

    # thin operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, tag: str = "data", requires_grad: bool = False) -> Tensor:
    return Tensor(data, tag=tag, requires_grad=requires_grad)


def parameter(data, tag: str) -> Tensor:
    return Tensor(data, tag=tag, requires_grad=True)


def constant(data, tag: str = "data") -> Tensor:
    return Tensor(data, tag=tag, requires_grad=False)


def zeros(shape, tag: str = "data", requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), tag=tag, requires_grad=requires_grad)


def ones(shape, tag: str = "data", requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), tag=tag, requires_grad=requires_grad)


class Node:
    """One recorded operation: inputs, saved-for-backward tensors, backward rule."""

    __slots__ = ("nid", "op", "inputs", "saved", "out", "backward_fn", "graph")

    def __init__(self, nid: int, op: str, inputs: tuple[Tensor, ...],
                 saved: tuple[Tensor, ...], out: Tensor,
                 backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]],
                 graph: "ComputeGraph"):
        self.nid = nid
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.out = out
        self.backward_fn = backward_fn
        self.graph = graph


@dataclass
class MemoryLedger:
    """Per-tag byte counts of tensors saved because backward will need them."""

    retained_bytes: dict[str, int] = field(default_factory=lambda: {t: 0 for t in TAGS})
    retained_counts: dict[str, int] = field(default_factory=lambda: {t: 0 for t in TAGS})

    @property
    def total_bytes(self) -> int:
        return sum(self.retained_bytes.values())

    def as_dict(self) -> dict:
        return {
            "retained_bytes": dict(self.retained_bytes),
            "retained_counts": dict(self.retained_counts),
            "total_bytes": self.total_bytes,
        }


class ComputeGraph:
    """Append-only tape; topological order is append order.

    Use as a context manager to make it the active recording target. The
    per-tag retained-byte counters are maintained at record time and count
    each distinct saved tensor once.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._saved_ids: set[int] = set()
        self._retained_bytes: dict[str, int] = {t: 0 for t in TAGS}
        self._retained_counts: dict[str, int] = {t: 0 for t in TAGS}
        self._tag_stack: list[str] = ["data"]
        self._next_nid = 0

    def __enter__(self) -> "ComputeGraph":
        _graph_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _graph_stack.pop()
        assert popped is self

    @contextmanager
    def tag(self, name: str):
        """Attribute tensors created in this scope to the given subsystem."""
        if name not in TAGS:
            raise ValueError(f"unknown tag {name!r}")
        self._tag_stack.append(name)
        try:
            yield
        finally:
            self._tag_stack.pop()

    @property
    def current_tag(self) -> str:
        return self._tag_stack[-1]

    def clear(self) -> None:
        """Drop all nodes and reset every retained-byte counter to zero."""
        self.nodes.clear()
        self._saved_ids.clear()
        self._retained_bytes = {t: 0 for t in TAGS}
        self._retained_counts = {t: 0 for t in TAGS}

    def _register_saved(self, tensors: Iterable[Tensor]) -> None:
        for t in tensors:
            if t.tid in self._saved_ids:
                continue
            self._saved_ids.add(t.tid)
            self._retained_bytes[t.tag] += t.nbytes
            self._retained_counts[t.tag] += 1

    def record(self, op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
               backward_fn, saved: tuple[Tensor, ...]) -> Tensor:
        requires = any(i.requires_grad for i in inputs)
        out = Tensor(out_data, tag=self.current_tag, requires_grad=requires, _node=None)
        node = Node(self._next_nid, op, inputs, saved if requires else (),
                    out, backward_fn if requires else None, self)
        self._next_nid += 1
        out._node = node
        self.nodes.append(node)
        if requires:
            self._register_saved(node.saved)
        return out

    def ledger_report(self) -> MemoryLedger:
        return MemoryLedger(dict(self._retained_bytes), dict(self._retained_counts))

    def backward(self, loss: Tensor) -> "GradientMap":
        """Reverse-mode sweep from a scalar loss recorded on this graph."""
        if loss.node is None or loss.node.graph is not self:
            raise GraphError("loss tensor is not a node of this graph")
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GraphError("detached loss: no grad-requiring ancestor")
        grads: dict[int, np.ndarray] = {loss.tid: np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            if node.backward_fn is None:
                continue
            g_out = grads.get(node.out.tid)
            if g_out is None:
                continue
            in_grads = node.backward_fn(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                acc = grads.get(inp.tid)
                grads[inp.tid] = g if acc is None else acc + g
        by_id = {}
        tensors = {}
        for node in self.nodes:
            for t in node.inputs + (node.out,):
                if t.requires_grad and t.tid in grads and t.tid not in by_id:
                    by_id[t.tid] = Tensor(grads[t.tid], tag=t.tag)
                    tensors[t.tid] = t
        return GradientMap(by_id, tensors)


class GradientMap:
    """Gradients keyed by tensor identity, one entry per grad-requiring tensor."""

    def __init__(self, by_id: dict[int, Tensor], owners: dict[int, Tensor]):
        self._by_id = by_id
        self._owners = owners

    def get(self, t: Tensor) -> Optional[Tensor]:
        return self._by_id.get(t.tid)

    def __contains__(self, t) -> bool:
        tid = t.tid if isinstance(t, Tensor) else int(t)
        return tid in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def tensor_ids(self) -> set[int]:
        return set(self._by_id)

    def items(self):
        return self._by_id.items()

    def owners(self):
        return self._owners.values()


def backward(graph: ComputeGraph, loss: Tensor) -> GradientMap:
    return graph.backward(loss)


def ledger_report(graph: ComputeGraph) -> MemoryLedger:
    return graph.ledger_report()


# --- op plumbing -----------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
          make_backward, needed: tuple[Tensor, ...],
          saves_output: bool = False) -> Tensor:
    """Record the op if grads may flow; otherwise return a detached leaf.

    `needed` lists the tensors the backward closure reads; they are the
    saved-for-backward set and are charged to the ledger. Ops whose backward
    reads their own output (sigmoid, softmax) set `saves_output`.
    """
    g = active_graph()
    if g is None or _no_grad_depth > 0:
        tag = g.current_tag if g is not None else "data"
        return Tensor(out_data, tag=tag)
    if not any(i.requires_grad for i in inputs):
        return g.record(op, inputs, out_data, None, ())
    out = g.record(op, inputs, out_data, make_backward(), tuple(needed))
    if saves_output:
        out.node.saved = out.node.saved + (out,)
        g._register_saved((out,))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(grad.shape, shape)) if s == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- matmul / linear -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style leading-batch broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul: batch dimensions incompatible: {a.shape} x {b.shape}") from e
    out = a.data @ b.data

    def make_backward():
        def bw(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
            return ga, gb
        return bw

    needed = tuple(t for t, need in ((b, a.requires_grad), (a, b.requires_grad)) if need)
    return _emit("matmul", (a, b), out, make_backward, needed)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w with an optional per-row bias, as a single node."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim < 2 or w.ndim != 2:
        raise ShapeError(f"linear: expected x rank >= 2 and w rank 2, got {x.shape}, {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: inner dimensions disagree: {x.shape} x {w.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match output dim {w.shape[1]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def make_backward():
        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            gx = (g @ w.data.T) if x.requires_grad else None
            gw = (x.data.reshape(-1, x.shape[-1]).T @ g2) if w.requires_grad else None
            gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
            return (gx, gw) if b is None else (gx, gw, gb)
        return bw

    needed = []
    if x.requires_grad:
        needed.append(w)
    if w.requires_grad:
        needed.append(x)
    return _emit("linear", inputs, out, make_backward, tuple(needed))


# --- elementwise -----------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    # Only full-shape, scalar, or per-row bias (trailing-dim vector) broadcast.
    if a.shape == b.shape:
        return
    for small, big in ((a, b), (b, a)):
        if small.size == 1:
            return
        if small.ndim == 1 and big.ndim >= 1 and small.shape[0] == big.shape[-1]:
            return
    raise ShapeError(f"elementwise: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data + b.data

    def make_backward():
        def bw(g):
            ga = _unbroadcast(g, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g, b.shape) if b.requires_grad else None
            return ga, gb
        return bw

    return _emit("add", (a, b), out, make_backward, ())


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data - b.data

    def make_backward():
        def bw(g):
            ga = _unbroadcast(g, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
            return ga, gb
        return bw

    return _emit("sub", (a, b), out, make_backward, ())


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data * b.data

    def make_backward():
        def bw(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb
        return bw

    needed = tuple(t for t, need in ((b, a.requires_grad), (a, b.requires_grad)) if need)
    return _emit("mul", (a, b), out, make_backward, needed)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = x.data * c

    def make_backward():
        def bw(g):
            return (g * c,)
        return bw

    return _emit("scale", (x,), out, make_backward, ())


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def make_backward():
        def bw(g):
            return (g * (x.data > 0),)
        return bw

    return _emit("relu", (x,), out, make_backward, (x,) if x.requires_grad else ())


def gelu(x: Tensor) -> Tensor:
    """Exact-erf gelu: x * Phi(x)."""
    x = _as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def make_backward():
        def bw(g):
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            return (g * (phi + x.data * pdf),)
        return bw

    return _emit("gelu", (x,), out, make_backward, (x,) if x.requires_grad else ())


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _stable_sigmoid(x.data)

    def make_backward():
        def bw(g):
            return (g * out * (1.0 - out),)
        return bw

    return _emit("sigmoid", (x,), out, make_backward, (), saves_output=True)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale,
                "relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def elementwise(kind: str, *args) -> Tensor:
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _ELEMENTWISE[kind](*args)


# --- softmax / reductions / normalization ----------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis."""
    x = _as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a non-empty last axis, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def make_backward():
        def bw(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
        return bw

    return _emit("softmax_rows", (x,), out, make_backward, (), saves_output=True)


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    axes = tuple(int(a) % ndim if -ndim <= int(a) < ndim else int(a) for a in axes)
    for a in axes:
        if a < 0 or a >= ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes {axes}")
    return axes


def reduce_mean(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ShapeError(f"reduce_mean over empty extent, shape {x.shape}, axes {axes}")
    out = x.data.mean(axis=axes)

    def make_backward():
        def bw(g):
            keep = list(x.shape)
            for a in axes:
                keep[a] = 1
            return (np.broadcast_to(g.reshape(keep), x.shape) / count,)
        return bw

    return _emit("reduce_mean", (x,), out, make_backward, ())


def reduce_sum(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    out = x.data.sum(axis=axes)

    def make_backward():
        def bw(g):
            keep = list(x.shape)
            for a in axes:
                keep[a] = 1
            return (np.broadcast_to(g.reshape(keep), x.shape).copy(),)
        return bw

    return _emit("reduce_sum", (x,), out, make_backward, ())


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero-mean/unit-variance normalization over the last axis, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    n = x.shape[-1]
    if n < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma/beta must be shape ({n},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def make_backward():
        def bw(g):
            # recompute stats from the saved input; avoids saving xhat/inv
            mu_ = x.data.mean(axis=-1, keepdims=True)
            xc_ = x.data - mu_
            var_ = (xc_ * xc_).mean(axis=-1, keepdims=True)
            inv_ = 1.0 / np.sqrt(var_ + eps)
            xhat_ = xc_ * inv_
            gx = None
            if x.requires_grad:
                gh = g * gamma.data
                gx = inv_ * (gh - gh.mean(axis=-1, keepdims=True)
                             - xhat_ * (gh * xhat_).mean(axis=-1, keepdims=True))
            lead = tuple(range(g.ndim - 1))
            gg = (g * xhat_).sum(axis=lead) if gamma.requires_grad else None
            gb = g.sum(axis=lead) if beta.requires_grad else None
            return gx, gg, gb
        return bw

    needed = []
    if x.requires_grad or gamma.requires_grad:
        needed.append(x)
    if x.requires_grad:
        needed.append(gamma)
    return _emit("layer_norm", (x, gamma, beta), out, make_backward, tuple(needed))


# --- losses ----------------------------------------------------------------


def cross_entropy_logits(pred: Tensor, target: Tensor) -> Tensor:
    """Mean cross-entropy from logits (..., C) against integer class targets (...)."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.ndim < 2:
        raise ShapeError(f"cross_entropy_logits: pred must be (..., C), got {pred.shape}")
    if target.shape != pred.shape[:-1]:
        raise ShapeError(f"cross_entropy_logits: target shape {target.shape} "
                         f"does not match pred {pred.shape}")
    c = pred.shape[-1]
    tgt = target.data
    idx = tgt.astype(np.int64)
    if not np.all(tgt == idx) or idx.min() < 0 or idx.max() >= c:
        raise ValueError(f"invalid class index for {c} classes")
    m = pred.data.max(axis=-1, keepdims=True)
    logz = m + np.log(np.exp(pred.data - m).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(pred.data, idx[..., None], axis=-1)
    n = idx.size
    out = np.asarray((logz - picked).sum() / n)

    probs_arr = np.exp(pred.data - logz)
    g_graph = active_graph()
    saved: tuple[Tensor, ...] = ()
    if pred.requires_grad and g_graph is not None and _no_grad_depth == 0:
        probs_t = Tensor(probs_arr, tag=g_graph.current_tag)
        saved = (probs_t, target)

    def make_backward():
        def bw(g):
            onehot = np.zeros_like(probs_arr)
            np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
            return ((probs_arr - onehot) * (float(g) / n), None)
        return bw

    return _emit("cross_entropy_logits", (pred, target), out, make_backward, saved)


def bce_logits(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy from logits against {0,1} targets of the same shape."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce_logits: shapes disagree: {pred.shape} vs {target.shape}")
    t = target.data
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_logits: targets must be 0 or 1")
    x = pred.data
    n = x.size if x.size else 1
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(loss.sum() / n)

    sig_arr = _stable_sigmoid(x)
    g_graph = active_graph()
    saved: tuple[Tensor, ...] = ()
    if pred.requires_grad and g_graph is not None and _no_grad_depth == 0:
        sig_t = Tensor(sig_arr, tag=g_graph.current_tag)
        saved = (sig_t, target)

    def make_backward():
        def bw(g):
            return ((sig_arr - t) * (float(g) / n), None)
        return bw

    return _emit("bce_logits", (pred, target), out, make_backward, saved)


_LOSSES = {"cross_entropy_logits": cross_entropy_logits, "bce_logits": bce_logits}


def loss(kind: str, pred: Tensor, target: Tensor) -> Tensor:
    if kind not in _LOSSES:
        raise ValueError(f"unknown loss kind {kind!r}")
    return _LOSSES[kind](pred, target)


# --- structural ops (index bookkeeping only; nothing saved) -----------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def make_backward():
        def bw(g):
            return (g.reshape(x.shape),)
        return bw

    return _emit("reshape", (x,), out, make_backward, ())


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def make_backward():
        def bw(g):
            return (np.ascontiguousarray(g.transpose(inv)),)
        return bw

    return _emit("transpose", (x,), out, make_backward, ())


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of empty sequence")
    axis = int(axis) % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def make_backward():
        def bw(g):
            pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
            return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))
        return bw

    return _emit("concat", tuple(ts), out, make_backward, ())


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    x = _as_tensor(x)
    axis = int(axis) % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of range "
                         f"for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    out = np.ascontiguousarray(x.data[tuple(sl)])

    def make_backward():
        def bw(g):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[tuple(sl)] = g
            return (full,)
        return bw

    return _emit("narrow", (x,), out, make_backward, ())


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsample of the two grid axes of (..., h, w, c)."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"nearest_upsample expects (..., h, w, c), got {x.shape}")
    f = int(factor)
    if f < 1:
        raise ShapeError("nearest_upsample: factor must be >= 1")
    out = np.repeat(np.repeat(x.data, f, axis=-3), f, axis=-2)

    def make_backward():
        def bw(g):
            lead = g.shape[:-3]
            h, w, c = x.shape[-3], x.shape[-2], x.shape[-1]
            gg = g.reshape(lead + (h, f, w, f, c))
            return (gg.sum(axis=(-4, -2)),)
        return bw

    return _emit("nearest_upsample", (x,), out, make_backward, ())
