"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result remembers its parents and a closure mapping the output gradient to the
parent gradients; :meth:`Tensor.backward` replays those closures in reverse
topological order. Only what the desk-scale models and the adversarial losses
need is implemented: affine and convolutional layers, 2x2 max pooling, relu,
reductions, per-sample cross-entropy and the squared logit distance.

Forward ops on batches are row independent bit for bit: matrix products are
issued as one BLAS call per sample, so ``forward(batch)[i]`` never depends on
the other rows of the batch.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, UsageError

__all__ = [
    "Tensor",
    "Graph",
    "as_tensor",
    "dense",
    "conv2d",
    "maxpool2d",
    "relu",
    "flatten",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "sq_l2_diff",
    "softmax_cross_entropy",
    "sign",
    "clamp",
    "finite_difference_check",
]

DTYPE = np.float64


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def detach(self) -> "Tensor":
        """Same values, no history. Used for perturbations treated as constants."""
        return Tensor(self.data, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic sugar ----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    # -- reverse mode --------------------------------------------------
    def backward(self, seed=None, wrt: Sequence["Tensor"] | None = None):
        """Propagate ``seed`` (default 1.0 for scalars) back through the tape.

        Without ``wrt`` the gradients are *accumulated* into ``.grad`` of every
        leaf that requires one, so a second call without zeroing adds up.
        With ``wrt`` nothing is written to ``.grad``; a list of gradients
        aligned with ``wrt`` is returned and only the branches leading to those
        leaves are differentiated.
        """
        if seed is None:
            if self.data.size != 1:
                raise UsageError(
                    f"backward on non-scalar output of shape {self.shape} needs a seed"
                )
            seed_arr = np.ones_like(self.data)
        else:
            seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, DTYPE)
            if seed_arr.shape != self.shape:
                raise UsageError(f"seed shape {seed_arr.shape} != output shape {self.shape}")

        order = _toposort(self)
        if wrt is None:
            needed = {id(t) for t in order if t.requires_grad}
            targets = None
        else:
            targets = {id(t): i for i, t in enumerate(wrt)}
            needed = set()
            for t in order:
                if id(t) in targets or any(id(p) in needed for p in t._parents):
                    needed.add(id(t))
            results: list[np.ndarray | None] = [None] * len(wrt)

        grads: dict[int, np.ndarray] = {id(self): seed_arr}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or id(node) not in needed:
                continue
            if targets is not None and id(node) in targets:
                i = targets[id(node)]
                results[i] = g if results[i] is None else results[i] + g
            if node._backward is None:
                if targets is None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            mask = tuple(id(p) in needed for p in node._parents)
            if not any(mask):
                continue
            for parent, pg, need in zip(node._parents, node._backward(g, mask), mask):
                if need and pg is not None:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg

        if targets is None:
            return None
        return [np.zeros(t.shape) if r is None else r for r in results]


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by op '{op}'", node=op)
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(-g, b.shape) if need[1] else None)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g, need):
        return (_unbroadcast(g * b.data, a.shape) if need[0] else None,
                _unbroadcast(g * a.data, b.shape) if need[1] else None)

    return _result(a.data * b.data, (a, b), back, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g, need: (g * c,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    # subgradient 0 at exactly 0
    mask = x.data > 0
    return _result(np.maximum(x.data, 0.0), (x,), lambda g, need: (np.where(mask, g, 0.0),), "relu")


def sign(x) -> Tensor:
    """Elementwise sign with sign(0) = 0. Never differentiable."""
    return Tensor(np.sign(as_tensor(x).data), op="sign")


def clamp(x, lo, hi) -> Tensor:
    """Clip to [lo, hi]; gradient passes inside the box and is zero outside."""
    x = as_tensor(x)
    lo_arr = np.asarray(lo, DTYPE)
    hi_arr = np.asarray(hi, DTYPE)
    inside = (x.data >= lo_arr) & (x.data <= hi_arr)
    out = np.minimum(np.maximum(x.data, lo_arr), hi_arr)
    return _result(out, (x,), lambda g, need: (g * inside,), "clamp")


# -- reductions and reshapes ----------------------------------------------


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def back(g, need):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), back, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / count)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result(x.data.reshape(shape[0], -1), (x,),
                   lambda g, need: (g.reshape(shape),), "flatten")


# -- layers ----------------------------------------------------------------


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise UsageError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    # one gemv per row keeps rows bit-independent of batch composition
    out = np.matmul(x.data[:, None, :], weight.data.T)[:, 0, :]
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g, need):
        grads = [g @ weight.data if need[0] else None,
                 g.T @ x.data if need[1] else None]
        if bias is not None:
            grads.append(g.sum(axis=0) if need[2] else None)
        return grads

    return _result(out, parents, back, "dense")


def _im2col(xp: np.ndarray, k: int) -> tuple[np.ndarray, int, int]:
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo) patch matrix built from k*k slice copies."""
    n, c, h, w = xp.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def conv2d(x, weight, bias=None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation. x: (N, C, H, W), weight: (O, C, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise UsageError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    o, c, k, k2 = weight.shape
    if k != k2:
        raise UsageError("conv2d: only square kernels are supported")
    n = x.shape[0]
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if xp.shape[2] < k or xp.shape[3] < k:
        raise UsageError(f"conv2d: kernel {k} larger than padded input {xp.shape[2:]}")
    cols, ho, wo = _im2col(xp, k)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)  # one gemm per sample
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None]
        parents = (x, weight, bias)

    def back(g, need):
        g2 = g.reshape(n, o, ho * wo)
        dx = dw = None
        if need[0]:
            dcols = np.matmul(wmat.T, g2).reshape(n, c, k, k, ho, wo)
            dxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
            dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
        if need[1]:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if need[2] else None)
        return grads

    return _result(out, parents, back, "conv2d")


def maxpool2d(x) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    The gradient goes to the first maximal element in row-major window order.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    views = [x.data[:, :, di:2 * h2:2, dj:2 * w2:2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

    def back(g, need):
        gx = np.zeros((n, c, h, w))
        taken = np.zeros(out.shape, dtype=bool)
        for (di, dj), view in zip(((0, 0), (0, 1), (1, 0), (1, 1)), views):
            hit = (view == out) & ~taken
            taken |= hit
            gx[:, :, di:2 * h2:2, dj:2 * w2:2] = np.where(hit, g, 0.0)
        return (gx,)

    return _result(out, (x,), back, "maxpool2d")


# -- losses ------------------------------------------------------------------


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-sample cross-entropy vector of shape (N,) for integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise UsageError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1)
    rows = np.arange(len(labels))
    loss = np.log(denom) - z[rows, labels]

    def back(g, need):
        p = ez / denom[:, None]
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return _result(loss, (logits,), back, "softmax_cross_entropy")


def sq_l2_diff(a, b) -> Tensor:
    """Per-row squared Euclidean distance ``||a_i - b_i||^2``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise UsageError(f"sq_l2_diff: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    axes = tuple(range(1, d.ndim))
    out = (d * d).sum(axis=axes) if axes else d * d

    def back(g, need):
        gd = 2.0 * d * g.reshape(g.shape + (1,) * len(axes))
        return (gd if need[0] else None, -gd if need[1] else None)

    return _result(out, (a, b), back, "sq_l2_diff")


# -- graph wrapper and gradient oracle ---------------------------------------


class Graph:
    """A re-evaluable expression over named parameters and inputs.

    ``fn`` receives the parameter dict and the bound inputs as keyword
    arguments and returns the output tensor. Each :meth:`evaluate` call
    rebuilds the tape, so repeated evaluation with the same bindings is
    bit-identical.
    """

    def __init__(self, fn: Callable[..., Tensor], params: dict[str, Tensor] | None = None):
        self.fn = fn
        self.params = dict(params or {})
        self.inputs: dict[str, Tensor] = {}
        self.output: Tensor | None = None

    def evaluate(self, **bindings) -> Tensor:
        self.inputs = {k: as_tensor(v) for k, v in bindings.items()}
        self.output = self.fn(self.params, **self.inputs)
        return self.output

    def leaves(self) -> dict[str, Tensor]:
        return {**self.params, **self.inputs}

    def backward(self, seed=None) -> dict[str, np.ndarray]:
        if self.output is None:
            raise UsageError("backward called before evaluate")
        self.output.backward(seed)
        return {k: t.grad for k, t in self.leaves().items() if t.requires_grad and t.grad is not None}

    def zero_grad(self) -> None:
        for t in self.leaves().values():
            t.grad = None


def finite_difference_check(graph: Graph, leaf: str | Tensor, h: float = 1e-5) -> float:
    """Max over components of |analytic - central difference| / max(1, |analytic|).

    The graph must already have been evaluated; its last bindings are reused.
    """
    if not 1e-7 <= h <= 1e-4:
        raise UsageError(f"step h={h} outside [1e-7, 1e-4]")
    if graph.output is None:
        raise UsageError("finite_difference_check needs an evaluated graph")
    target = graph.leaves()[leaf] if isinstance(leaf, str) else leaf
    bindings = dict(graph.inputs)
    out = graph.evaluate(**bindings)
    if out.size != 1:
        raise UsageError(f"finite_difference_check needs a scalar output, got {out.shape}")
    if not out.requires_grad:
        analytic = np.zeros(target.shape)
    else:
        (analytic,) = out.backward(wrt=[target])
    numeric = np.zeros(target.shape)
    if not target.data.flags.c_contiguous or not target.data.flags.writeable:
        target.data = np.array(target.data, order="C")
    flat = target.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = graph.evaluate(**bindings).item()
        flat[i] = orig - h
        down = graph.evaluate(**bindings).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * h)
    graph.evaluate(**bindings)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
