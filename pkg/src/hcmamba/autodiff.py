"""Dense numpy tensors with reverse-mode automatic differentiation.

Every differentiable operation creates a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per parent.
:func:`backward` orders the reachable nodes topologically (the *tape*) and
replays the closures in reverse.

Heavy operations used by the model (convolution, selective scan, layer norm)
are fused: a single node with a hand-written backward rule, registered through
:meth:`Tensor.from_op`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, DomainError, TapeError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_DEBUG = False


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported precision {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording; outputs created inside never require grad."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_released")
    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # numpy float arrays keep their precision; Python numbers and lists take the default
            is_float_array = isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f"
            dtype = data.dtype if is_float_array else _DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._released = False

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn,
                op: str) -> "Tensor":
        """Wrap the result of an op; ``backward(g)`` returns one gradient per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._released = False
        need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = need
        out._parents = tuple(parents) if need else ()
        out._backward = backward if need else None
        if _DEBUG and not np.all(np.isfinite(data)):
            raise DomainError(f"non-finite output from op '{op}'")
        return out

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)
    def exp(self): return exp(self)
    def log(self): return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    """Promote a python/numpy operand to a constant tensor matching its partner."""
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise binary ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return Tensor.from_op(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return Tensor.from_op(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise ContractError("power supports scalar exponents only")
    ad = a.data
    return Tensor.from_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


# -- elementwise unary -------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return Tensor.from_op(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = expit(x)
    return Tensor.from_op(x * s, (a,), lambda g: (g * (s + x * s * (1 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    # x + log1p(exp(-x)) for x > 0, log1p(exp(x)) otherwise
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor.from_op(out, (a,), lambda g: (g * expit(x),), "softplus")


_UNARY = {"silu": silu, "softplus": softplus, "exp": exp, "sigmoid": sigmoid, "log": log, "neg": neg}
_BINARY = {"add": add, "mul": mul, "sub": sub, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: ``add mul sub div`` (binary) or ``silu softplus exp sigmoid log neg``."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](as_tensor(a))
    raise ContractError(f"unknown elementwise op '{op}'")


# -- linear algebra ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return Tensor.from_op(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- reductions and shape ops -------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return Tensor.from_op(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return Tensor.from_op(a.data[idx], (a,), backward, "getitem")


def permute(a: Tensor, perm, axis: int = -1) -> Tensor:
    """Reorder ``a`` along ``axis`` by a bijection ``perm``."""
    perm = np.asarray(perm)
    axis = axis % a.ndim
    if sorted(perm.tolist()) != list(range(a.shape[axis])):
        raise ContractError(f"permute: {perm.tolist()} is not a permutation of axis {axis}")
    inverse = np.argsort(perm)
    return Tensor.from_op(np.take(a.data, perm, axis=axis), (a,),
                          lambda g: (np.take(g, inverse, axis=axis),), "permute")


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; gradient scatters back (indices may repeat)."""
    indices = np.asarray(indices)
    axis = axis % a.ndim
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)
    return Tensor.from_op(np.take(a.data, indices, axis=axis), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum(sizes)[:-1]
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor.from_op(
        out, tensors,
        lambda g: tuple(np.squeeze(s, axis=axis) for s in np.split(g, n, axis=axis)),
        "stack")


def upsample_nearest(x: Tensor, scale: int) -> Tensor:
    """Nearest-neighbour upsampling of a [B, H, W, C] map by an integer factor."""
    b, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=1), scale, axis=2)
    return Tensor.from_op(
        out, (x,),
        lambda g: (g.reshape(b, h, scale, w, scale, c).sum(axis=(2, 4)),),
        "upsample_nearest")


def _bilinear_matrix(n_in: int, scale: int, dtype) -> np.ndarray:
    """[n_in*scale, n_in] interpolation matrix, half-pixel centres, edge clamped."""
    n_out = n_in * scale
    pos = (np.arange(n_out) + 0.5) / scale - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def upsample_bilinear(x: Tensor, scale: int) -> Tensor:
    """Separable bilinear upsampling of a [B, H, W, C] map (align_corners=False)."""
    _, h, w, _ = x.shape
    mh = _bilinear_matrix(h, scale, x.dtype)
    mw = _bilinear_matrix(w, scale, x.dtype)
    out = np.einsum("ih,bhwc->biwc", mh, x.data)
    out = np.einsum("jw,biwc->bijc", mw, out)

    def backward(g):
        g = np.einsum("jw,bijc->biwc", mw, g)
        return (np.einsum("ih,biwc->bhwc", mh, g),)
    return Tensor.from_op(out, (x,), backward, "upsample_bilinear")


# -- fused normalisation / softmax ---------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: channel extent {c} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise DomainError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb
    return Tensor.from_op(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return Tensor.from_op(s, (x,), backward, "softmax")


# -- tape and backward --------------------------------------------------

def build_tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of graph nodes feeding ``loss`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._released:
            raise TapeError(f"graph node '{node.op}' was consumed by an earlier backward pass")
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from scalar ``loss``.

    The tape is consumed: a second call on the same loss (or on any loss sharing
    interior nodes) raises :class:`TapeError`. Leaves that still hold a gradient
    from an earlier pass must be reset with ``zero_grad`` first.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise TapeError("backward already ran on this loss; rebuild the graph")
    if not loss.requires_grad:
        raise TapeError("loss is detached: no recorded operations lead to a requires_grad leaf")
    tape = build_tape(loss)
    for node in tape:
        if not node._parents and node.grad is not None:
            raise TapeError("leaf already holds a gradient; call zero_grad before backward")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if not node._parents:
            if g is not None:
                node.grad = g.astype(node.dtype, copy=False)
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        node._parents = ()
        node._backward = None
        node._released = True


# -- finite-difference gradient check -----------------------------------

@dataclass
class GradCheckReport:
    errors: list[float] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self) -> str:
        per = ", ".join(f"{e:.2e}" for e in self.errors)
        return f"grad_check {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g}): [{per}]"


def grad_check(f: Callable[..., Tensor], inputs: Sequence, tol: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare backward() against central differences in float64.

    Step per coordinate is ``1e-4 * max(1, |x|)``. The error reported for each
    input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)``.
    ``max_coords`` limits the number of randomly chosen coordinates probed per
    input (all coordinates by default).
    """
    leaves = [Tensor(np.asarray(as_tensor(x).data, dtype=np.float64), requires_grad=True)
              for x in inputs]
    with default_dtype(np.float64):
        out = f(*leaves)
        if out.size != 1:
            raise ContractError("grad_check: f must return a scalar")
        backward(out)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.zeros(len(coords))
        with default_dtype(np.float64), no_grad():
            for j, k in enumerate(coords):
                orig = flat[k]
                h = 1e-4 * max(1.0, abs(orig))
                flat[k] = orig + h
                fp = f(*leaves).item()
                flat[k] = orig - h
                fm = f(*leaves).item()
                flat[k] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise DomainError(f"grad_check: non-finite output perturbing input {i}, coordinate {k}")
                numeric[j] = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[coords]
        scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-6)
        report.errors.append(float(np.max(np.abs(a - numeric), initial=0.0) / scale))
    return report
