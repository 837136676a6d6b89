"""Dense tensors with tape-based reverse-mode autodiff on top of numpy.

A :class:`Tape` is created per forward pass. Leaf arrays are bound to it with
:meth:`Tape.watch`; every op whose inputs carry that tape records a backward
closure on it. Tensors without a tape (constants, inference) record nothing,
so there is no global autodiff state.

Broadcasting is deliberately narrow: the smaller operand's shape must be a
suffix of the larger one (bias-style trailing broadcast). Anything else is a
:class:`ShapeError`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

PRECISIONS = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 tape: "Tape | None" = None, node_id: int = -1):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Tape:
    """Ordered record of primitive ops for one forward pass.

    ``corrupt`` maps op names to a factor applied to that op's input
    gradients; it exists only so gradient checks can be shown to fail.
    """

    def __init__(self, corrupt: dict[str, float] | None = None):
        self._ops: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []
        self._leaves: list[Tensor] = []
        self._next_id = 0
        self._corrupt = dict(corrupt or {})

    def __len__(self) -> int:
        return len(self._ops)

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def watch(self, value, name: str | None = None) -> Tensor:
        """Bind ``value`` to this tape as a gradient-tracked leaf."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        leaf = Tensor(data, requires_grad=True, name=name, tape=self, node_id=self._new_id())
        self._leaves.append(leaf)
        return leaf

    def watch_all(self, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.watch(arr, name) for name, arr in params.items()}

    def op_names(self) -> list[str]:
        return [op for op, *_ in self._ops]

    def _record(self, op: str, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        out.node_id = self._new_id()
        self._ops.append((op, out, parents, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for op, out, parents, fn in reversed(self._ops):
            g = grads.pop(out.node_id, None)
            if g is None:
                continue
            pgrads = fn(g)
            factor = self._corrupt.get(op)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                prev = grads.get(p.node_id)
                grads[p.node_id] = pg if prev is None else prev + pg
        for leaf in self._leaves:
            g = grads.get(leaf.node_id)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype, copy=False)


def tensor(data, dtype="float64") -> Tensor:
    """Untracked constant tensor."""
    return Tensor(np.asarray(data, dtype=PRECISIONS.get(dtype, dtype)))


def as_constants(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: Tensor(arr, name=name) for name, arr in params.items()}


def _wrap(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _tape_of(parents: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    tape = _tape_of(parents)
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, tape=tape if needs else None)
    if needs:
        tape._record(op, out, parents, backward)
    return out


def _check_suffix(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if small.ndim == 0 or big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape} "
                     "(only trailing-suffix broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + shape).sum(axis=0)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    _check_suffix("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    _check_suffix("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _wrap(a)
        s = float(b)
        return _make("mul", a.data * s, (a,), lambda g: (g * s,))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    _check_suffix("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, which keeps finite differences honest."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make("getitem", x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids are integer constants."""
    ids = np.asarray(ids)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n}): {ids.min()}..{ids.max()}")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _make("embedding", table.data[ids], (table,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    if bd.ndim == 2:
        def backward(g):
            da = g @ bd.T
            db = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return da, db
    else:
        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make("matmul", out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalization

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (True = keep) zeroes weights; a slice
    with every entry masked yields all zeros rather than NaN."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis (shape {x.shape}, axis {axis})")
    z = x.data
    with np.errstate(invalid="ignore", over="ignore"):
        if mask is not None:
            z = np.where(mask, z, -np.inf)
        zmax = z.max(axis=axis, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)
        e = np.exp(z - zmax)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s == 0, 1.0, s)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y.astype(x.dtype, copy=False), (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        dgain = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        return dx, dgain, flat_g.sum(axis=0)

    return _make("layer_norm", out, (x, gain, bias), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy log-softmax over the last axis (no tape)."""
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, mask: np.ndarray | None = None) -> Tensor:
    """Mean over (unmasked) positions of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype).reshape(-1)
    count = w.sum()
    if count == 0:
        raise ValueError("cross_entropy: no unmasked positions")
    logp = log_softmax(flat)
    rows = np.arange(t.size)
    nll = -logp[rows, t]
    loss = np.asarray((nll * w).sum() / count, dtype=logits.dtype)
    shape = logits.shape

    def backward(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= (w / count)[:, None]
        return ((d * g).reshape(shape),)

    return _make("cross_entropy", loss, (logits,), backward)
