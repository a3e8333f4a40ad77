"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure that maps the output adjoint to
parent adjoints. ``backward`` walks the tape once in reverse topological
order and then frees it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording a tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Wrap an op result, recording it on the tape when any parent needs grads.

        ``backward(g)`` must return one adjoint (or None) per parent, each
        shaped like that parent's data.
        """
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("op produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._consumed = False
        out.name = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # --- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- autodiff ------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grads.

        The root must be a scalar unless an explicit output adjoint is given.
        Leaf grads accumulate across calls; the tape itself is freed, so a
        second call on the same root raises.
        """
        if self._consumed:
            raise RuntimeError("backward already ran on this graph; rebuild it with a new forward pass")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"root adjoint shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("root does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        adj: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"adjoint shape {pg.shape} != parent shape {p.shape}")
                key = id(p)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
            node._parents = ()
            node._backward = None
            node._consumed = True
        self._consumed = True

    # --- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a} with {b}") from exc


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor.from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    ad = a.data
    return Tensor.from_op(np.log(ad), (a,), lambda g: (g / ad,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    nd = tensors[0].ndim
    ax = axis % nd if nd else 0
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat shapes differ off axis {axis}: {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(sizes))]

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


# --- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor.from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]``; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def backward(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(a.data[idx], (a,), backward)


def segment_sum(a: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given per-row bucket ids."""
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != a.shape[0]:
        raise ShapeError("one segment id per row required")
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, segments, a.data)
    return Tensor.from_op(out, (a,), lambda g: (g[segments],))


# --- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor.from_op(a.data.sum(axis=axis), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


# --- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with the bias broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} x {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return Tensor.from_op(out, (x, w), lambda g: (g @ wd.T, xd.T @ g))
    return Tensor.from_op(out + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


# --- softmax family ----------------------------------------------------------------


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    s = _softmax_np(x.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return Tensor.from_op(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    With ``class_weights`` the mean is weighted: sum(w[y] * nll) / sum(w[y]).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects n x c logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"need {n} labels, got shape {labels.shape}")
    if n == 0:
        raise ShapeError("cross_entropy over zero samples")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    if class_weights is None:
        w = np.full(n, 1.0 / n)
    else:
        cw = np.asarray(class_weights, dtype=np.float64)
        if cw.shape != (c,):
            raise ShapeError(f"need {c} class weights")
        w = cw[labels]
        w = w / w.sum()
    loss = float((w * nll).sum())

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (w * g)[:, None],)

    return Tensor.from_op(np.array(loss), (logits,), backward)


# --- verification ------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(x0)).item()
            flat[i] = orig - eps
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("non-finite value during finite differencing")
            num_flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# --- parameters ----------------------------------------------------------------------


class Module:
    """Container that discovers parameters among its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            yield from _walk(value, prefix + key)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def _walk(value, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield prefix, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{prefix}.{i}")


def parameter(shape, rng: np.random.Generator, fan_in: int | None = None, init: str = "he") -> Tensor:
    """Create a trainable tensor with a seeded initializer."""
    shape = tuple(shape)
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "he":
        fan = fan_in if fan_in is not None else shape[0]
        bound = np.sqrt(6.0 / max(fan, 1))
        data = rng.uniform(-bound, bound, size=shape)
    elif init == "xavier":
        fan = fan_in if fan_in is not None else shape[0]
        bound = np.sqrt(3.0 / max(fan, 1))
        data = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=True)


class MLP(Module):
    """Fully connected stack with relu between layers and a linear output."""

    def __init__(self, widths: Iterable[int], rng: np.random.Generator, zero_last: bool = False):
        widths = list(widths)
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            init = "zeros" if (last and zero_last) else ("xavier" if last else "he")
            self.weights.append(parameter((a, b), rng, fan_in=a, init=init))
            self.biases.append(parameter((b,), rng, init="zeros"))
        self.widths = tuple(widths)

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = linear(x, w, b)
            if i < n - 1:
                x = relu(x)
        return x
