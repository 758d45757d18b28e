"""Dense float64 tensors with reverse-mode autodiff on an explicit gradient tape.

Every differentiable operation computes its forward value eagerly with numpy
and, when a tape is active, appends a backward closure to it.  ``Tape.backward``
replays the closures in exact reverse execution order, which is a valid
topological order for any graph built by eager execution.  Gradients accumulate
additively, so fan-out works without bookkeeping.

Tensors are treated as immutable after creation except for gradient
accumulation; the optimizer's in-place parameter update is the single-writer
phase between steps.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """A dense float64 n-d value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def clear_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar used throughout the model code.  Scalars are lifted to
    # constant tensors; broadcasting follows numpy with gradients summed back
    # to each operand's shape.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division is only supported by python scalars")
        return mul(self, _lift(1.0 / float(other)))

    def __neg__(self):
        return mul(self, _lift(-1.0))


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around the forward pass, then call ``backward``
    on the scalar output.  A tape is single-use.
    """

    __slots__ = ("nodes", "_consumed")

    def __init__(self):
        self.nodes: list[tuple[str, Callable[[], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def op_names(self) -> list[str]:
        return [name for name, _ in self.nodes]

    def backward(self, out: Tensor) -> None:
        """Accumulate gradients of ``out`` into every participating tensor."""
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if out.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {out.shape}")
        self._consumed = True
        out.accumulate_grad(np.ones_like(out.data))
        for _, backward_fn in reversed(self.nodes):
            backward_fn()


# One stack per thread: a tape and its tensors are a single-owner unit, and
# independent evaluations on other threads must not record onto it.
_TAPE_STATE = threading.local()


def _tape_stack() -> list[Tape | None]:
    stack = getattr(_TAPE_STATE, "stack", None)
    if stack is None:
        stack = _TAPE_STATE.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def stop_recording():
    """Suspend tape recording (used by the finite-difference oracle)."""
    _tape_stack().append(None)
    try:
        yield
    finally:
        _tape_stack().pop()


def record_node(name: str, out: Tensor, inputs: Sequence[Tensor],
                backward: Callable[[np.ndarray], None]) -> Tensor:
    """Attach a backward closure for ``out`` to the active tape.

    ``backward`` receives the (complete) upstream gradient of ``out`` and is
    responsible for accumulating into the inputs it cares about.  Recording is
    skipped when no tape is active or no input is tracked.
    """
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True

    def runner():
        if out.grad is not None:
            backward(out.grad)

    tape.nodes.append((name, runner))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over broadcast axes back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return record_node("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return record_node("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return record_node("mul", out, (a, b), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return record_node("reshape", out, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    out = Tensor(x.data.sum())

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))

    return record_node("sum", out, (x,), backward)


# ---------------------------------------------------------------------------
# named model operations


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = W x + b for a rank-1 input."""
    if x.data.ndim != 1 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"affine expects vector/matrix/vector, got {x.shape}, {w.shape}, {b.shape}")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"affine shape mismatch: W {w.shape} vs x {x.shape}, b {b.shape}")
    out = Tensor(w.data @ x.data + b.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(w.data.T @ g)
        if w.requires_grad:
            w.accumulate_grad(np.outer(g, x.data))
        if b.requires_grad:
            b.accumulate_grad(g)

    return record_node("affine", out, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0.0))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0.0))

    return record_node("relu", out, (x,), backward)


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic, clamped into the open interval (0, 1)."""
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    np.clip(y, _SIG_LO, _SIG_HI, out=y)
    out = Tensor(y)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * y * (1.0 - y))

    return record_node("sigmoid", out, (x,), backward)


def global_avg_pool(f: Tensor) -> Tensor:
    """Per-channel mean over the spatial grid: (c, h, w) -> (c,)."""
    if f.data.ndim != 3:
        raise ShapeError(f"global_avg_pool expects (c, h, w), got {f.shape}")
    c, h, w = f.shape
    out = Tensor(f.data.mean(axis=(1, 2)))

    def backward(g):
        if f.requires_grad:
            f.accumulate_grad(np.broadcast_to(g[:, None, None] / (h * w), f.shape).copy())

    return record_node("global_avg_pool", out, (f,), backward)


def conv1x1(f: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-position channel mixing: (c, h, w) x (c', c) -> (c', h, w)."""
    if f.data.ndim != 3 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"conv1x1 expects map/matrix/vector, got {f.shape}, {w.shape}, {b.shape}")
    c, h, w_ = f.shape
    if w.shape[1] != c or w.shape[0] != b.shape[0]:
        raise ShapeError(f"conv1x1 shape mismatch: W {w.shape} vs F {f.shape}, b {b.shape}")
    flat = f.data.reshape(c, h * w_)
    out = Tensor((w.data @ flat + b.data[:, None]).reshape(w.shape[0], h, w_))

    def backward(g):
        gf = g.reshape(w.shape[0], h * w_)
        if f.requires_grad:
            f.accumulate_grad((w.data.T @ gf).reshape(f.shape))
        if w.requires_grad:
            w.accumulate_grad(gf @ flat.T)
        if b.requires_grad:
            b.accumulate_grad(gf.sum(axis=1))

    return record_node("conv1x1", out, (f, w, b), backward)


def downsample2x(f: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; edge windows average existing cells."""
    if f.data.ndim != 3:
        raise ShapeError(f"downsample2x expects (c, h, w), got {f.shape}")
    c, h, w = f.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    sums = np.zeros((c, oh, ow))
    counts = np.zeros((oh, ow))
    for di in (0, 1):
        for dj in (0, 1):
            block = f.data[:, di::2, dj::2]
            sums[:, : block.shape[1], : block.shape[2]] += block
            counts[: block.shape[1], : block.shape[2]] += 1.0
    out = Tensor(sums / counts)

    def backward(g):
        if f.requires_grad:
            scaled = g / counts
            gf = np.zeros_like(f.data)
            for di in (0, 1):
                for dj in (0, 1):
                    target = gf[:, di::2, dj::2]
                    target += scaled[:, : target.shape[1], : target.shape[2]]
            f.accumulate_grad(gf)

    return record_node("downsample2x", out, (f,), backward)


def upsample_to(m: Tensor, h: int, w: int) -> Tensor:
    """Nearest-neighbor upsampling of an (h', w') map to (h, w)."""
    if m.data.ndim != 2:
        raise ShapeError(f"upsample_to expects (h, w), got {m.shape}")
    sh, sw = m.shape
    if h < sh or w < sw:
        raise ShapeError(f"upsample target ({h}, {w}) smaller than source ({sh}, {sw})")
    rows = (np.arange(h) * sh) // h
    cols = (np.arange(w) * sw) // w
    out = Tensor(m.data[rows[:, None], cols[None, :]])

    def backward(g):
        if m.requires_grad:
            gm = np.zeros_like(m.data)
            np.add.at(gm, (rows[:, None], cols[None, :]), g)
            m.accumulate_grad(gm)

    return record_node("upsample_to", out, (m,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; rank-1 vectors concatenate end to end."""
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    if a.data.ndim == 3:
        if a.shape[1:] != b.shape[1:]:
            raise ShapeError(f"concat spatial mismatch: {a.shape} vs {b.shape}")
    elif a.data.ndim != 1:
        raise ShapeError(f"concat expects rank 1 or 3, got {a.shape}")
    c1 = a.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g[:c1])
        if b.requires_grad:
            b.accumulate_grad(g[c1:])

    return record_node("concat_channels", out, (a, b), backward)


def softmax_xent(logits: Tensor, label: int) -> Tensor:
    """Cross-entropy -log softmax(logits)[label], max-subtracted for stability."""
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_xent expects rank-1 logits, got {logits.shape}")
    k = logits.shape[0]
    if not (0 <= label < k):
        raise IndexError(f"label {label} out of range for {k} classes")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    total = e.sum()
    prob = e / total
    out = Tensor(np.log(total) - z[label])

    def backward(g):
        if logits.requires_grad:
            delta = prob.copy()
            delta[label] -= 1.0
            logits.accumulate_grad(float(g) * delta)

    return record_node("softmax_xent", out, (logits,), backward)


def grad_reverse(x: Tensor, lambda_d: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lambda_d."""
    if lambda_d < 0:
        raise ValueError(f"reversal strength must be non-negative, got {lambda_d}")
    out = Tensor(x.data.copy())

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(-lambda_d * g)

    return record_node("grad_reverse", out, (x,), backward)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a scalar-valued function.

    Deliberately independent of the tape: evaluations run with recording
    suspended, on fresh perturbed tensors.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = x.data
    grad = np.zeros_like(base)
    flat_grad = grad.ravel()
    with stop_recording():
        for i in range(base.size):
            plus = base.copy()
            plus.ravel()[i] += eps
            minus = base.copy()
            minus.ravel()[i] -= eps
            f_plus = f(Tensor(plus)).item()
            f_minus = f(Tensor(minus)).item()
            flat_grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad)


def finite_diff_wrt(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a zero-argument loss with respect to one tensor.

    Perturbs ``param.data`` in place and restores it; used for whole-model
    checks where the loss closes over a parameter structure.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    flat = param.data.ravel()
    grad = np.zeros_like(param.data)
    flat_grad = grad.ravel()
    with stop_recording():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            flat_grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def grad_close(got: np.ndarray, want: np.ndarray,
               rel: float = 1e-4, floor: float = 1e-7) -> bool:
    """Elementwise |got - want| <= floor + rel * max(|got|, |want|)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return bool(np.all(np.abs(got - want) <= floor + rel * np.maximum(np.abs(got), np.abs(want))))


def max_grad_err(got: np.ndarray, want: np.ndarray, floor: float = 1e-7) -> float:
    """Worst-case relative error with an absolute floor, for reporting."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), floor)
    if got.size == 0:
        return 0.0
    return float(np.max(np.abs(got - want) / denom))


def clear_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.clear_grad()
