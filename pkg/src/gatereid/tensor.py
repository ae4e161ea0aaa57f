"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

The operator set covers exactly what the gated video network needs:
same-padded convolution, 2x2 max pooling with ceil semantics, tanh/sigmoid,
dense layers, channel concatenation, gate broadcasting, stop-gradient, and a
handful of elementwise/reduction helpers.  Everything runs in float32 for
training and float64 for verification; ``grad_check`` validates any adjoint
against central finite differences in 64-bit mode.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible with an operator's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared where a finite value is required."""


class Tensor:
    """A dense float array plus an optional gradient buffer.

    ``data`` is treated as immutable while a tape is recording (adjoint
    closures capture references, not copies).  ``grad`` is populated by
    ``Tape.backward`` and accumulates until reset to ``None``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # small conveniences; the named functions below are the real API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


# ---------------------------------------------------------------------------
# tape machinery

_ACTIVE = threading.local()

# Test hook: set to {"op": name, "scale": s} to corrupt that operator's
# adjoints during backward.  Lets negative-control tests confirm that the
# finite-difference checker actually catches a wrong backward pass.
_ADJOINT_CORRUPTION = None

# When set, stop_gradient routes its forward value through this store; see
# grad_check(freeze_stops=True).
_STOP_FREEZE = None


class _StopFreeze:
    """Capture-then-replay store for stop_gradient forward values.

    The tape differentiates the partial function in which every stopped
    subexpression is a constant.  Central differences can only measure that
    same function if the stopped values are pinned while inputs are
    perturbed: capture them on the recording pass, replay them (in call
    order) on every probe evaluation.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.replaying = False
        self._cursor = 0

    def begin_replay(self):
        self.replaying = True
        self._cursor = 0

    def take(self, data: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.values.append(data.copy())
            return data
        if self._cursor >= len(self.values):
            raise RuntimeError("stop_gradient called more often than captured")
        frozen = self.values[self._cursor]
        self._cursor += 1
        if frozen.shape != data.shape:
            raise ShapeError("stop_gradient replay shape mismatch")
        return frozen

    def check_drained(self):
        if self.replaying and self._cursor != len(self.values):
            raise RuntimeError("stop_gradient call pattern changed between evaluations")


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_recording:
    """Context manager that suspends recording on any enclosing tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


class Tape:
    """Ordered record of executed operations for one forward pass.

    Use as a context manager: operations executed inside record themselves in
    execution order, and ``backward`` replays the records reversed.  Gradients
    accumulate into the ``grad`` buffers of every participating tensor with
    ``requires_grad``, so parameters shared across several forward passes
    under different tapes collect the sum of their adjoints.
    """

    def __init__(self):
        self._records = []  # (op name, input tensors, output tensor, adjoint fn)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape contexts must nest"
        return False

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss) = 1 and push adjoints back through the records."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("loss is not finite")
        for _, inputs, out, _ in self._records:
            if out.grad is None:
                out.grad = np.zeros_like(out.data)
            for t in inputs:
                if t.requires_grad and t.grad is None:
                    t.grad = np.zeros_like(t.data)
        if loss.grad is None:  # loss not produced by any record (leaf)
            loss.grad = np.zeros_like(loss.data)
        loss.grad = loss.grad + np.ones_like(loss.data)
        for name, inputs, out, adjoint in reversed(self._records):
            contribs = adjoint(out.grad)
            if _ADJOINT_CORRUPTION is not None and _ADJOINT_CORRUPTION["op"] == name:
                contribs = tuple(
                    None if c is None else c * _ADJOINT_CORRUPTION["scale"]
                    for c in contribs
                )
            for t, c in zip(inputs, contribs):
                if c is not None and t.requires_grad:
                    t.grad += c


def _result(name: str, inputs: tuple, out_data: np.ndarray, adjoint: Callable) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append((name, inputs, out, adjoint))
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"expected Tensor, got {type(x).__name__}")


def _check_dtypes(*tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes: {dt} vs {t.dtype}")
    return dt


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# structural ops

def conv2d_same(input: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 2-D convolution over an [H, W, Cin] cube.

    ``kernel`` is [k, k, Cin, Cout] with odd k; zero padding of (k-1)//2 on
    each border keeps the spatial extents unchanged.  ``bias`` is [Cout].
    """
    x, k, b = input.data, kernel.data, bias.data
    if x.ndim != 3 or k.ndim != 4 or b.ndim != 1:
        raise ShapeError(
            f"conv2d_same wants cube [H,W,Cin], kernel [k,k,Cin,Cout], bias [Cout]; "
            f"got {x.shape}, {k.shape}, {b.shape}"
        )
    kh, kw, cin, cout = k.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd extent, got {kh}x{kw}")
    if x.shape[2] != cin:
        raise ShapeError(f"input has {x.shape[2]} channels, kernel expects {cin}")
    if b.shape[0] != cout:
        raise ShapeError(f"bias has {b.shape[0]} channels, kernel produces {cout}")
    _check_dtypes(input, kernel, bias)
    out = _conv_same_raw(x, k) + b

    def adjoint(g):
        gx = gk = gb = None
        if input.requires_grad:
            # correlation adjoint: flip the taps, swap in/out channels
            flipped = k[::-1, ::-1].transpose(0, 1, 3, 2)
            gx = _conv_same_raw(g, flipped)
        if kernel.requires_grad:
            gk = _conv_kernel_grad(x, g, kh)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gx, gk, gb

    return _result("conv2d_same", (input, kernel, bias), out, adjoint)


def _conv_same_raw(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    pad = (k.shape[0] - 1) // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k.shape[0], k.shape[1]), axis=(0, 1))
    # win: [H, W, Cin, k, k]; contract (Cin, ki, kj) against kernel [ki, kj, Cin, Cout]
    return np.tensordot(win, k, axes=([2, 3, 4], [2, 0, 1]))


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, ksize: int) -> np.ndarray:
    pad = (ksize - 1) // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (ksize, ksize), axis=(0, 1))
    gk = np.tensordot(win, g, axes=([0, 1], [0, 1]))  # [Cin, k, k, Cout]
    return gk.transpose(1, 2, 0, 3)


def maxpool_2x2(input: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 and ceil semantics.

    Odd extents get a partial window on the trailing edge (realized by -inf
    padding, which never wins the max).  Ties inside a window route the
    gradient to the first maximal cell in row-major window order.
    """
    x = input.data
    if x.ndim != 3:
        raise ShapeError(f"maxpool_2x2 wants [H,W,C], got {x.shape}")
    h, w, c = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = x
    if h % 2 or w % 2:
        xp = np.pad(x, ((0, 2 * ho - h), (0, 2 * wo - w), (0, 0)),
                    constant_values=-np.inf)
    win = xp.reshape(ho, 2, wo, 2, c).transpose(0, 2, 1, 3, 4).reshape(ho, wo, 4, c)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def adjoint(g):
        gw = np.zeros((ho, wo, 4, c), dtype=g.dtype)
        np.put_along_axis(gw, arg[:, :, None, :], g[:, :, None, :], axis=2)
        gp = gw.reshape(ho, wo, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(2 * ho, 2 * wo, c)
        return (gp[:h, :w, :],)

    return _result("maxpool_2x2", (input,), out, adjoint)


def dense(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of a vector: weight [M, N] @ input [N] + bias [M]."""
    x, w, b = input.data, weight.data, bias.data
    if x.ndim != 1 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"dense wants vector/matrix/vector, got {x.shape}, {w.shape}, {b.shape}")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"dense shape mismatch: {w.shape} @ {x.shape} + {b.shape}")
    _check_dtypes(input, weight, bias)
    out = w @ x + b

    def adjoint(g):
        gx = w.T @ g if input.requires_grad else None
        gw = np.outer(g, x) if weight.requires_grad else None
        gb = g if bias.requires_grad else None
        return gx, gw, gb

    return _result("dense", (input, weight, bias), out, adjoint)


def matvec(weight: Tensor, input: Tensor) -> Tensor:
    """weight [M, N] @ input [N] without a bias term."""
    w, x = weight.data, input.data
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec shape mismatch: {w.shape} @ {x.shape}")
    _check_dtypes(weight, input)
    out = w @ x

    def adjoint(g):
        gw = np.outer(g, x) if weight.requires_grad else None
        gx = w.T @ g if input.requires_grad else None
        return gw, gx

    return _result("matvec", (weight, input), out, adjoint)


def add_broadcast_vector(cube: Tensor, vec: Tensor) -> Tensor:
    """Add a [C] vector to every spatial position of an [H, W, C] cube."""
    x, v = cube.data, vec.data
    if x.ndim != 3 or v.ndim != 1 or x.shape[2] != v.shape[0]:
        raise ShapeError(f"cannot broadcast {v.shape} over {x.shape}")
    _check_dtypes(cube, vec)
    out = x + v

    def adjoint(g):
        gc = g if cube.requires_grad else None
        gv = g.sum(axis=(0, 1)) if vec.requires_grad else None
        return gc, gv

    return _result("add_broadcast_vector", (cube, vec), out, adjoint)


def mul_broadcast_gate(gate: Tensor, cube: Tensor) -> Tensor:
    """Multiply an [H, W, 1] gate into every channel of an [H, W, C] cube."""
    gdat, x = gate.data, cube.data
    if gdat.ndim != 3 or gdat.shape[2] != 1 or x.ndim != 3 or gdat.shape[:2] != x.shape[:2]:
        raise ShapeError(f"gate {gdat.shape} does not broadcast over cube {x.shape}")
    _check_dtypes(gate, cube)
    out = gdat * x

    def adjoint(g):
        gg = (g * x).sum(axis=2, keepdims=True) if gate.requires_grad else None
        gc = g * gdat if cube.requires_grad else None
        return gg, gc

    return _result("mul_broadcast_gate", (gate, cube), out, adjoint)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [H, W, C] cubes along the channel axis."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"cannot concat channels of {a.shape} and {b.shape}")
    _check_dtypes(a, b)
    ca = a.shape[2]
    out = np.concatenate([a.data, b.data], axis=2)

    def adjoint(g):
        ga = g[:, :, :ca] if a.requires_grad else None
        gb = g[:, :, ca:] if b.requires_grad else None
        return ga, gb

    return _result("concat_channels", (a, b), out, adjoint)


def concat_vec(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two vectors."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"concat_vec wants vectors, got {a.shape} and {b.shape}")
    _check_dtypes(a, b)
    na = a.shape[0]
    out = np.concatenate([a.data, b.data])

    def adjoint(g):
        ga = g[:na] if a.requires_grad else None
        gb = g[na:] if b.requires_grad else None
        return ga, gb

    return _result("concat_vec", (a, b), out, adjoint)


def flatten(input: Tensor) -> Tensor:
    """Reshape to a vector (row-major)."""
    shape = input.shape
    out = input.data.reshape(-1)

    def adjoint(g):
        return (g.reshape(shape),)

    return _result("flatten", (input,), out, adjoint)


def stop_gradient(input: Tensor) -> Tensor:
    """Forward identity whose adjoint is exactly zero.

    The result shares the input's array but drops ``requires_grad``, so no
    tape record is created and nothing flows back through this point.
    """
    data = input.data
    if _STOP_FREEZE is not None:
        data = _STOP_FREEZE.take(data)
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def _check_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise ShapeError(f"{opname} wants equal shapes, got {a.shape} and {b.shape}")
    _check_dtypes(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def adjoint(g):
        return g, g

    return _result("add", (a, b), out, adjoint)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = a.data - b.data

    def adjoint(g):
        return g, -g

    return _result("sub", (a, b), out, adjoint)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = a.data * b.data

    def adjoint(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _result("mul", (a, b), out, adjoint)


def elementwise_max(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum; on ties the gradient routes to the first operand."""
    _check_same_shape(a, b, "elementwise_max")
    mask = a.data >= b.data
    out = np.where(mask, a.data, b.data)

    def adjoint(g):
        ga = g * mask if a.requires_grad else None
        gb = g * ~mask if b.requires_grad else None
        return ga, gb

    return _result("elementwise_max", (a, b), out, adjoint)


def scale(input: Tensor, factor: float) -> Tensor:
    """Multiply by a python float constant."""
    factor = float(factor)
    out = input.data * factor

    def adjoint(g):
        return (g * factor,)

    return _result("scale", (input,), out, adjoint)


def relu(input: Tensor) -> Tensor:
    """max(x, 0); the subgradient at the corner is 0."""
    x = input.data
    out = np.maximum(x, 0.0)

    def adjoint(g):
        return (g * (x > 0.0),)

    return _result("relu", (input,), out, adjoint)


def sqrt(input: Tensor) -> Tensor:
    """Elementwise square root of a non-negative tensor; derivative at 0 is taken as 0."""
    x = input.data
    if not (x >= 0.0).all():
        raise ValueError("sqrt of a negative value")
    out = np.sqrt(x)

    def adjoint(g):
        d = np.zeros_like(out)
        nz = out > 0.0
        d[nz] = 0.5 / out[nz]
        return (g * d,)

    return _result("sqrt", (input,), out, adjoint)


def tanh_act(input: Tensor) -> Tensor:
    out = np.tanh(input.data)

    def adjoint(g):
        return (g * (1.0 - out * out),)

    return _result("tanh_act", (input,), out, adjoint)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch exponentiates a large positive value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_act(input: Tensor) -> Tensor:
    """Numerically stable logistic sigmoid."""
    out = _sigmoid(input.data)

    def adjoint(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid_act", (input,), out, adjoint)


def mean_all(input: Tensor) -> Tensor:
    """Mean over every element, yielding a scalar."""
    if input.data.size == 0:
        raise ShapeError("mean_all of an empty tensor")
    out = np.asarray(input.data.mean(), dtype=input.dtype)

    def adjoint(g):
        return ((g / input.data.size) * np.ones_like(input.data),)

    return _result("mean_all", (input,), out, adjoint)


def sum_all(input: Tensor) -> Tensor:
    """Sum over every element, yielding a scalar."""
    out = np.asarray(input.data.sum(), dtype=input.dtype)

    def adjoint(g):
        return (g * np.ones_like(input.data),)

    return _result("sum_all", (input,), out, adjoint)


def mean_stack(inputs: Sequence[Tensor]) -> Tensor:
    """Mean of same-shaped tensors, as one record instead of an add chain."""
    if len(inputs) == 0:
        raise ShapeError("mean_stack needs at least one tensor")
    first = inputs[0]
    for t in inputs[1:]:
        _check_same_shape(first, t, "mean_stack")
    n = len(inputs)
    acc = inputs[0].data.copy()
    for t in inputs[1:]:
        acc += t.data
    out = acc / n

    def adjoint(g):
        c = g / n
        return (c,) * n

    return _result("mean_stack", tuple(inputs), out, adjoint)


def softmax_nll(logits: Tensor, target: int) -> Tensor:
    """Negative log softmax probability of class ``target``, numerically stable."""
    z = logits.data
    if z.ndim != 1:
        raise ShapeError(f"softmax_nll wants a logit vector, got {z.shape}")
    target = int(target)
    if not 0 <= target < z.shape[0]:
        raise IndexError(f"target {target} outside [0, {z.shape[0]})")
    m = z.max()
    shifted = z - m
    ex = np.exp(shifted)
    total = ex.sum()
    out = np.asarray(np.log(total) - shifted[target], dtype=z.dtype)
    probs = ex / total

    def adjoint(g):
        d = probs.copy()
        d[target] -= 1.0
        return (g * d,)

    return _result("softmax_nll", (logits,), out, adjoint)


# ---------------------------------------------------------------------------
# finite-difference verification

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], epsilon: float = 1e-5,
               freeze_stops: bool = False) -> float:
    """Compare tape adjoints of scalar ``f(*inputs)`` against central differences.

    Every coordinate of every input with ``requires_grad`` is perturbed by
    +/- epsilon.  The error metric per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``, which behaves
    like an absolute error near zero and a relative error for large values;
    the worst coordinate is returned.  ``f`` must be deterministic and the
    inputs must be float64.

    ``freeze_stops`` pins every stop_gradient value at what the recording
    pass produced, so the differences probe the partial function the tape
    actually differentiates.  Without it, an objective containing a live
    stopped branch disagrees with the differences by construction.
    """
    global _STOP_FREEZE
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        if not t.data.flags["C_CONTIGUOUS"]:
            t.data = np.ascontiguousarray(t.data)
    if freeze_stops and _STOP_FREEZE is not None:
        raise RuntimeError("nested freeze_stops grad_check calls are not supported")
    freeze = _StopFreeze() if freeze_stops else None
    try:
        if freeze is not None:
            _STOP_FREEZE = freeze
        with Tape() as tape:
            loss = f(*inputs)
        if freeze is not None:
            freeze.begin_replay()
        if loss.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar objective, got {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("objective is not finite")
        for t in inputs:
            t.grad = None  # stale gradients from earlier passes must not leak in
        tape.backward(loss)
        return _numeric_sweep(f, inputs, epsilon, freeze)
    finally:
        if freeze is not None:
            _STOP_FREEZE = None


def _numeric_sweep(f, inputs, epsilon, freeze) -> float:
    def evaluate() -> float:
        if freeze is not None:
            freeze.begin_replay()
        value = f(*inputs).data.item()
        if freeze is not None:
            freeze.check_drained()
        return value

    worst = 0.0
    with no_recording():
        for t in inputs:
            if not t.requires_grad:
                continue
            if t.grad is None:
                raise RuntimeError("backward left a requires_grad input without a gradient")
            if not np.isfinite(t.grad).all():
                raise NonFiniteError("analytic gradient is not finite")
            analytic = t.grad.reshape(-1)
            flat = t.data.reshape(-1)  # view; perturbations hit t.data in place
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = evaluate()
                flat[i] = orig - epsilon
                fm = evaluate()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("objective not finite under perturbation")
                numeric = (fp - fm) / (2.0 * epsilon)
                a = float(analytic[i])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                if err > worst:
                    worst = err
    return worst
