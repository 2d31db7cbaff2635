"""Tape-based reverse-mode differentiation over 2-D float64 arrays.

Only the handful of primitives the encoder and the losses need are
provided. Every tensor is a 2-D array; scalars are 1x1.

    tape = Tape()
    w = tape.watch(weight)            # weight is a plain ndarray
    out = sum_all(relu(matmul(x, w)))
    tape.backward(out)
    tape.grad_of(weight)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "tape", "requires_grad")

    def __init__(self, value, tape: "Tape | None" = None, requires_grad: bool = False):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"expected a 2-D array, got shape {arr.shape}")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records primitive applications; ``backward`` replays them in reverse."""

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._watched: dict[int, tuple[np.ndarray, Tensor]] = {}

    def watch(self, array: np.ndarray) -> Tensor:
        # Memoised on identity so a parameter used twice shares one gradient.
        key = id(array)
        hit = self._watched.get(key)
        if hit is not None and hit[0] is array:
            return hit[1]
        t = Tensor(array, tape=self, requires_grad=True)
        self._watched[key] = (array, t)
        return t

    def grad_of(self, array: np.ndarray) -> np.ndarray:
        hit = self._watched.get(id(array))
        if hit is None or hit[0] is not array or hit[1].grad is None:
            return np.zeros_like(np.atleast_2d(np.asarray(array, dtype=np.float64)))
        return hit[1].grad

    def record(self, fn: Callable[[], None]) -> None:
        self._ops.append(fn)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, out: Tensor) -> None:
        if out.value.size != 1:
            raise DimensionError("backward() needs a scalar (1x1) output")
        out._accumulate(np.ones((1, 1)))
        for fn in reversed(self._ops):
            fn()
        self._ops.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, inputs: Sequence[Tensor]) -> Tensor:
    tape = None
    for t in inputs:
        if t.requires_grad and t.tape is not None:
            tape = t.tape
            break
    return Tensor(value, tape=tape, requires_grad=tape is not None)


def _link(out: Tensor, backward: Callable[[np.ndarray], None]) -> Tensor:
    if out.requires_grad:
        def fn():
            if out.grad is not None:
                backward(out.grad)
        out.tape.record(fn)
    return out


def _push(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(g)


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = _result(a.value @ b.value, (a, b))

    def backward(g):
        _push(a, g @ b.value.T)
        _push(b, a.value.T @ g)

    return _link(out, backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.value.T.copy(), (a,))
    return _link(out, lambda g: _push(a, g.T))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} + {b.shape}")
    out = _result(a.value + b.value, (a, b))

    def backward(g):
        _push(a, g)
        _push(b, g)

    return _link(out, backward)


def add_bias(x, bias) -> Tensor:
    """Broadcast a 1 x C bias over the rows of an N x C input."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.shape != (1, x.shape[1]):
        raise DimensionError(f"add_bias: bias {bias.shape} for input {x.shape}")
    out = _result(x.value + bias.value, (x, bias))

    def backward(g):
        _push(x, g)
        _push(bias, g.sum(axis=0, keepdims=True))

    return _link(out, backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.value > 0
    out = _result(np.where(mask, x.value, 0.0), (x,))
    return _link(out, lambda g: _push(x, g * mask))


def l2_normalize_rows(x, eps: float = NORM_EPS) -> Tensor:
    x = _as_tensor(x)
    norms = np.sqrt(np.sum(x.value * x.value, axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = x.value / denom
    out = _result(y, (x,))
    clamped = norms < eps

    def backward(g):
        # (I - y y^T) / |x| per row; rows under the floor are a plain scaling.
        proj = g - y * np.sum(g * y, axis=1, keepdims=True)
        _push(x, np.where(clamped, g, proj) / denom)

    return _link(out, backward)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    out = _result(x.value * c, (x,))
    return _link(out, lambda g: _push(x, g * c))


def mul_const(x, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant (non-differentiable) array."""
    x = _as_tensor(x)
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape:
        raise DimensionError(f"mul_const: {x.shape} * {c.shape}")
    out = _result(x.value * c, (x,))
    return _link(out, lambda g: _push(x, g * c))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.value)
    out = _result(y, (x,))
    return _link(out, lambda g: _push(x, g * y))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.value <= 0):
        raise FloatingPointError("log of a non-positive entry")
    out = _result(np.log(x.value), (x,))
    return _link(out, lambda g: _push(x, g / x.value))


def _row_mask(x: Tensor, mask) -> np.ndarray:
    if mask is None:
        return np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask {mask.shape} for input {x.shape}")
    return mask


def _masked_softmax(v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    shifted = np.where(mask, v, -np.inf)
    row_max = shifted.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(mask, np.exp(np.where(mask, v - row_max, 0.0)), 0.0)
    z = e.sum(axis=1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


def softmax_rows(x, mask=None) -> Tensor:
    """Row softmax restricted to ``mask`` entries; masked-out entries are 0."""
    x = _as_tensor(x)
    m = _row_mask(x, mask)
    p = _masked_softmax(x.value, m)
    out = _result(p, (x,))

    def backward(g):
        _push(x, p * (g - np.sum(g * p, axis=1, keepdims=True)))

    return _link(out, backward)


def log_softmax_rows(x, mask=None) -> Tensor:
    """Stable row log-softmax over ``mask`` entries; masked-out entries are 0."""
    x = _as_tensor(x)
    m = _row_mask(x, mask)
    v = np.where(m, x.value, -np.inf)
    row_max = v.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    shifted = np.where(m, x.value - row_max, 0.0)
    z = np.where(m, np.exp(shifted), 0.0).sum(axis=1, keepdims=True)
    lse = np.log(np.where(z > 0, z, 1.0))
    y = np.where(m, shifted - lse, 0.0)
    p = _masked_softmax(x.value, m)
    out = _result(y, (x,))

    def backward(g):
        gm = np.where(m, g, 0.0)
        _push(x, gm - p * gm.sum(axis=1, keepdims=True))

    return _link(out, backward)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = _result(np.array([[x.value.sum()]]), (x,))
    return _link(out, lambda g: _push(x, np.full(x.shape, g[0, 0])))


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    n = x.value.size
    out = _result(np.array([[x.value.sum() / n]]), (x,))
    return _link(out, lambda g: _push(x, np.full(x.shape, g[0, 0] / n)))


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_abs: float
    max_rel: float
    per_param: list[tuple[float, float]] = field(default_factory=list)

    def ok(self, tol: float) -> bool:
        return self.max_rel < tol


def grad_check(
    f: Callable[[Tape, list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
    tol: float | None = None,
) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``f(tape, watched)`` must build a scalar from the watched parameters.
    Relative deviation is measured per parameter array as
    max|analytic - numeric| / max(max|analytic|, max|numeric|).
    When ``tol`` is given an AssertionError is raised on failure.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [np.asarray(p, dtype=np.float64) for p in params]

    tape = Tape()
    out = f(tape, [tape.watch(p) for p in params])
    if not np.isfinite(out.value).all():
        raise NonFiniteError("f returned a non-finite value")
    tape.backward(out)
    analytic = [tape.grad_of(p).copy() for p in params]

    def evaluate() -> float:
        val = f(Tape(), [Tensor(p) for p in params]).item()
        if not np.isfinite(val):
            raise NonFiniteError("f returned a non-finite value")
        return val

    report = GradCheckReport(0.0, 0.0)
    for p, a in zip(params, analytic):
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate()
            flat[i] = orig - step
            lo = evaluate()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * step)
        dev = float(np.max(np.abs(a - num))) if p.size else 0.0
        scale_ = max(float(np.max(np.abs(a))), float(np.max(np.abs(num))), 1e-300)
        rel = dev / scale_ if dev > 0 else 0.0
        report.per_param.append((dev, rel))
        report.max_abs = max(report.max_abs, dev)
        report.max_rel = max(report.max_rel, rel)
    if tol is not None and not report.ok(tol):
        raise AssertionError(f"gradient check failed: rel={report.max_rel:.3e} >= {tol}")
    return report


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr_now: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter {name!r} {params[name].shape}")
    lr = state.lr if lr_now is None else lr_now
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def linear_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)
