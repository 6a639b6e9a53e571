"""Float64 tensor ops, a reverse-mode gradient tape, Adam, and a gradient checker.

Everything downstream (attention, the fusion model, decoding) is built on the
small op set here. Design points:

* all storage is float64, row-major; no implicit dtype promotion
* the tape is a flat list of backward closures replayed exactly once, in
  reverse recording order; parameters that never touched the loss get zero
  gradients
* GeLU is the exact Gaussian-CDF form x * Phi(x), not the tanh fit
* masked softmax stabilises by subtracting the row max over unmasked entries
  and writes exact zeros at masked positions
* Adam uses bias correction and a linear learning-rate warm-up ramp
* the finite-difference checker is deliberately independent of the tape: it
  only ever calls the loss as a black box, so the two gradient routes can
  cross-validate each other
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

from .errors import InvariantError

Array = np.ndarray

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Shape plus flat row-major float64 storage, with an optional gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data: Array = arr
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def values(self) -> Array:
        """Flat row-major view of the storage."""
        return self.data.reshape(-1)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# gradient tape
# ---------------------------------------------------------------------------

_TAPES = threading.local()


def _tape_stack() -> list["GradientTape"]:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


def _active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradientTape:
    """Ordered record of differentiable ops; single-owner, single-threaded.

    Use as a context manager; ops executed inside the block register their
    backward closures. gradients() replays the record exactly once in reverse
    and may only be called once per tape.
    """

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._touched: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - would be a caller bug
            raise InvariantError("gradient tape stack corrupted")

    def gradients(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Array]:
        """d(loss)/d(p) for every named parameter; zeros for unused ones."""
        if self._consumed:
            raise InvariantError("gradient tape already consumed")
        self._consumed = True
        if loss.shape != ():
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        loss.grad = np.ones((), dtype=np.float64)
        for backward in reversed(self._ops):
            backward()
        out: dict[str, Array] = {}
        for name, p in params.items():
            out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        for t in self._touched:
            t.grad = None
        for p in params.values():
            p.grad = None
        loss.grad = None
        return out


def _accum(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _record(out: Tensor, backward: Callable[[Array], None], *inputs: Tensor) -> None:
    tape = _active_tape()
    if tape is None:
        return

    def closure():
        g = out.grad
        if g is not None:
            backward(g)

    tape._ops.append(closure)
    tape._touched.append(out)
    tape._touched.extend(inputs)


# ---------------------------------------------------------------------------
# traced ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b, same shape."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    _record(out, backward, a, b)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (n, m) plus bias row b (m,), broadcast over rows."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"add_bias shape mismatch: {x.shape} vs {b.shape}")
    out = Tensor(x.data + b.data)

    def backward(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    _record(out, backward, x, b)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, same shape."""
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    _record(out, backward, a, b)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """a times a python scalar."""
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g):
        _accum(a, g * c)

    _record(out, backward, a)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a (n, k) @ b (k, m)."""
    out = Tensor(a.data @ b.data)

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    _record(out, backward, a, b)
    return out


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a (n, k) @ b.T for b (m, k); avoids materialising transposes."""
    out = Tensor(a.data @ b.data.T)

    def backward(g):
        _accum(a, g @ b.data)
        _accum(b, g.T @ a.data)

    _record(out, backward, a, b)
    return out


def gather_rows(table: Tensor, ids) -> Tensor:
    """Rows table[ids] for an int index vector; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        _accum(table, acc)

    _record(out, backward, table)
    return out


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Column slice x[:, lo:hi]."""
    out = Tensor(x.data[:, lo:hi])

    def backward(g):
        acc = np.zeros_like(x.data)
        acc[:, lo:hi] = g
        _accum(x, acc)

    _record(out, backward, x)
    return out


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def backward(g):
        lo = 0
        for p, w in zip(parts, widths):
            _accum(p, g[:, lo : lo + w])
            lo += w

    _record(out, backward, *parts)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = Tensor(x.data.sum())

    def backward(g):
        _accum(x, np.full_like(x.data, float(g)))

    _record(out, backward, x)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise layer norm of x (n, d) with scale gamma (d,) and offset beta (d,)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g):
        dxhat = g * gamma.data
        _accum(gamma, (g * xhat).sum(axis=0))
        _accum(beta, g.sum(axis=0))
        term = dxhat - dxhat.mean(axis=-1, keepdims=True)
        term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * term)

    _record(out, backward, x, gamma, beta)
    return out


# ---------------------------------------------------------------------------
# GeLU (exact Gaussian CDF form)
# ---------------------------------------------------------------------------


def _norm_cdf(x: Array) -> Array:
    return 0.5 * (1.0 + erf(x / _SQRT2))


def _norm_pdf(x: Array) -> Array:
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x):
    """x * Phi(x) with the exact standard-normal CDF.

    Accepts a python float, an ndarray, or a Tensor (traced); returns the
    same kind.
    """
    if isinstance(x, Tensor):
        out = Tensor(x.data * _norm_cdf(x.data))

        def backward(g):
            _accum(x, g * (_norm_cdf(x.data) + x.data * _norm_pdf(x.data)))

        _record(out, backward, x)
        return out
    arr = np.asarray(x, dtype=np.float64)
    result = arr * _norm_cdf(arr)
    return float(result) if np.isscalar(x) or arr.ndim == 0 else result


# ---------------------------------------------------------------------------
# masked softmax
# ---------------------------------------------------------------------------


def _masked_softmax_forward(logits: Array, mask: Array) -> Array:
    blocked = np.isneginf(mask)
    if np.any(blocked.all(axis=-1)):
        raise InvariantError("empty attention support")
    shifted = np.where(blocked, -np.inf, logits)
    rowmax = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - rowmax)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_masked(logits, mask) -> Array:
    """softmax(logits + mask) along the last axis for an additive {0, -inf} mask.

    Masked positions come out exactly 0; each row of the result sums to 1.
    A row with no unmasked entry is a caller bug and raises InvariantError.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape != mask.shape:
        raise ValueError(f"softmax_masked shape mismatch: {logits.shape} vs {mask.shape}")
    finite = ~np.isneginf(mask)
    if not np.all(mask[finite] == 0.0):
        raise ValueError("mask entries must be 0 or -inf")
    return _masked_softmax_forward(logits, mask)


def masked_softmax(logits: Tensor, mask: Array) -> Tensor:
    """Traced row-wise masked softmax; the mask is a constant {0, -inf} array."""
    p = _masked_softmax_forward(logits.data, np.asarray(mask, dtype=np.float64))
    out = Tensor(p)

    def backward(g):
        dot = (p * g).sum(axis=-1, keepdims=True)
        _accum(logits, p * (g - dot))

    _record(out, backward, logits)
    return out


def cross_entropy_sum(logits: Tensor, targets) -> Tensor:
    """Sum of -log softmax(logits)[i, targets[i]] over rows of logits (n, v)."""
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    n = x.shape[0]
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match {n} rows")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1)
    lse = m[:, 0] + np.log(z)
    nll = lse - x[np.arange(n), targets]
    out = Tensor(nll.sum())
    probs = e / z[:, None]

    def backward(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        _accum(logits, d * float(g))

    _record(out, backward, logits)
    return out


# ---------------------------------------------------------------------------
# Adam with linear warm-up
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the warm-up schedule."""

    peak_lr: float
    warmup_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def effective_lr(self, step: int) -> float:
        """Linear ramp to peak_lr over warmup_steps, then constant."""
        if self.warmup_steps <= 0:
            return self.peak_lr
        return self.peak_lr * min(1.0, step / self.warmup_steps)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Array], state: OptimizerState) -> None:
    """One in-place Adam update with bias correction and the warm-up ramp."""
    state.step += 1
    t = state.step
    lr = state.effective_lr(t)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"no gradient supplied for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: {g.shape} vs {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradientCheckReport:
    """Max relative tape-vs-numeric error per parameter group."""

    max_rel_error: dict[str, float]
    tol: float
    worst_param: str
    worst_index: int

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradientCheckReport:
    """Compare tape gradients against central finite differences.

    loss_fn must build a scalar loss from the *current* contents of params
    and must be deterministic; it is evaluated twice up front and any
    difference raises InvariantError. Relative error per element is
    |a - b| / max(|a|, |b|, 1e-8); the report keeps the max per group.
    """
    f0 = float(loss_fn().data)
    f1 = float(loss_fn().data)
    if f0 != f1:
        raise InvariantError("loss function is not deterministic")

    with GradientTape() as tape:
        loss = loss_fn()
    grads = tape.gradients(loss, params)

    report: dict[str, float] = {}
    worst_param = ""
    worst_index = -1
    worst_err = -1.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        group_max = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = gflat[i]
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            if rel > group_max:
                group_max = rel
            if rel > worst_err:
                worst_err = rel
                worst_param = name
                worst_index = i
        report[name] = group_max
    return GradientCheckReport(max_rel_error=report, tol=tol, worst_param=worst_param, worst_index=worst_index)
