"""Dense tensors with reverse-mode autodiff, emulated half precision, and memory accounting.

Everything else in the package sits on this substrate. Design points:

* Storage is always float32. The F16E dtype tags a tensor whose values have been
  rounded through IEEE binary16; arithmetic still accumulates in full precision,
  which is exactly the behaviour mixed-precision hardware gives you for matmuls.
* The graph is dynamic: every op records its parents and a backward closure when
  gradient tracking is on. Gradients are plain float32 ndarrays and accumulate
  additively until an optimizer clears them.
* A MemoryLedger counts live buffer bytes (4 per F32 element, 2 per F16E, grads
  always 4) as the stand-in for device memory. Each training run owns a ledger via
  `use_ledger`, so parallel sweeps never share counters.
"""
from __future__ import annotations

import contextlib
import contextvars
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

F32 = "f32"
F16E = "f16e"

_WIDTH = {F32: 4, F16E: 2}

def _quiet():
    """Fresh errstate (numpy 2.x errstate objects are single-use)."""
    return np.errstate(over="ignore", invalid="ignore", divide="ignore")


_F16_MIN_NORMAL = np.float32(2.0 ** -14)
_F16_SUB_SCALE = np.float32(2.0 ** 24)
_F16_SUB_INV = np.float32(2.0 ** -24)


def quantize_f16(arr: np.ndarray) -> np.ndarray:
    """Round every element to its nearest binary16 value, keeping float32 storage.

    Elements inside binary16's subnormal range are rounded in fixed point
    (the subnormal grid has constant spacing 2**-24, and rint matches the
    conversion's ties-to-even) rather than passed through the hardware f16
    conversion: x86 services denormal results with microcode assists that
    run ~30x slower, a penalty real half-precision units do not have.
    """
    arr = np.asarray(arr, dtype=np.float32)
    with _quiet():
        small = np.abs(arr) < _F16_MIN_NORMAL
        if small.any():
            lo = np.rint(arr * _F16_SUB_SCALE) * _F16_SUB_INV
            hi = np.where(small, np.float32(0.0), arr)
            hi = hi.astype(np.float16).astype(np.float32)
            return np.where(small, lo, hi)
        return arr.astype(np.float16).astype(np.float32)


# ---------------------------------------------------------------------------
# memory accounting
# ---------------------------------------------------------------------------

class MemoryCapExceeded(RuntimeError):
    """An allocation would push a capped ledger past its limit."""


class MemoryLedger:
    """High-water-mark byte counter over live tensor buffers.

    Counts logical buffer bytes only (no bookkeeping structs), so benchmark
    numbers are interpretable as a device-memory proxy.
    """

    __slots__ = ("live_bytes", "peak_bytes", "cap_bytes", "_lock")

    def __init__(self, cap_bytes: int | None = None) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0
        self.cap_bytes = cap_bytes
        self._lock = threading.Lock()

    def alloc(self, nbytes: int) -> None:
        with self._lock:
            if self.cap_bytes is not None and self.live_bytes + nbytes > self.cap_bytes:
                raise MemoryCapExceeded(
                    f"allocation of {nbytes} bytes exceeds cap "
                    f"({self.live_bytes} live of {self.cap_bytes})"
                )
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes

    def free(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.live_bytes


_default_ledger = MemoryLedger()
_active_ledger: contextvars.ContextVar[MemoryLedger] = contextvars.ContextVar("active_ledger")


def active_ledger() -> MemoryLedger:
    return _active_ledger.get(_default_ledger)


@contextlib.contextmanager
def use_ledger(ledger: MemoryLedger):
    """Route tensor allocations in this context to `ledger`."""
    token = _active_ledger.set(ledger)
    try:
        yield ledger
    finally:
        _active_ledger.reset(token)


def reset_peak() -> None:
    active_ledger().reset_peak()


def peak_bytes() -> int:
    return active_ledger().peak_bytes


def live_bytes() -> int:
    return active_ledger().live_bytes


# ---------------------------------------------------------------------------
# grad / autocast modes
# ---------------------------------------------------------------------------

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled")
_autocast_on: contextvars.ContextVar[bool] = contextvars.ContextVar("autocast_on")


def grad_enabled() -> bool:
    return _grad_enabled.get(True)


def autocast_enabled() -> bool:
    return _autocast_on.get(False)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def autocast(enabled: bool = True):
    """Half-precision region: matmul/conv/embedding inputs and outputs become F16E."""
    token = _autocast_on.set(enabled)
    try:
        yield
    finally:
        _autocast_on.reset(token)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = (
        "data", "dtype", "requires_grad", "grad",
        "_parents", "_backward", "_ledger", "_alloc_bytes", "_grad_bytes",
        "__weakref__",
    )

    def __init__(
        self,
        data,
        dtype: str = F32,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ) -> None:
        arr = np.asarray(data, dtype=np.float32)
        if dtype == F16E:
            arr = quantize_f16(arr)
        elif dtype != F32:
            raise ValueError(f"unknown dtype {dtype!r}")
        # Register with the ledger before wiring fields; __del__ tolerates a
        # partially built tensor if the cap check raises here.
        self._ledger = None
        self._alloc_bytes = 0
        self._grad_bytes = 0
        ledger = active_ledger()
        nbytes = arr.size * _WIDTH[dtype]
        ledger.alloc(nbytes)
        self._ledger = ledger
        self._alloc_bytes = nbytes
        self.data = arr
        self.dtype = dtype
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    # -- lifecycle ---------------------------------------------------------

    def __del__(self):
        ledger = getattr(self, "_ledger", None)
        if ledger is not None:
            ledger.free(self._alloc_bytes + self._grad_bytes)

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------------

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float32, copy=True)
            self._grad_bytes = self.grad.size * 4
            self._ledger.alloc(self._grad_bytes)
        else:
            self.grad += g

    def clear_grad(self) -> None:
        if self.grad is not None:
            self._ledger.free(self._grad_bytes)
            self._grad_bytes = 0
            self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss; grads accumulate additively."""
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return index(self, key)

    def cast(self, dtype: str) -> "Tensor":
        return cast(self, dtype)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


# ---------------------------------------------------------------------------
# op construction helpers
# ---------------------------------------------------------------------------

def _make(
    data: np.ndarray,
    dtype: str,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None] | None,
) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(
        data,
        dtype=dtype,
        requires_grad=track,
        _parents=tuple(p for p in parents if p.requires_grad) if track else (),
        _backward=backward if track else None,
    )


def _promote(*ts: Tensor) -> str:
    # Elementwise ops keep F16E only when every input is F16E; mixing with a
    # full F32 tensor promotes. 0-d constants are weak: they never promote a
    # half-precision stream (mirrors framework scalar-promotion rules).
    strong = [t for t in ts if t.ndim > 0 or t.requires_grad] or list(ts)
    return F16E if all(t.dtype == F16E for t in strong) else F32


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape_error(op: str, *ts: Tensor) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {[t.shape for t in ts]}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        with _quiet():
            out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a, b) from None

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out, _promote(a, b), (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        with _quiet():
            out = a.data - b.data
    except ValueError:
        raise _shape_error("sub", a, b) from None

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out, _promote(a, b), (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        with _quiet():
            out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a, b) from None

    def backward(g):
        with _quiet():
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out, _promote(a, b), (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        with _quiet():
            out = a.data / b.data
    except ValueError:
        raise _shape_error("div", a, b) from None

    def backward(g):
        with _quiet():
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, _promote(a, b), (a, b), backward)


# ---------------------------------------------------------------------------
# contractions and structure ops
# ---------------------------------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b routed around two OpenBLAS weak spots, bit-identically.

    A k==1 contraction (both matmuls of every rank-1 adapter produce one
    per step) hits a degenerate gemm kernel that runs an order of magnitude
    slower than k==2, so it is zero-padded to k==2: the extra 0.0 * 0.0
    term leaves every float unchanged. Stacked operands against a plain
    matrix are flattened into one tall gemm, which skips the batched-gemm
    loop; per-row dot products do not care about the batch structure.
    """
    if b.ndim == 2 and a.ndim >= 2:
        rows = a.reshape(-1, a.shape[-1]) if a.ndim > 2 else a
        if a.shape[-1] == 1:
            padded = np.empty((rows.shape[0], 2), dtype=rows.dtype)
            padded[:, 0] = rows[:, 0]
            padded[:, 1] = 0.0
            rows = padded
            b = np.vstack((b, np.zeros_like(b)))
        out = rows @ b
        return out.reshape(*a.shape[:-1], b.shape[1]) if a.ndim > 2 else out
    if a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == 1:
        # batched rhs never co-occurs with k==1 on the hot path
        return np.einsum("...mk,...kn->...mn", a, b)
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a, b)
    if autocast_enabled():
        a = a if a.dtype == F16E else cast(a, F16E)
        b = b if b.dtype == F16E else cast(b, F16E)
        out_dtype = F16E
    else:
        out_dtype = _promote(a, b)
    with _quiet():
        out = _mm(a.data, b.data)  # float32 accumulation regardless of tag

    def backward(g):
        with _quiet():
            if a.requires_grad:
                ga = _mm(g, np.swapaxes(b.data, -1, -2))
                a.accumulate_grad(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = _mm(np.swapaxes(a.data, -1, -2), g)
                b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(out, out_dtype, (a, b), backward)


def cast(t: Tensor, dtype: str) -> Tensor:
    # Quantization counts as identity for gradients (straight-through), which is
    # the mixed-precision convention: grads flow unchanged in full precision.
    def backward(g):
        t.accumulate_grad(g)

    return _make(t.data, dtype, (t,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T (+ bias) as one node, the GEMM-with-epilogue shape every
    dense layer takes. weight is [out, in]; x is [..., in].

    Under autocast the operands are quantized in place of allocating cast
    nodes, so a half-precision linear leaves behind exactly one activation.
    """
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise _shape_error("linear", x, weight)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_error("linear bias", bias, weight)
    half = autocast_enabled()
    with _quiet():
        xd = quantize_f16(x.data) if half and x.dtype != F16E else x.data
        wd = quantize_f16(weight.data) if half else weight.data
        out = xd @ wd.T
        if bias is not None:
            out = out + (quantize_f16(bias.data) if half else bias.data)

    def backward(g):
        with _quiet():
            # same quantized operands the forward used, rebuilt transiently
            xb = quantize_f16(x.data) if half and x.dtype != F16E else x.data
            wb = quantize_f16(weight.data) if half else weight.data
            if x.requires_grad:
                x.accumulate_grad(_mm(g, wb))
            if weight.requires_grad:
                g2 = g.reshape(-1, weight.shape[0])
                weight.accumulate_grad(_mm(g2.T, xb.reshape(-1, weight.shape[1])))
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.reshape(-1, weight.shape[0]).sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, F16E if half else _promote(x, weight), parents, backward)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = t.data.reshape(shape)

    def backward(g):
        t.accumulate_grad(g.reshape(t.shape))

    return _make(out, t.dtype, (t,), backward)


def transpose(t: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = np.transpose(t.data, axes)
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))

    def backward(g):
        t.accumulate_grad(np.transpose(g, inverse))

    return _make(out, t.dtype, (t,), backward)


def index(t: Tensor, key) -> Tensor:
    out = t.data[key]

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, key, g)
        t.accumulate_grad(full)

    return _make(out, t.dtype, (t,), backward)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("concat", *ts) from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _make(out, _promote(*ts), tuple(ts), backward)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in ts]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("stack", *ts) from None

    def backward(g):
        parts = np.split(g, len(ts), axis=axis)
        for t, part in zip(ts, parts):
            if t.requires_grad:
                t.accumulate_grad(np.squeeze(part, axis=axis))

    return _make(out, _promote(*ts), tuple(ts), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(t: Tensor) -> Tensor:
    out = np.maximum(t.data, 0.0)

    def backward(g):
        t.accumulate_grad(g * (t.data > 0))

    return _make(out, t.dtype, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    with _quiet():
        s = np.where(t.data >= 0, 1.0 / (1.0 + np.exp(-t.data)),
                     np.exp(t.data) / (1.0 + np.exp(t.data))).astype(np.float32)

    def backward(g):
        t.accumulate_grad(g * s * (1.0 - s))

    return _make(s, t.dtype, (t,), backward)


def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.data)

    def backward(g):
        t.accumulate_grad(g * (1.0 - out * out))

    return _make(out, t.dtype, (t,), backward)


def exp(t: Tensor) -> Tensor:
    with _quiet():
        out = np.exp(t.data)

    def backward(g):
        with _quiet():
            t.accumulate_grad(g * out)

    return _make(out, F32, (t,), backward)


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0):
        raise ValueError("log domain error: input has non-positive elements")
    out = np.log(t.data)

    def backward(g):
        t.accumulate_grad(g / t.data)

    return _make(out, F32, (t,), backward)


def sqrt(t: Tensor) -> Tensor:
    if np.any(t.data < 0):
        raise ValueError("sqrt domain error: input has negative elements")
    out = np.sqrt(t.data)

    def backward(g):
        with _quiet():
            t.accumulate_grad(g / (2.0 * out))

    return _make(out, F32, (t,), backward)


def tabs(t: Tensor) -> Tensor:
    out = np.abs(t.data)

    def backward(g):
        t.accumulate_grad(g * np.sign(t.data))

    return _make(out, t.dtype, (t,), backward)


def softplus(t: Tensor) -> Tensor:
    # log(1 + exp(x)) in the overflow-safe form max(x, 0) + log1p(exp(-|x|)).
    with _quiet():
        out = np.maximum(t.data, 0.0) + np.log1p(np.exp(-np.abs(t.data)))
        sig = np.where(t.data >= 0, 1.0 / (1.0 + np.exp(-t.data)),
                       np.exp(t.data) / (1.0 + np.exp(t.data)))

    def backward(g):
        t.accumulate_grad(g * sig)

    return _make(out, F32, (t,), backward)


def clip(t: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(t.data, lo, hi)

    def backward(g):
        t.accumulate_grad(g * ((t.data >= lo) & (t.data <= hi)))

    return _make(out, t.dtype, (t,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            t.accumulate_grad(np.broadcast_to(g, t.shape).astype(np.float32))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            t.accumulate_grad(np.broadcast_to(gg, t.shape).astype(np.float32))

    return _make(out, F32, (t,), backward)


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = t.data.mean(axis=axis, keepdims=keepdims)
    n = t.size if axis is None else t.size // out.size

    def backward(g):
        if axis is None:
            t.accumulate_grad((np.broadcast_to(g, t.shape) / n).astype(np.float32))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            t.accumulate_grad((np.broadcast_to(gg, t.shape) / n).astype(np.float32))

    return _make(out, F32, (t,), backward)


def tmax(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = t.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            hits = (t.data == out)
            t.accumulate_grad(np.broadcast_to(g, t.shape) * hits / hits.sum())
        else:
            o = out if keepdims else np.expand_dims(out, axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            hits = (t.data == o)
            counts = hits.sum(axis=axis, keepdims=True)
            t.accumulate_grad(np.broadcast_to(gg, t.shape) * hits / counts)

    return _make(out, F32, (t,), backward)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(t: Tensor, axis: int = -1) -> Tensor:
    with _quiet():
        shifted = t.data - t.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        with _quiet():
            dot = (g * out).sum(axis=axis, keepdims=True)
            t.accumulate_grad(out * (g - dot))

    # reductions always run in F32; under autocast only the stored result
    # drops to half, the usual fused-kernel convention
    out_dtype = F16E if autocast_enabled() else F32
    return _make(out, out_dtype, (t,), backward)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    with _quiet():
        shifted = t.data - t.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        probs = np.exp(out)

    def backward(g):
        t.accumulate_grad(g - probs * g.sum(axis=axis, keepdims=True))

    return _make(out, F32, (t,), backward)


# ---------------------------------------------------------------------------
# structured ops for the model stack
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding_lookup: ids outside [0, {table.shape[0]}) "
            f"(got min {ids.min()}, max {ids.max()})"
        )
    out = table.data[ids]
    out_dtype = F16E if autocast_enabled() else table.dtype

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table.accumulate_grad(full)

    return _make(out, out_dtype, (table,), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation over the last axis, stride 1, no padding.

    x: [N, C_in, L]; weight: [C_out, C_in, K]; bias: [C_out].
    Output: [N, C_out, L - K + 1].
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError(f"conv1d expects 3-d input and weight, got {x.shape}, {weight.shape}")
    n, c_in, length = x.shape
    c_out, c_in_w, k = weight.shape
    if c_in != c_in_w:
        raise _shape_error("conv1d channels", x, weight)
    if length < k:
        raise ValueError(f"conv1d: input length {length} shorter than kernel {k}")
    parents: list[Tensor] = [x, weight]
    if autocast_enabled():
        x = x if x.dtype == F16E else cast(x, F16E)
        weight = weight if weight.dtype == F16E else cast(weight, F16E)
        if bias is not None:
            bias = bias if bias.dtype == F16E else cast(bias, F16E)
        out_dtype = F16E
    else:
        out_dtype = F32
    parents = [x, weight] + ([bias] if bias is not None else [])

    windows = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)  # [N, C_in, L_out, K]
    with _quiet():
        out = np.einsum("nclk,ock->nol", windows, weight.data, optimize=True)
        if bias is not None:
            out = out + bias.data[None, :, None]
    l_out = length - k + 1

    def backward(g):
        with _quiet():
            if weight.requires_grad:
                gw = np.einsum("nclk,nol->ock", windows, g, optimize=True)
                weight.accumulate_grad(gw)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2)))
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                for kk in range(k):
                    gx[:, :, kk:kk + l_out] += np.einsum(
                        "nol,oc->ncl", g, weight.data[:, :, kk], optimize=True
                    )
                x.accumulate_grad(gx)

    return _make(out, out_dtype, tuple(parents), backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Fused last-axis layer norm.

    One graph node instead of an eight-op chain: the forward keeps only the
    per-row statistics for backward, so graph residency is the output plus
    two (…, 1) arrays. Statistics are computed in F32; under autocast the
    stored result drops to half, like softmax.
    """
    if weight.ndim != 1 or bias.ndim != 1 or x.shape[-1] != weight.shape[0] \
            or weight.shape != bias.shape:
        raise _shape_error("layer_norm", x, weight, bias)
    with _quiet():
        mu = x.data.mean(axis=-1, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = np.float32(1.0) / np.sqrt(var + np.float32(eps))
        out = centered * inv * weight.data + bias.data

    def backward(g):
        with _quiet():
            xhat = (x.data - mu) * inv
            if weight.requires_grad:
                weight.accumulate_grad(_unbroadcast(g * xhat, weight.shape))
            if bias.requires_grad:
                bias.accumulate_grad(_unbroadcast(g, bias.shape))
            if x.requires_grad:
                gx = g * weight.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                x.accumulate_grad(inv * (gx - m1 - xhat * m2))

    out_dtype = F16E if autocast_enabled() else F32
    return _make(out, out_dtype, (x, weight, bias), backward)


def batchnorm_1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over [N, C] or [N, C, L] inputs.

    Training mode normalizes with biased batch statistics and updates the running
    buffers in place (unbiased variance, torch convention); eval mode normalizes
    with the running buffers. Statistics stay in full precision under autocast.
    """
    if x.ndim == 2:
        axes: tuple[int, ...] = (0,)
        view = (1, -1)
    elif x.ndim == 3:
        axes = (0, 2)
        view = (1, -1, 1)
    else:
        raise ValueError(f"batchnorm_1d expects 2-d or 3-d input, got {x.shape}")
    gamma_v = reshape(gamma, view)
    beta_v = reshape(beta, view)
    if training:
        n = x.size // x.shape[1]
        if n <= 1:
            raise ValueError("batchnorm_1d needs more than one element per channel in training")
        mu = mean(x, axis=axes, keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=axes, keepdims=True)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.data.reshape(-1) * (n / (n - 1))
        inv = div(_wrap(1.0), sqrt(add(var, _wrap(eps))))
        return add(mul(mul(centered, inv), gamma_v), beta_v)
    scale = gamma.data.reshape(view) / np.sqrt(running_var.reshape(view) + eps)
    shift = beta.data.reshape(view) - running_mean.reshape(view) * scale
    return add(mul(x, _wrap(scale)), _wrap(shift))


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along `axis`, computed internally in float64.

    The float64 path makes the identities exact after the f32 cast: identical
    vectors give 1.0 and orthogonal vectors give 0.0.
    """
    if a.shape != b.shape:
        raise _shape_error("cosine_similarity", a, b)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    dot = (a64 * b64).sum(axis=axis)
    na = np.sqrt((a64 * a64).sum(axis=axis))
    nb = np.sqrt((b64 * b64).sum(axis=axis))
    denom = np.maximum(na * nb, eps)
    cos = dot / denom

    def backward(g):
        g64 = g.astype(np.float64)
        ge = np.expand_dims(g64, axis)
        cos_e = np.expand_dims(cos, axis)
        na_e = np.maximum(np.expand_dims(na, axis), eps)
        nb_e = np.maximum(np.expand_dims(nb, axis), eps)
        if a.requires_grad:
            ga = ge * (b64 / (na_e * nb_e) - cos_e * a64 / (na_e * na_e))
            a.accumulate_grad(ga.astype(np.float32))
        if b.requires_grad:
            gb = ge * (a64 / (na_e * nb_e) - cos_e * b64 / (nb_e * nb_e))
            b.accumulate_grad(gb.astype(np.float32))

    return _make(cos.astype(np.float32), F32, (a, b), backward)
