"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Everything downstream (backbone, BEV encoder, losses) is built from the
operations in this module.  Conventions, stated once and enforced in tests:

* arrays are row-major with layout (H, W, C) for feature maps;
* every op records a backward rule onto the active computation tape
  (creation order); ``Tensor.backward`` replays the reachable records in
  reverse creation order and *accumulates* into ``.grad`` (never overwrites);
* default working precision is float32; gradient verification runs at
  float64 because central differences are unreliable at float32.

Gradient checking against central finite differences lives here too
(:func:`grad_check`) so the library carries its own independent oracle.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_recording = True

# Test hook: when True, relu's backward rule is deliberately corrupted so
# fault-injection tests can observe grad_check failing.
_inject_backward_fault = False


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracles)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def set_backward_fault(enabled: bool) -> None:
    """Test hook: corrupt relu's backward rule (fault-injection checks)."""
    global _inject_backward_fault
    _inject_backward_fault = enabled


class Tensor:
    """A dense n-dimensional array with an optional gradient slot.

    Tensors are immutable after construction except through recorded
    operations; leaf tensors created with ``requires_grad=True`` receive
    accumulated gradients from :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        Records are replayed in reverse creation order, which is a valid
        topological order because an op's inputs always exist before its
        output.  Running backward twice doubles leaf gradients by design.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed requires a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        nodes = []
        visited = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in visited:
                continue
            visited.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for t in sorted(nodes, key=lambda n: -n._seq):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)
                # only leaves retain gradients; transient buffers reset so a
                # second backward pass doubles (not triples) leaf grads
                t.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        parts = idx if isinstance(idx, tuple) else (idx,)
        for i in parts:
            if isinstance(i, (list, np.ndarray, Tensor)):
                raise TypeError("only basic (int/slice) indexing is differentiable")
        data = self.data[idx]
        def backward(g, x=self, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accumulate(full)
        return _node(data, (self,), backward)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), requires_grad=False,
                  dtype=like.data.dtype)


def _node(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result; record the backward rule if the tape is active."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    needs = _recording and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data + b.data
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _node(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data - b.data
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))
    return _node(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data * b.data
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _node(data, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    def backward(g):
        x._accumulate(g * data)
    return _node(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)
    def backward(g):
        x._accumulate(g / x.data)
    return _node(data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    def backward(g):
        gx = g * (x.data > 0)
        if _inject_backward_fault:
            gx = gx * 1.01
        x._accumulate(gx)
    return _node(data, (x,), backward)


# -- reductions ----------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.shape).copy())
    return _node(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ---------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    def backward(g):
        x._accumulate(g.reshape(x.shape))
    return _node(data, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    data = x.data.transpose(axes)
    def backward(g):
        x._accumulate(g.transpose(inv))
    return _node(data, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])
    return _node(data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)
    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))
    return _node(data, tuple(tensors), backward)


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors; dA = dC.B^T, dB = A^T.dC."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data
    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    return _node(data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: x[..., Din] -> x @ W[Din, Dout] + b."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input last dim {x.shape[-1]} != weight rows {weight.shape[0]}"
        )
    data = x.data @ weight.data
    if bias is not None:
        data = data + bias.data
    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            x2 = x.data.reshape(-1, weight.shape[0])
            weight._accumulate(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(data, parents, backward)


# -- normalizers ------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability.

    Backward rule: dx = s * (dy - <dy, s>) along the softmax axis.
    """
    if axis >= x.ndim or axis < -x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        x._accumulate(s * (g - inner))
    return _node(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if axis >= x.ndim or axis < -x.ndim:
        raise ShapeError(f"log_softmax: axis {axis} out of range for shape {x.shape}")
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)
    def backward(g):
        x._accumulate(g - sm * g.sum(axis=axis, keepdims=True))
    return _node(data, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data
    n = x.shape[-1]
    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) \
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv)
    return _node(data, (x, gain, bias), backward)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale the last axis to unit Euclidean norm; eps guards the zero vector."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    s = n + eps
    data = x.data / s
    def backward(g):
        dot = (x.data * g).sum(axis=-1, keepdims=True)
        n_safe = np.where(n > 0, n, 1.0)
        corr = np.where(n > 0, x.data * dot / (n_safe * s * s), 0.0)
        x._accumulate(g / s - corr)
    return _node(data, (x,), backward)


# -- spatial ops -------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1,
           padding_mode: str = "zero") -> Tensor:
    """2-D cross-correlation of an (H, W, Cin) map with a (k, k, Cin, Cout) kernel.

    ``padding_mode='circular_width'`` wraps columns (panoramas are angularly
    periodic) and zero-pads rows; ``'zero'`` zero-pads both.  Output spatial
    dims are ceil(in/stride).
    """
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d: kernel must be (k, k, Cin, Cout), got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding_mode not in ("zero", "circular_width"):
        raise ValueError(f"conv2d: unknown padding_mode {padding_mode!r}")
    H, W, cin = x.shape
    if kernel.shape[2] != cin:
        raise ShapeError(
            f"conv2d: kernel Cin {kernel.shape[2]} != input channels {cin}"
        )
    p = k // 2
    if k > H + 2 * p or k > W + 2 * p:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    if padding_mode == "circular_width":
        padded = np.pad(x.data, ((p, p), (0, 0), (0, 0)))
        padded = np.pad(padded, ((0, 0), (p, p), (0, 0)), mode="wrap")
    else:
        padded = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    windows = windows[::stride, ::stride]          # (oh, ow, cin, k, k)
    oh, ow = windows.shape[:2]
    cout = kernel.shape[3]
    patches = windows.transpose(0, 1, 3, 4, 2).reshape(oh * ow, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    data = (patches @ kmat).reshape(oh, ow, cout)

    def backward(g):
        g2 = g.reshape(oh * ow, cout)
        if kernel.requires_grad:
            kernel._accumulate((patches.T @ g2).reshape(kernel.shape))
        if x.requires_grad:
            dpad = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    # kernel.data[i, j]: (cin, cout); scatter onto strided slice
                    contrib = g @ kernel.data[i, j].T
                    dpad[i:i + stride * oh:stride, j:j + stride * ow:stride] += contrib
            dx = dpad[p:p + H, p:p + W].copy()
            if padding_mode == "circular_width" and p > 0:
                # wrapped pad columns fold back onto their source columns
                dx[:, W - p:W] += dpad[p:p + H, 0:p]
                dx[:, 0:p] += dpad[p:p + H, W + p:W + 2 * p]
            x._accumulate(dx)
    return _node(data, (x, kernel), backward)


def pool(x: Tensor, mode: str, axis: int | None = None,
         window: tuple[int, int] | None = None) -> Tensor:
    """Pooling in one of three modes.

    * ``max``: reduce one ``axis``; gradient routes to the argmax element,
      ties broken to the lowest flat index.
    * ``avg``: non-overlapping ``window=(ph, pw)`` average over the first two
      axes of an (H, W, C) map; gradient distributes uniformly.
    * ``global_avg``: arithmetic mean of every element (scalar output).
    """
    if mode == "max":
        if axis is None:
            raise ValueError("pool(max) requires an axis")
        if x.shape[axis] < 1:
            raise ShapeError("pool: empty pooling extent")
        data = x.data.max(axis=axis)
        arg = x.data.argmax(axis=axis)     # first occurrence = lowest index
        def backward(g):
            full = np.zeros_like(x.data)
            idx = list(np.indices(data.shape))
            idx.insert(axis if axis >= 0 else x.ndim + axis, arg)
            full[tuple(idx)] = g
            x._accumulate(full)
        return _node(data, (x,), backward)
    if mode == "avg":
        if window is None:
            raise ValueError("pool(avg) requires a window")
        ph, pw = window
        H, W = x.shape[0], x.shape[1]
        if ph < 1 or pw < 1:
            raise ShapeError("pool: empty pooling extent")
        if H % ph or W % pw:
            raise ShapeError(f"pool: window {window} does not tile input {x.shape}")
        oh, ow = H // ph, W // pw
        rest = x.shape[2:]
        data = x.data.reshape(oh, ph, ow, pw, *rest).mean(axis=(1, 3))
        def backward(g):
            gexp = g.reshape(oh, 1, ow, 1, *rest) / (ph * pw)
            x._accumulate(np.broadcast_to(
                gexp, (oh, ph, ow, pw, *rest)).reshape(x.shape).copy())
        return _node(data, (x,), backward)
    if mode == "global_avg":
        if x.size < 1:
            raise ShapeError("pool: empty pooling extent")
        return tmean(x)
    raise ValueError(f"pool: unknown mode {mode!r}")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of an (H, W, C) map."""
    data = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    H, W = x.shape[0], x.shape[1]
    rest = x.shape[2:]
    def backward(g):
        x._accumulate(g.reshape(H, 2, W, 2, *rest).sum(axis=(1, 3)))
    return _node(data, (x,), backward)


def _interp_weights(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bilinear interpolation matrix."""
    w = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        src = np.zeros(n_out) if n_in == 1 else np.full(n_out, (n_in - 1) / 2.0)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    w[np.arange(n_out), lo] += 1.0 - frac
    w[np.arange(n_out), hi] += frac
    return w


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of an (H, W, C) map; exact identity when sizes match."""
    H, W, _ = x.shape
    rw = _interp_weights(H, out_h, x.data.dtype)
    cw = _interp_weights(W, out_w, x.data.dtype)
    t = np.tensordot(rw, x.data, axes=(1, 0))          # (out_h, W, C)
    data = np.tensordot(cw, t, axes=(1, 1)).transpose(1, 0, 2)
    def backward(g):
        gt = np.tensordot(cw.T, g, axes=(1, 1)).transpose(1, 0, 2)  # (out_h, W, C)
        x._accumulate(np.tensordot(rw.T, gt, axes=(1, 0)))
    return _node(data, (x,), backward)


# -- gradient verification ---------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one reverse-mode vs central-difference comparison."""

    name: str
    per_input_err: list = field(default_factory=list)
    max_rel_err: float = float("inf")
    finite: bool = True
    h: float = 1e-4
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_err <= self.tol

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        note = "" if self.finite else " [non-finite values encountered]"
        return f"{self.name}: {status} max_rel_err={self.max_rel_err:.3e} h={self.h:g}{note}"


def grad_check(op_closure, inputs, h: float = 1e-4, tol: float = 1e-4,
               name: str = "op") -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``op_closure`` must be pure; it is called as ``op_closure(*inputs)`` and
    may return a tensor of any shape (reduced to a scalar through a fixed
    random projection).  Everything is evaluated at float64.  The report
    carries the max relative error per input; non-finite values anywhere
    fail the check.
    """
    report = GradCheckReport(name=name, h=h, tol=tol)
    inputs64 = [Tensor(np.asarray(t.data if isinstance(t, Tensor) else t,
                                  dtype=np.float64),
                       requires_grad=True, dtype=np.float64) for t in inputs]
    probe_rng = np.random.default_rng(0xC0FFEE)

    out = op_closure(*inputs64)
    probe = probe_rng.uniform(0.5, 1.5, size=out.shape)
    if not np.all(np.isfinite(out.data)):
        report.finite = False
        return report
    loss = tsum(mul(out, Tensor(probe, dtype=np.float64)))
    loss.backward()

    def scalar_eval():
        with no_grad():
            val = op_closure(*inputs64)
        if not np.all(np.isfinite(val.data)):
            return None
        return float((val.data * probe).sum())

    errs = []
    for t in inputs64:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            report.finite = False
            return report
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar_eval()
            flat[i] = orig - h
            fm = scalar_eval()
            flat[i] = orig
            if fp is None or fm is None:
                report.finite = False
                return report
            nflat[i] = (fp - fm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        errs.append(float(np.max(np.abs(analytic - numeric) / denom)))
    report.per_input_err = errs
    report.max_rel_err = max(errs) if errs else 0.0
    return report
