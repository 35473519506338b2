"""Dense tensors with reverse-mode differentiation.

Every op that sees an input with ``requires_grad`` records a node holding its
parents and a closure mapping the output gradient to parent gradients. Node
ids grow with execution order, so replaying ids in descending order is a valid
reverse topological order for ``backward``.
"""
from contextlib import contextmanager
from dataclasses import dataclass, field
import itertools
import threading

import numpy as np
from scipy.special import erf

from . import _kernels
from . import dsp

_ids = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class BackwardError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id",
                 "_op", "_grad_dirty", "_consumed")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self._op = "leaf"
        self._grad_dirty = False
        self._consumed = False

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)
    dtype = property(lambda self: self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)
        self._grad_dirty = False

    # arithmetic sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, data, parents, backward):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op {op!r}")
    out = Tensor(data)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def square(x):
    x = as_tensor(x)
    return _record("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def abs_(x):
    x = as_tensor(x)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sin(x):
    x = as_tensor(x)
    return _record("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x):
    x = as_tensor(x)
    return _record("cos", np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def sigmoid(x):
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x):
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data ** 2) / np.sqrt(2.0 * np.pi)
    return _record("gelu", x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return _record("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def clamp_min(x, floor):
    """max(x, floor); gradient passes only where x exceeds the floor."""
    x = as_tensor(x)
    keep = x.data > floor
    return _record("clamp_min", np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def atan2(y, x):
    y, x = as_tensor(y), as_tensor(x)
    r2 = np.maximum(x.data ** 2 + y.data ** 2, 1e-30)
    return _record("atan2", np.arctan2(y.data, x.data), (y, x),
                   lambda g: (_unbroadcast(g * x.data / r2, y.shape),
                              _unbroadcast(-g * y.data / r2, x.shape)))


def wrap(x):
    """Wrap to (-pi, pi]; locally a shift by a multiple of 2*pi, so the gradient is 1."""
    x = as_tensor(x)
    return _record("wrap", dsp.wrap_phase(x.data), (x,), lambda g: (g,))


def periodic_residual(x, period=2.0 * np.pi):
    """x - period * round(x / period); the rounding is treated as constant."""
    x = as_tensor(x)
    return _record("periodic_residual", x.data - period * np.round(x.data / period), (x,),
                   lambda g: (g,))


def detach(x):
    return as_tensor(x).detach()


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _record("reduce_sum", out, (x,), back)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(out.size, 1) if axis is not None else x.size

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return _record("reduce_mean", out, (x,), back)


def reshape(x, shape):
    x = as_tensor(x)
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    return _record("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def slice_(x, idx):
    x = as_tensor(x)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g) if _fancy(idx) else out.__setitem__(idx, g)
        return (out,)
    return _record("slice", x.data[idx], (x,), back)


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _record("matmul", a.data @ b.data, (a, b), back)


def conv1d(x, w, bias=None, groups=1):
    """'Same'-padded 1-D cross-correlation.

    x: (B, C_in, T); w: (C_out, C_in // groups, K) with odd K; bias: (C_out,).
    """
    x, w = as_tensor(x), as_tensor(w)
    b_, c_in, length = x.shape
    c_out, c_per, k = w.shape
    if k % 2 == 0:
        raise ValueError("conv1d kernel length must be odd for same padding")
    if c_in % groups or c_out % groups or c_per != c_in // groups:
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}, groups {groups}")
    pad = k // 2
    depthwise = groups == c_in == c_out

    if depthwise:
        out = _kernels.depthwise_conv1d(x.data, w.data[:, 0, :], pad)

        def back(g):
            gx, gw = _kernels.depthwise_conv1d_grad(x.data, w.data[:, 0, :], g, pad)
            return gx, gw[:, None, :]
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
        c_og = c_out // groups
        # im2col: (B, T, groups, c_per * K), contiguous for BLAS
        cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
        cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(b_, length, groups, c_per * k)
        wg = w.data.reshape(groups, c_og, c_per * k)
        out = np.empty((b_, c_out, length), dtype=np.result_type(x.data, w.data))
        for gi in range(groups):
            out[:, gi * c_og:(gi + 1) * c_og] = np.swapaxes(cols[:, :, gi] @ wg[gi].T, 1, 2)

        def back(g):
            gw = np.empty_like(wg)
            gcols = np.empty_like(cols) if x.requires_grad else None
            for gi in range(groups):
                gg = np.swapaxes(g[:, gi * c_og:(gi + 1) * c_og], 1, 2).reshape(b_ * length, c_og)
                gw[gi] = gg.T @ cols[:, :, gi].reshape(b_ * length, -1)
                if gcols is not None:
                    gcols[:, :, gi] = (gg @ wg[gi]).reshape(b_, length, -1)
            if gcols is None:
                return None, gw.reshape(w.shape)
            gcols = gcols.reshape(b_, length, c_in, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + length] += np.swapaxes(gcols[..., j], 1, 2)
            return gxp[:, :, pad:pad + length], gw.reshape(w.shape)

    y = _record("conv1d", out, (x, w), back)
    if bias is not None:
        y = add(y, reshape(bias, (c_out, 1)))
    return y


def linear(x, w, bias=None):
    """Pointwise channel map: (C_out, C_in) @ (B, C_in, T) + bias."""
    y = matmul(w, x)
    if bias is not None:
        y = add(y, reshape(bias, (-1, 1)))
    return y


def layer_norm(x, weight=None, bias=None, axis=1, eps=1e-6):
    """Normalize over the channel axis, then apply the optional affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[axis]

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)
    y = _record("layer_norm", xhat, (x,), back)
    shape = [1] * x.ndim
    shape[axis] = n
    if weight is not None:
        y = mul(y, reshape(weight, shape))
    if bias is not None:
        y = add(y, reshape(bias, shape))
    return y


# ---------------------------------------------------------------------------
# spectral transforms
# ---------------------------------------------------------------------------

def stft(x, cfg):
    """Differentiable STFT: (..., L) -> stacked (..., 2, F, T) real/imag parts."""
    x = as_tensor(x)
    spec = dsp.stft_array(x.data, cfg)
    out = np.stack([spec.real, spec.imag], axis=-3)
    length = x.shape[-1]
    return _record("stft", out, (x,),
                   lambda g: (dsp.stft_adjoint(g[..., 0, :, :], g[..., 1, :, :], length, cfg),))


def istft(real, imag, cfg, length=None):
    """Differentiable inverse STFT from real/imag grids (..., F, T)."""
    real, imag = as_tensor(real), as_tensor(imag)
    t = real.shape[-1]
    y = dsp.istft_array(real.data + 1j * imag.data, cfg, length)
    return _record("istft", y, (real, imag), lambda g: dsp.istft_adjoint(g, t, cfg))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class Tape:
    """Ordered record of the ops reachable from a result, in execution order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        seen = {}
        stack = [out]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        return cls([seen[i] for i in sorted(seen)])

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [n._op for n in self.nodes]


def backward(loss, accumulate=False):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Raises ``BackwardError`` for a non-scalar loss, a graph that was already
    differentiated, or leaves holding gradients from an earlier backward
    that were never zeroed (unless ``accumulate`` is set).
    """
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor that requires grad")
    if loss._consumed and not accumulate:
        raise BackwardError("backward already ran on this graph")
    tape = Tape.from_output(loss)
    leaves = [n for n in tape.nodes if n._backward is None]
    if not accumulate:
        dirty = [n.name or n._op for n in leaves if n._grad_dirty]
        if dirty:
            raise BackwardError(f"gradients were not zeroed before backward: {dirty[:5]}")
    grads = {loss._id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
            node._grad_dirty = True
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        if not np.all(np.isfinite(leaf.grad)):
            raise FloatingPointError(f"non-finite gradient on {leaf.name or 'leaf'}")
    loss._consumed = True
    return tape


def grad_check(f, x, h=1e-5):
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be smooth around ``x``;
    kinks (abs at 0, clamps at their floor) make this check meaningless.
    The error per element is |a - n| / max(1, |a|, |n|).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, order="C")
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = xt.grad
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_params(loss_fn, params, h=1e-5, max_per_tensor=None, rng=None):
    """``grad_check`` over the entries of a ParameterSet for a closure ``loss_fn()``.

    With ``max_per_tensor`` only a random subset of each tensor's entries is
    perturbed.
    """
    params.zero_grad()
    backward(loss_fn())
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    with no_grad():
        for name, p in params.items():
            n = p.size
            idx = np.arange(n)
            if max_per_tensor is not None and n > max_per_tensor:
                idx = rng.choice(n, size=max_per_tensor, replace=False)
            flat = p.data.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                ana = p.grad.reshape(-1)[i]
                err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

BRANCHES = ("M", "P", "S")


class ParameterSet:
    """Named trainable tensors, each tagged magnitude (M), phase (P) or shared (S)."""

    def __init__(self):
        self._params = {}
        self._tags = {}

    def add(self, name, value, tag):
        if tag not in BRANCHES:
            raise ValueError(f"branch tag must be one of {BRANCHES}, got {tag!r}")
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        self._tags[name] = tag
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def tag(self, name):
        return self._tags[name]

    def partition(self, tag):
        return {n: p for n, p in self._params.items() if self._tags[n] == tag}

    def count(self, tag=None):
        return sum(p.size for n, p in self._params.items() if tag is None or self._tags[n] == tag)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def grads(self):
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for n, p in self._params.items()}

    def state_dict(self):
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state):
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)[:5]}")
        for n, p in self._params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {p.shape}")
            p.data = np.array(state[n], dtype=p.data.dtype)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, state, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay Adam update using the gradients held on ``params``."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data - lr * weight_decay * p.data - update
    return state
