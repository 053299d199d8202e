"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Every op whose inputs require gradients is appended to the active
:class:`Tape`. Recording order is a valid topological order, so backward is
a single reverse sweep over the tape. Only leaf tensors (those not produced
by a recorded op) receive ``.grad`` buffers.
"""
import contextlib
import contextvars

import numpy as np
from scipy.special import expit

_active_tape = contextvars.ContextVar("csskit_tape", default=None)


class Tape:
    """Ordered record of primitive ops for one forward/backward pass."""

    def __init__(self):
        self.nodes = []
        self.done = False
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def record(self, out, parents, vjp):
        if self.done:
            raise RuntimeError("tape already consumed by backward(); use a new Tape")
        out._tape = self
        self.nodes.append((out, parents, vjp))

    def backward(self, loss):
        backward(loss)

    def reset(self):
        self.nodes = []
        self.done = False


@contextlib.contextmanager
def no_grad():
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.asarray(data, dtype=dtype)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    size = property(lambda self: self.data.size)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __getitem__(self, idx): return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjp):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        tape = _active_tape.get()
        out.requires_grad = True
        if tape is not None:
            tape.record(out, parents, vjp)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


_sigmoid = expit


def swish(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1 - s)),))


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _make(x.data * pos, (x,), lambda g: (g * pos,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2 * out),))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# -- linear algebra / reductions ----------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(a.data @ b.data, (a, b), vjp)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def vjp(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    """Mean over ``axis`` (int, tuple or None for all)."""
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(out.size, 1)

    def vjp(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return _make(out, (x,), vjp)


def l2_norm(x):
    """Root-sum-square of all entries. Gradient at the origin is taken as 0."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data))

    def vjp(g):
        if n == 0:
            return (np.zeros_like(x.data),)
        return (g * x.data / n,)
    return _make(n, (x,), vjp)


def softmax(x, axis=-1):
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), vjp)


def conv1d_depthwise(x, w, bias=None):
    """Depthwise 'same' convolution along axis -2.

    x: (..., N, D), w: (K, D) with odd K, bias: (D,). Zero padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    K, D = w.shape
    if K % 2 == 0 or x.shape[-1] != D:
        raise ValueError(f"conv1d_depthwise: input {x.shape} vs kernel {w.shape} (K must be odd)")
    N = x.shape[-2]
    half = K // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=-2)  # (..., N, D, K)
    out = np.einsum("...ndk,kd->...nd", win, w.data)
    parents = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, w, bias)

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for k in range(K):
                gp[..., k:k + N, :] += g * w.data[k]
            gx = gp[..., half:half + N, :]
        if w.requires_grad:
            gw = np.einsum("bndk,bnd->kd", win.reshape(-1, N, D, K), g.reshape(-1, N, D))
        grads = (gx, gw)
        if bias is not None:
            grads += (_unbroadcast(g, bias.shape) if bias.requires_grad else None,)
        return grads
    return _make(out, parents, vjp)


# -- shape ops -----------------------------------------------------------------

def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=ax)))


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis
               for p in parts)


def slice_(x, idx):
    x = as_tensor(x)
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)
    return _make(x.data[idx], (x,), vjp)


def transpose(x, axes=None):
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# -- backward ------------------------------------------------------------------

def backward(loss):
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss is not recorded on an active Tape (detached graph)")
    if tape.done:
        raise RuntimeError("backward() already called on this tape; reset it first")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, parents, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p._tape is None:
                leaves[key] = p
    for key, p in leaves.items():
        g = grads[key].astype(p.dtype, copy=False)
        p.grad = g if p.grad is None else p.grad + g
    tape.done = True
    tape.nodes = []


# -- optimisation ----------------------------------------------------------------

def lr_schedule(step, base_lr=1e-4, decay=0.99998):
    """Exponentially decayed learning rate, applied per optimiser step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return base_lr * decay ** step


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise RuntimeError(f"missing gradients for {missing[:5]}{'...' if len(missing) > 5 else ''}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)

    def state_dict(self):
        state = {"t": self.t}
        state.update({f"m.{k}": v for k, v in self.m.items()})
        state.update({f"v.{k}": v for k, v in self.v.items()})
        return state

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.asarray(state[f"m.{k}"]).copy()
            self.v[k] = np.asarray(state[f"v.{k}"]).copy()
