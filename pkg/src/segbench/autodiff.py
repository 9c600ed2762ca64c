"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape`; with no tape active
they run as plain numpy and nothing is recorded.

    with Tape() as tape:
        loss = mean(mul(w, x))
    backward(loss, tape)
    w.grad
"""
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DomainError, ShapeError

CLAMP_LO = 1e-7
CLAMP_HI = 1.0 - 1e-7
# sigmoid(+-36) is still representable strictly inside (0, 1) in float64
SIGMOID_SATURATION = 36.0

_local = threading.local()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of the forward pass. One tape per thread of work."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()

    def record(self, op, out, parents, backward):
        out.node = len(self.nodes)
        out.tape = self
        self.nodes.append(Node(op, out, parents, backward))

    def backward(self, loss):
        backward(loss, self)


class no_grad:
    """Suspend recording inside an enclosing tape."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.tape = None

    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return permute(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(op, data, parents, backward_fn):
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(op, out, parents, backward_fn)
    return out


def _is_scalar(t):
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_operands(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape == b.shape:
        return a, b, False
    if _is_scalar(b):
        return a, b, True
    raise ShapeError(f"shapes {a.shape} and {b.shape} are not equal and the second operand is not a scalar")


def _reduce_to(g, t, scalar):
    if scalar:
        return np.full(t.shape, g.sum())
    return g


# --- elementwise -----------------------------------------------------------


def add(a, b):
    a, b, scalar = _binary_operands(a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b, scalar)))


def sub(a, b):
    a, b, scalar = _binary_operands(a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, _reduce_to(-g, b, scalar)))


def mul(a, b):
    a, b, scalar = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, _reduce_to(g * ad, b, scalar)

    return _result("mul", ad * bd, (a, b), backward)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    # NaN passes through so divergence stays visible
    return _result("relu", np.where(a.data <= 0, 0.0, a.data), (a,), lambda g: (g * mask,))


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh approximation of GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_K * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def backward(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result("gelu", 0.5 * x * (1.0 + t), (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    x = np.clip(a.data, -SIGMOID_SATURATION, SIGMOID_SATURATION)
    s = 1.0 / (1.0 + np.exp(-x))
    return _result("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a):
    a = _as_tensor(a)
    e = np.exp(a.data)
    return _result("exp", e, (a,), lambda g: (g * e,))


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value; clamp the input first")
    x = a.data
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def clamp(a, lo=CLAMP_LO, hi=CLAMP_HI):
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "clamp": clamp,
}


def elementwise(op_kind, a, b=None, **kwargs):
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul"):
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(a, **kwargs)


def softplus(a):
    """log(1 + exp(a)), composed from recorded primitives."""
    return log(add(exp(a), 1.0))


# --- reductions and layout ------------------------------------------------


def tsum(a):
    a = _as_tensor(a)
    shape = a.shape
    return _result("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a):
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    return _result("mean", np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def bias_add(x, b):
    """Add a vector along the last axis of ``x``."""
    if b.shape != x.shape[-1:]:
        raise ShapeError(f"bias shape {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result("bias_add", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes):
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"{axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _result("permute", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(parts, axis):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of no tensors")
    ref = parts[0].shape
    axis = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != axis
        ):
            raise ShapeError(f"cannot concat {p.shape} with {ref} along axis {axis}")
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    data = np.concatenate([p.data for p in parts], axis=axis)
    return _result("concat", data, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


# --- linear algebra ---------------------------------------------------------


def matmul(a, b):
    """Matrix product of [..., m, k] and [..., k, n] with identical leading extents."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul needs equal-rank operands with matching batch extents, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result("matmul", ad @ bd, (a, b), backward)


def softmax(a):
    """Softmax along the last axis."""
    a = _as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result("softmax", s, (a,), backward)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layernorm", xhat * gamma.data + beta.data, (x, gamma, beta), backward)


# --- image ops --------------------------------------------------------------


def _pad_nchw(x, pad, mode):
    if pad == 0:
        return x
    np_mode = {"zeros": "constant", "circular": "wrap"}[mode]
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=np_mode)


def _unpad_nchw(gp, pad, mode, h, w):
    if pad == 0:
        return gp
    if mode == "zeros":
        return gp[:, :, pad : pad + h, pad : pad + w]
    rows = (np.arange(h + 2 * pad) - pad) % h
    cols = (np.arange(w + 2 * pad) - pad) % w
    g1 = np.zeros(gp.shape[:2] + (h, w + 2 * pad))
    np.add.at(g1, (slice(None), slice(None), rows), gp)
    g2 = np.zeros(gp.shape[:2] + (h, w))
    np.add.at(g2, (slice(None), slice(None), slice(None), cols), g1)
    return g2


def conv2d(x, kernel, bias=None, stride=1, pad=0, pad_mode="zeros"):
    """2-D cross-correlation of [N,C,H,W] with [F,C,kh,kw], NCHW layout."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if stride < 1 or pad < 0:
        raise ConfigError("stride must be positive and pad non-negative")
    if pad_mode not in ("zeros", "circular"):
        raise ConfigError(f"unknown pad mode {pad_mode!r}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias must have shape ({f},)")

    xp = _pad_nchw(x.data, pad, pad_mode)
    hp, wp = xp.shape[2:]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(f, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dk = (g2.T @ cols).reshape(kernel.shape)
        dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = _unpad_nchw(dxp, pad, pad_mode, h, w)
        if bias is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 2, 3))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result("conv2d", np.ascontiguousarray(out), parents, backward)


def conv_transpose2d(x, kernel, bias=None, stride=2):
    """Transposed convolution restricted to kernel == stride (exact upsampling).

    ``kernel`` has shape [C_in, C_out, k, k]; every input pixel scatters one
    k x k patch, so the output is [N, C_out, H*k, W*k].
    """
    n, c, h, w = x.shape
    kc, f, kh, kw = kernel.shape
    if not (kh == kw == stride):
        raise ConfigError(f"conv_transpose2d supports kernel == stride only, got kernel {kh}x{kw}, stride {stride}")
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    k = stride
    x2 = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    kmat = kernel.data.reshape(c, f * k * k)
    patches = (x2 @ kmat).reshape(n, h, w, f, k, k)
    out = patches.transpose(0, 3, 1, 4, 2, 5).reshape(n, f, h * k, w * k)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, f, h, k, w, k).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, f * k * k)
        dx = (g2 @ kmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dk = (x2.T @ g2).reshape(kernel.shape)
        if bias is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 2, 3))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result("conv_transpose2d", np.ascontiguousarray(out), parents, backward)


def maxpool2d(x, window=2):
    if window != 2:
        raise ConfigError("only 2x2 max pooling is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum in row-major window order
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        db = np.zeros_like(blocks)
        np.put_along_axis(db, idx, g[..., None], axis=-1)
        dx = db.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return _result("maxpool2d", out, (x,), backward)


def linear_scan(x, decay, b, c, reverse=False):
    """Diagonal linear recurrence over the token axis of [N, T, D].

    Each channel d carries an S-dimensional state:
    ``h_t = decay[d] * h_{t-1} + b[d] * x_t[d]`` and ``y_t[d] = <c[d], h_t>``.
    ``decay``, ``b`` and ``c`` are [D, S]. With ``reverse`` the sequence is
    consumed from the last token to the first.
    """
    n, t_len, d = x.shape
    for name, p in (("decay", decay), ("b", b), ("c", c)):
        if p.ndim != 2 or p.shape[0] != d:
            raise ShapeError(f"{name} must be [D={d}, S], got {p.shape}")
    s = decay.shape[1]
    order = list(range(t_len))
    if reverse:
        order.reverse()
    xd, ad, bd, cd = x.data, decay.data, b.data, c.data
    states = np.empty((n, t_len, d, s))
    y = np.empty((n, t_len, d))
    h = np.zeros((n, d, s))
    for t in order:
        h = ad * h + bd * xd[:, t, :, None]
        states[:, t] = h
        y[:, t] = (h * cd).sum(axis=-1)

    def backward(g):
        dx = np.empty_like(xd)
        da = np.zeros_like(ad)
        db = np.zeros_like(bd)
        dc = np.zeros_like(cd)
        carry = np.zeros((n, d, s))
        for pos in range(t_len - 1, -1, -1):
            t = order[pos]
            gt = g[:, t, :, None]
            gh = carry + gt * cd
            dc += (gt * states[:, t]).sum(axis=0)
            db += (gh * xd[:, t, :, None]).sum(axis=0)
            dx[:, t] = (gh * bd).sum(axis=-1)
            if pos > 0:
                da += (gh * states[:, order[pos - 1]]).sum(axis=0)
            carry = gh * ad
        return dx, da, db, dc

    return _result("linear_scan", y, (x, decay, b, c), backward)


# --- differentiation --------------------------------------------------------


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor on the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss.tape
    if loss.node is None or tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")

    pending = {loss.node: np.ones_like(loss.data)}
    for idx in range(loss.node, -1, -1):
        node = tape.nodes[idx]
        g = pending.pop(idx, None)
        if g is None:
            continue
        node.out.grad = g
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is not None and parent.tape is tape:
                prev = pending.get(parent.node)
                pending[parent.node] = pg if prev is None else prev + pg
            else:
                parent.grad = np.array(pg, dtype=np.float64) if parent.grad is None else parent.grad + pg

    for node in tape.nodes:
        if node.out.grad is None:
            node.out.grad = np.zeros_like(node.out.data)
        for parent in node.parents:
            if parent.requires_grad and parent.grad is None:
                parent.grad = np.zeros_like(parent.data)


def grad_check(fn, inputs, h=1e-5, max_coords=None, seed=0):
    """Largest relative error between tape gradients and central differences.

    ``fn(*inputs)`` must return a scalar tensor. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. ``max_coords`` caps the
    number of coordinates probed per input (sampled with ``seed``).
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    backward(out, tape)
    analytic = [t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs).item()
            flat[i] = orig - h
            fm = fn(*inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
