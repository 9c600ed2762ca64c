"""Parameterized building blocks shared by the four segmentation models."""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class InitPolicy:
    """Kaiming-uniform weights, zero biases, unit norm gains, all drawn from ``seed``."""

    seed: int = 0


class Module:
    kind = "module"

    def __init__(self):
        self._params = {}
        self._children = {}
        self._init = {}
        self.hyper = {}

    def param(self, name, shape, init):
        t = Tensor(np.zeros(shape), requires_grad=True)
        self._params[name] = t
        self._init[name] = init
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {}
        for name, t in self._params.items():
            out[prefix + name] = t
        for cname, mod in self._children.items():
            out.update(mod.named_parameters(prefix + cname + "."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def named_inits(self, prefix=""):
        out = {}
        for name in self._params:
            out[prefix + name] = (self._params[name], self._init[name])
        for cname, mod in self._children.items():
            out.update(mod.named_inits(prefix + cname + "."))
        return out

    def count_params(self):
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _inverse_softplus(y):
    return np.log(np.expm1(y))


def init_params(model, policy=InitPolicy()):
    """Fill every parameter of ``model`` in registration order from ``policy.seed``."""
    rng = np.random.default_rng(policy.seed)
    for _, (t, init) in model.named_inits().items():
        scheme = init[0]
        if scheme == "kaiming":
            bound = np.sqrt(6.0 / init[1])
            t.data[...] = rng.uniform(-bound, bound, size=t.shape)
        elif scheme == "zeros":
            t.data[...] = 0.0
        elif scheme == "ones":
            t.data[...] = 1.0
        elif scheme == "ssm_log_rate":
            # continuous-time rates 1..S per channel
            t.data[...] = np.log(np.arange(1, t.shape[1] + 1, dtype=np.float64))[None, :]
        elif scheme == "ssm_step":
            step = np.exp(rng.uniform(np.log(0.05), np.log(0.5), size=t.shape))
            t.data[...] = _inverse_softplus(step)
        elif scheme == "uniform":
            t.data[...] = rng.uniform(init[1], init[2], size=t.shape)
        else:
            raise ConfigError(f"unknown init scheme {scheme!r}")
    return model


class Conv2d(Module):
    kind = "conv2d"

    def __init__(self, cin, cout, kernel=3, pad=1, stride=1, pad_mode="zeros"):
        super().__init__()
        self.hyper = dict(cin=cin, cout=cout, kernel=kernel, pad=pad, stride=stride, pad_mode=pad_mode)
        self.weight = self.param("weight", (cout, cin, kernel, kernel), ("kaiming", cin * kernel * kernel))
        self.bias = self.param("bias", (cout,), ("zeros",))

    def forward(self, x):
        h = self.hyper
        return ad.conv2d(x, self.weight, self.bias, h["stride"], h["pad"], h["pad_mode"])


class ConvTranspose2d(Module):
    kind = "conv_transpose2d"

    def __init__(self, cin, cout, stride=2):
        super().__init__()
        self.hyper = dict(cin=cin, cout=cout, stride=stride)
        self.weight = self.param("weight", (cin, cout, stride, stride), ("kaiming", cin))
        self.bias = self.param("bias", (cout,), ("zeros",))

    def forward(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, self.hyper["stride"])


class Linear(Module):
    kind = "linear"

    def __init__(self, fan_in, fan_out, bias=True):
        super().__init__()
        self.hyper = dict(fan_in=fan_in, fan_out=fan_out, bias=bias)
        self.weight = self.param("weight", (fan_in, fan_out), ("kaiming", fan_in))
        self.bias = self.param("bias", (fan_out,), ("zeros",)) if bias else None

    def forward(self, x):
        return linear(x, self)


def linear(x, layer):
    """``x @ W + b`` over the last axis of x, any leading shape."""
    fan_in, fan_out = layer.weight.shape
    if x.shape[-1] != fan_in:
        raise ShapeError(f"linear layer expects last extent {fan_in}, got {x.shape}")
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else ad.reshape(x, (int(np.prod(lead)), fan_in))
    y = ad.matmul(flat, layer.weight)
    if layer.bias is not None:
        y = ad.bias_add(y, layer.bias)
    if x.ndim != 2:
        y = ad.reshape(y, lead + (fan_out,))
    return y


class LayerNorm(Module):
    kind = "layernorm"

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.hyper = dict(dim=dim, eps=eps)
        self.gamma = self.param("gamma", (dim,), ("ones",))
        self.beta = self.param("beta", (dim,), ("zeros",))

    def forward(self, x):
        return ad.layernorm(x, self.gamma, self.beta, self.hyper["eps"])


def patchify(x, patch):
    """[N,C,H,W] -> [N, (H/P)*(W/P), C*P*P], tokens in row-major patch-grid order."""
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    t = ad.reshape(x, (n, c, gh, patch, gw, patch))
    t = ad.permute(t, (0, 2, 4, 1, 3, 5))
    return ad.reshape(t, (n, gh * gw, c * patch * patch))


def unpatchify(tokens, patch, height, width, channels):
    """Inverse of :func:`patchify`."""
    n = tokens.shape[0]
    gh, gw = height // patch, width // patch
    if tokens.shape[1] != gh * gw or tokens.shape[2] != channels * patch * patch:
        raise ShapeError(f"tokens {tokens.shape} do not tile a {channels}x{height}x{width} image with patch {patch}")
    t = ad.reshape(tokens, (n, gh, gw, channels, patch, patch))
    t = ad.permute(t, (0, 3, 1, 4, 2, 5))
    return ad.reshape(t, (n, channels, height, width))


class PatchEmbed(Module):
    kind = "patch_embed"

    def __init__(self, channels, patch, dim):
        super().__init__()
        self.hyper = dict(channels=channels, patch=patch, dim=dim)
        self.proj = self.child("proj", Linear(channels * patch * patch, dim))

    def forward(self, image):
        return patch_embed(image, self)


def patch_embed(image, layer):
    return layer.proj(patchify(image, layer.hyper["patch"]))


class PatchExpand(Module):
    kind = "patch_expand"

    def __init__(self, dim, patch, channels=1):
        super().__init__()
        self.hyper = dict(dim=dim, patch=patch, channels=channels)
        self.proj = self.child("proj", Linear(dim, channels * patch * patch))

    def forward(self, tokens, height, width):
        h = self.hyper
        return unpatchify(self.proj(tokens), h["patch"], height, width, h["channels"])


def positional_encoding(tokens, dim):
    """Fixed sinusoidal table [tokens, dim]."""
    if dim % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {dim}")
    pos = np.arange(tokens, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((tokens, dim))
    table[:, 0::2] = np.sin(pos / freq)
    table[:, 1::2] = np.cos(pos / freq)
    return table


class MultiHeadAttention(Module):
    kind = "attention"

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dimension {dim} is not divisible by {heads} heads")
        self.hyper = dict(dim=dim, heads=heads)
        self.q = self.child("q", Linear(dim, dim))
        # a key bias only shifts every score in a softmax row equally
        self.k = self.child("k", Linear(dim, dim, bias=False))
        self.v = self.child("v", Linear(dim, dim))
        self.out = self.child("out", Linear(dim, dim))

    def forward(self, x):
        return multi_head_attention(x, self)

    def attention_weights(self, x):
        n, t, d = x.shape
        heads = self.hyper["heads"]
        q = _split_heads(self.q(x), heads)
        k = _split_heads(self.k(x), heads)
        scores = ad.mul(ad.matmul(q, ad.permute(k, (0, 2, 1))), 1.0 / np.sqrt(d // heads))
        return ad.softmax(scores)


def _split_heads(x, heads):
    n, t, d = x.shape
    x = ad.permute(ad.reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))
    return ad.reshape(x, (n * heads, t, d // heads))


def _merge_heads(x, n, heads):
    _, t, dk = x.shape
    x = ad.permute(ad.reshape(x, (n, heads, t, dk)), (0, 2, 1, 3))
    return ad.reshape(x, (n, t, heads * dk))


def multi_head_attention(x, layer):
    n, t, d = x.shape
    if d != layer.hyper["dim"]:
        raise ShapeError(f"attention expects feature extent {layer.hyper['dim']}, got {d}")
    heads = layer.hyper["heads"]
    weights = layer.attention_weights(x)
    v = _split_heads(layer.v(x), heads)
    return layer.out(_merge_heads(ad.matmul(weights, v), n, heads))


class StateSpaceScan(Module):
    """Bidirectional diagonal state-space mixer over a token sequence.

    With step size ``dt = softplus(step)`` the per-channel decay is
    ``exp(-dt * exp(log_rate))``, always inside (0, 1), and the input gain is
    ``dt * b``. Forward and reverse scans share parameters and
    their outputs are averaged. With ``raw=True`` the decay is a free
    parameter and ``bidirectional`` may be turned off; that mode exists for
    testing the recurrence by hand.
    """

    kind = "ssm_scan"

    def __init__(self, dim, state_dim, raw=False, bidirectional=True):
        super().__init__()
        self.hyper = dict(dim=dim, state_dim=state_dim, raw=raw, bidirectional=bidirectional)
        if raw:
            self.decay = self.param("decay", (dim, state_dim), ("uniform", 0.0, 1.0))
        else:
            self.log_rate = self.param("log_rate", (dim, state_dim), ("ssm_log_rate",))
            self.step = self.param("step", (dim,), ("ssm_step",))
        self.b = self.param("b", (dim, state_dim), ("kaiming", state_dim))
        self.c = self.param("c", (dim, state_dim), ("kaiming", state_dim))

    def discretize(self):
        """(decay, input gain), each [D, S]."""
        if self.hyper["raw"]:
            return self.decay, self.b
        d, s = self.log_rate.shape
        step = ad.reshape(ad.softplus(self.step), (d, 1))
        step = ad.matmul(step, Tensor(np.ones((1, s))))
        decay = ad.exp(ad.mul(ad.mul(step, ad.exp(self.log_rate)), -1.0))
        return decay, ad.mul(step, self.b)

    def forward(self, x):
        return ssm_scan(x, self)


def ssm_scan(x, layer):
    if x.shape[-1] != layer.hyper["dim"]:
        raise ShapeError(f"scan expects feature extent {layer.hyper['dim']}, got {x.shape}")
    decay, gain = layer.discretize()
    y = ad.linear_scan(x, decay, gain, layer.c)
    if layer.hyper["bidirectional"]:
        back = ad.linear_scan(x, decay, gain, layer.c, reverse=True)
        y = ad.mul(ad.add(y, back), 0.5)
    return y


class MLP(Module):
    kind = "mlp"

    def __init__(self, dim, expansion=4):
        super().__init__()
        self.hyper = dict(dim=dim, hidden=expansion * dim)
        self.fc1 = self.child("fc1", Linear(dim, expansion * dim))
        self.fc2 = self.child("fc2", Linear(expansion * dim, dim))

    def forward(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm residual block: attention mixer, then MLP."""

    kind = "transformer_block"

    def __init__(self, dim, heads):
        super().__init__()
        self.hyper = dict(dim=dim, heads=heads)
        self.norm1 = self.child("norm1", LayerNorm(dim))
        self.attn = self.child("attn", MultiHeadAttention(dim, heads))
        self.norm2 = self.child("norm2", LayerNorm(dim))
        self.mlp = self.child("mlp", MLP(dim))

    def output_projections(self):
        return [self.attn.out, self.mlp.fc2]

    def forward(self, x):
        x = ad.add(x, self.attn(self.norm1(x)))
        return ad.add(x, self.mlp(self.norm2(x)))


class SSMBlock(Module):
    """Pre-norm residual block with a state-space scan as the token mixer."""

    kind = "ssm_block"

    def __init__(self, dim, state_dim):
        super().__init__()
        self.hyper = dict(dim=dim, state_dim=state_dim)
        self.norm1 = self.child("norm1", LayerNorm(dim))
        self.inp = self.child("inp", Linear(dim, dim))
        self.scan = self.child("scan", StateSpaceScan(dim, state_dim))
        self.out = self.child("out", Linear(dim, dim))
        self.norm2 = self.child("norm2", LayerNorm(dim))
        self.mlp = self.child("mlp", MLP(dim))

    def output_projections(self):
        return [self.out, self.mlp.fc2]

    def forward(self, x):
        x = ad.add(x, self.out(self.scan(self.inp(self.norm1(x)))))
        return ad.add(x, self.mlp(self.norm2(x)))


def zero_output_projections(block):
    for lin in block.output_projections():
        lin.weight.data[...] = 0.0
        if lin.bias is not None:
            lin.bias.data[...] = 0.0
