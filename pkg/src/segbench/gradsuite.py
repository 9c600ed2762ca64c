"""Finite-difference gradient suite over every primitive, layer and architecture.

Each case draws a random instance, reduces the output to a scalar with a
fixed random weighting, and compares tape gradients with central
differences. Inputs to kinked ops (relu, clamp, maxpool) are drawn away
from their kinks so that a step of ``h`` never crosses one; composed models
are redrawn until every relu input and maxpool decision clears
``KINK_MARGIN``.
"""
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    MLP,
    Conv2d,
    ConvTranspose2d,
    InitPolicy,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    PatchEmbed,
    PatchExpand,
    SSMBlock,
    StateSpaceScan,
    TransformerBlock,
    init_params,
)
from .models import ModelConfig, build_model
from .training import bce_loss

THRESHOLD = 1e-4
H = 1e-5
INSTANCES = 5
KINK_MARGIN = 1e-3
MAX_DRAWS = 200


@dataclass
class CaseResult:
    name: str
    errors: list
    threshold: float = THRESHOLD

    @property
    def worst(self):
        return max(self.errors)

    @property
    def passed(self):
        return all(e < self.threshold for e in self.errors)


def _t(a):
    return Tensor(a, requires_grad=True)


def _away(rng, shape, margin=0.05):
    """Normal draws with |x| >= margin."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _pointwise(op, low=None):
    def build(rng):
        x = _t(rng.uniform(low[0], low[1], size=(3, 4)) if low else _away(rng, (3, 4)))
        w = rng.normal(size=(3, 4))
        return lambda a: ad.tsum(ad.mul(op(a), Tensor(w))), [x]

    return build


def _binary(op):
    def build(rng):
        w = rng.normal(size=(2, 3))
        return lambda a, b: ad.tsum(ad.mul(op(a, b), Tensor(w))), [_t(rng.normal(size=(2, 3))), _t(rng.normal(size=(2, 3)))]

    return build


def _case_reduce(op):
    def build(rng):
        return lambda a: ad.mul(op(a), 1.7), [_t(rng.normal(size=(3, 5)))]

    return build


def _case_bias_add(rng):
    w = rng.normal(size=(2, 3, 4))
    return lambda x, b: ad.tsum(ad.mul(ad.bias_add(x, b), Tensor(w))), [_t(rng.normal(size=(2, 3, 4))), _t(rng.normal(size=4))]


def _case_reshape(rng):
    w = rng.normal(size=(6, 4))
    return lambda x: ad.tsum(ad.mul(ad.reshape(x, (6, 4)), Tensor(w))), [_t(rng.normal(size=(2, 3, 4)))]


def _case_permute(rng):
    w = rng.normal(size=(4, 2, 3))
    return lambda x: ad.tsum(ad.mul(ad.permute(x, (2, 0, 1)), Tensor(w))), [_t(rng.normal(size=(2, 3, 4)))]


def _case_concat(rng):
    w = rng.normal(size=(2, 5, 3))
    return (
        lambda a, b: ad.tsum(ad.mul(ad.concat([a, b], axis=1), Tensor(w))),
        [_t(rng.normal(size=(2, 2, 3))), _t(rng.normal(size=(2, 3, 3)))],
    )


def _case_matmul(rng):
    w = rng.normal(size=(2, 3, 5))
    return lambda a, b: ad.tsum(ad.mul(ad.matmul(a, b), Tensor(w))), [_t(rng.normal(size=(2, 3, 4))), _t(rng.normal(size=(2, 4, 5)))]


def _case_softmax(rng):
    w = rng.normal(size=(3, 5))
    return lambda a: ad.tsum(ad.mul(ad.softmax(a), Tensor(w))), [_t(rng.normal(size=(3, 5)))]


def _case_layernorm(rng):
    w = rng.normal(size=(2, 3, 6))
    return (
        lambda x, g, b: ad.tsum(ad.mul(ad.layernorm(x, g, b), Tensor(w))),
        [_t(rng.normal(size=(2, 3, 6))), _t(rng.normal(size=6)), _t(rng.normal(size=6))],
    )


def _case_conv(stride=1, pad=1, pad_mode="zeros"):
    def build(rng):
        x, k, b = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        ho = (6 + 2 * pad - 3) // stride + 1
        w = rng.normal(size=(2, 3, ho, ho))
        fn = lambda x, k, b: ad.tsum(ad.mul(ad.conv2d(x, k, b, stride, pad, pad_mode), Tensor(w)))  # noqa: E731
        return fn, [_t(x), _t(k), _t(b)]

    return build


def _case_conv_transpose(rng):
    w = rng.normal(size=(2, 3, 6, 6))
    return (
        lambda x, k, b: ad.tsum(ad.mul(ad.conv_transpose2d(x, k, b, 2), Tensor(w))),
        [_t(rng.normal(size=(2, 2, 3, 3))), _t(rng.normal(size=(2, 3, 2, 2))), _t(rng.normal(size=3))],
    )


def _case_maxpool(rng):
    # a shuffled grid keeps every window's entries at least 0.1 apart
    x = rng.permutation(np.arange(2 * 2 * 6 * 6) * 0.1).reshape(2, 2, 6, 6)
    w = rng.normal(size=(2, 2, 3, 3))
    return lambda a: ad.tsum(ad.mul(ad.maxpool2d(a), Tensor(w))), [_t(x)]


def _case_scan(reverse):
    def build(rng):
        x = rng.normal(size=(2, 5, 3))
        decay = rng.uniform(0.2, 0.9, size=(3, 2))
        w = rng.normal(size=(2, 5, 3))
        fn = lambda x, a, b, c: ad.tsum(ad.mul(ad.linear_scan(x, a, b, c, reverse), Tensor(w)))  # noqa: E731
        return fn, [_t(x), _t(decay), _t(rng.normal(size=(3, 2))), _t(rng.normal(size=(3, 2)))]

    return build


def _case_bce(rng):
    t = (rng.uniform(size=(2, 1, 4, 4)) < 0.3).astype(float)
    return lambda p: bce_loss(p, t), [_t(rng.uniform(0.05, 0.95, size=(2, 1, 4, 4)))]


def _module_case(make, x_shape, call=None):
    """Gradients w.r.t. every parameter of a freshly initialized module and its input."""

    def build(rng):
        module = init_params(make(), InitPolicy(int(rng.integers(2**31))))
        for p in module.parameters():
            # move off the zero/one initial values so biases and norms are exercised
            p.data += 0.1 * rng.normal(size=p.shape)
        x = _t(rng.normal(size=x_shape))
        out_probe = (call or (lambda m, x: m(x)))(module, x)
        w = Tensor(rng.normal(size=out_probe.shape))
        params = module.parameters()

        def fn(x, *_):
            return ad.tsum(ad.mul((call or (lambda m, x: m(x)))(module, x), w))

        return fn, [x] + params

    return build


def kink_margin(fn, inputs):
    """Distance of the forward pass at ``inputs`` from the nearest relu or maxpool kink."""
    for t in inputs:
        t.requires_grad = True
    with ad.Tape() as tape:
        fn(*inputs)
    margin = np.inf
    for node in tape.nodes:
        x = node.parents[0].data
        if node.op == "relu":
            margin = min(margin, np.abs(x).min())
        elif node.op == "maxpool2d":
            n, c, h, w = x.shape
            blocks = np.sort(x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4), axis=1)
            gap = blocks[:, 3] - blocks[:, 2]
            decided = blocks[:, 3] > 0
            if decided.any():
                margin = min(margin, gap[decided].min())
    return margin


def _arch_case(**kw):
    def draw(rng):
        cfg = ModelConfig(**kw)
        model = build_model(cfg, int(rng.integers(2**31)))
        for p in model.parameters():
            p.data += 0.05 * rng.normal(size=p.shape)
        x = _t(rng.normal(size=(2, 1, 8, 8)))
        w = Tensor(rng.normal(size=(2, 1, 8, 8)))
        return lambda x, *_: ad.tsum(ad.mul(model(x), w)), [x] + model.parameters()

    def build(rng):
        for _ in range(MAX_DRAWS):
            fn, inputs = draw(rng)
            if kink_margin(fn, inputs) >= KINK_MARGIN:
                return fn, inputs
        raise RuntimeError(f"no kink-free instance of {kw} in {MAX_DRAWS} draws")

    return build


CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "relu": _pointwise(ad.relu),
    "gelu": _pointwise(ad.gelu),
    "sigmoid": _pointwise(ad.sigmoid),
    "exp": _pointwise(ad.exp),
    "log": _pointwise(ad.log, (0.1, 3.0)),
    "clamp": _pointwise(ad.clamp, (0.01, 0.99)),
    "softplus": _pointwise(ad.softplus),
    "sum": _case_reduce(ad.tsum),
    "mean": _case_reduce(ad.mean),
    "bias_add": _case_bias_add,
    "reshape": _case_reshape,
    "permute": _case_permute,
    "concat": _case_concat,
    "matmul": _case_matmul,
    "softmax": _case_softmax,
    "layernorm": _case_layernorm,
    "conv2d": _case_conv(),
    "conv2d_stride2": _case_conv(stride=2),
    "conv2d_circular": _case_conv(pad_mode="circular"),
    "conv_transpose2d": _case_conv_transpose,
    "maxpool2d": _case_maxpool,
    "linear_scan": _case_scan(False),
    "linear_scan_reverse": _case_scan(True),
    "bce_loss": _case_bce,
    "layer.conv2d": _module_case(lambda: Conv2d(2, 3), (2, 2, 5, 5)),
    "layer.conv_transpose2d": _module_case(lambda: ConvTranspose2d(3, 2), (2, 3, 3, 3)),
    "layer.linear": _module_case(lambda: Linear(4, 3), (2, 5, 4)),
    "layer.layernorm": _module_case(lambda: LayerNorm(6), (2, 3, 6)),
    "layer.patch_embed": _module_case(lambda: PatchEmbed(1, 2, 4), (2, 1, 4, 4)),
    "layer.patch_expand": _module_case(lambda: PatchExpand(4, 2), (2, 4, 4), lambda m, x: m(x, 4, 4)),
    "layer.attention": _module_case(lambda: MultiHeadAttention(4, 2), (2, 3, 4)),
    "layer.ssm_scan": _module_case(lambda: StateSpaceScan(4, 3), (2, 5, 4)),
    "layer.mlp": _module_case(lambda: MLP(4, 2), (2, 3, 4)),
    "layer.transformer_block": _module_case(lambda: TransformerBlock(4, 2), (2, 3, 4)),
    "layer.ssm_block": _module_case(lambda: SSMBlock(4, 2), (2, 3, 4)),
    "arch.cnn": _arch_case(arch="cnn", features=3, depth=1),
    "arch.unet": _arch_case(arch="unet", features=2, depth=2),
    "arch.vit": _arch_case(arch="vit", features=4, depth=1, patch=4, heads=2),
    "arch.vssm": _arch_case(arch="vssm", features=4, depth=1, patch=4, state_dim=2),
}


def check_case(name, instances=INSTANCES, seed=0, max_coords=32, threshold=THRESHOLD):
    errors = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(name.encode())])
        fn, inputs = CASES[name](rng)
        errors.append(ad.grad_check(fn, inputs, h=H, max_coords=max_coords, seed=i))
    return CaseResult(name, errors, threshold)


def run_suite(instances=INSTANCES, seed=0, names=None, threshold=THRESHOLD, log=None):
    """Check every case; returns the list of CaseResult."""
    results = []
    for name in names or CASES:
        start = time.perf_counter()
        r = check_case(name, instances, seed, threshold=threshold)
        results.append(r)
        if log is not None:
            status = "ok" if r.passed else "FAIL"
            log(f"{status:4s} {name:24s} max rel err {r.worst:.2e}  ({time.perf_counter() - start:.1f}s)")
    return results
