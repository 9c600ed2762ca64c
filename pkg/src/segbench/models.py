"""The four segmentation architectures and their checkpoint format.

Every model maps an [N, C, H, W] batch to [N, 1, H, W] foreground
probabilities.
"""
import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError, ShapeError
from .layers import (
    Conv2d,
    ConvTranspose2d,
    InitPolicy,
    Module,
    PatchEmbed,
    PatchExpand,
    SSMBlock,
    TransformerBlock,
    init_params,
    positional_encoding,
)

ARCHS = ("cnn", "unet", "vit", "vssm")


@dataclass
class ModelConfig:
    arch: str = "cnn"
    in_channels: int = 1
    features: int = 8
    depth: int = 3
    patch: int = 8
    heads: int = 2
    state_dim: int = 4
    pad_mode: str = "zeros"

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.in_channels < 1 or self.features < 1:
            raise ConfigError("in_channels and features must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")
        if self.pad_mode not in ("zeros", "circular"):
            raise ConfigError(f"unknown pad_mode {self.pad_mode!r}")
        if self.arch in ("vit", "vssm"):
            if self.patch < 1:
                raise ConfigError("patch must be positive")
            if self.features % 2:
                raise ConfigError("vit/vssm need an even embedding width (features)")
            if self.arch == "vit" and (self.heads < 1 or self.features % self.heads):
                raise ConfigError(f"features {self.features} not divisible by heads {self.heads}")
            if self.arch == "vssm" and self.state_dim < 1:
                raise ConfigError("state_dim must be positive")
        return self

    def check_crop(self, height, width=None):
        width = height if width is None else width
        if self.arch == "unet":
            m = 2**self.depth
            if height % m or width % m:
                raise ConfigError(f"unet depth {self.depth} needs crops divisible by {m}, got {height}x{width}")
        elif self.arch in ("vit", "vssm"):
            if height % self.patch or width % self.patch:
                raise ConfigError(f"{self.arch} needs crops divisible by patch {self.patch}, got {height}x{width}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


class Model(Module):
    kind = "model"

    def __init__(self, config):
        super().__init__()
        self.config = config

    def forward(self, batch):
        if batch.ndim != 4 or batch.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [N,{self.config.in_channels},H,W], got {batch.shape}")
        try:
            self.config.check_crop(batch.shape[2], batch.shape[3])
        except ConfigError as e:
            raise ShapeError(str(e)) from None
        return self._forward(batch)

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        if set(state) != set(params):
            raise ConfigError("state dict names do not match the model")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ShapeError(f"{name}: expected {t.shape}, got {state[name].shape}")
            t.data[...] = state[name]

    def predict(self, images):
        """Probabilities for a numpy batch without recording a tape."""
        with ad.no_grad():
            return self(Tensor(images)).data


class CNN(Model):
    kind = "cnn"

    def __init__(self, config):
        super().__init__(config)
        c, f, pm = config.in_channels, config.features, config.pad_mode
        self.inp = self.child("inp", Conv2d(c, f, pad_mode=pm))
        self.blocks = [self.child(f"block{i}", Conv2d(f, f, pad_mode=pm)) for i in range(config.depth)]
        self.out = self.child("out", Conv2d(f, 1, pad_mode=pm))

    def _forward(self, x):
        h = ad.relu(self.inp(x))
        for conv in self.blocks:
            h = ad.relu(conv(h))
        return ad.sigmoid(self.out(h))


class DoubleConv(Module):
    kind = "double_conv"

    def __init__(self, cin, cout, pad_mode="zeros"):
        super().__init__()
        self.conv1 = self.child("conv1", Conv2d(cin, cout, pad_mode=pad_mode))
        self.conv2 = self.child("conv2", Conv2d(cout, cout, pad_mode=pad_mode))

    def forward(self, x):
        return ad.relu(self.conv2(ad.relu(self.conv1(x))))


class UNet(Model):
    kind = "unet"

    def __init__(self, config):
        super().__init__(config)
        c, f, depth, pm = config.in_channels, config.features, config.depth, config.pad_mode
        self.encoders = []
        cin = c
        for i in range(1, depth + 1):
            width = f * 2 ** (i - 1)
            self.encoders.append(self.child(f"enc{i}", DoubleConv(cin, width, pm)))
            cin = width
        self.bottleneck = self.child("bottleneck", DoubleConv(cin, f * 2**depth, pm))
        self.ups = {}
        self.decoders = {}
        for i in range(depth, 0, -1):
            self.ups[i] = self.child(f"up{i}", ConvTranspose2d(f * 2**i, f * 2 ** (i - 1)))
            self.decoders[i] = self.child(f"dec{i}", DoubleConv(f * 2**i, f * 2 ** (i - 1), pm))
        self.head = self.child("head", Conv2d(f, 1, kernel=1, pad=0))

    def encode(self, x):
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
            h = ad.maxpool2d(h)
        return self.bottleneck(h), skips

    def _forward(self, x):
        h, skips = self.encode(x)
        for i in range(self.config.depth, 0, -1):
            up = self.ups[i](h)
            h = self.decoders[i](ad.concat([skips[i - 1], up], axis=1))
        return ad.sigmoid(self.head(h))


class PatchTokenModel(Model):
    """Patch embedding, positional encoding, residual token blocks, patch expansion."""

    def __init__(self, config, make_block):
        super().__init__(config)
        d, p = config.features, config.patch
        self.embed = self.child("embed", PatchEmbed(config.in_channels, p, d))
        self.blocks = [self.child(f"block{i}", make_block()) for i in range(config.depth)]
        self.expand = self.child("expand", PatchExpand(d, p, 1))

    def tokens(self, x):
        n, _, h, w = x.shape
        t = self.embed(x)
        pe = positional_encoding(t.shape[1], self.config.features)
        t = ad.add(t, Tensor(np.broadcast_to(pe, t.shape)))
        for block in self.blocks:
            t = block(t)
        return t

    def _forward(self, x):
        _, _, h, w = x.shape
        return ad.sigmoid(self.expand(self.tokens(x), h, w))


class ViT(PatchTokenModel):
    kind = "vit"

    def __init__(self, config):
        super().__init__(config, lambda: TransformerBlock(config.features, config.heads))


class VSSM(PatchTokenModel):
    kind = "vssm"

    def __init__(self, config):
        super().__init__(config, lambda: SSMBlock(config.features, config.state_dim))


def build_cnn(config):
    return CNN(_checked(config, "cnn"))


def build_unet(config):
    return UNet(_checked(config, "unet"))


def build_vit(config):
    return ViT(_checked(config, "vit"))


def build_vssm(config):
    return VSSM(_checked(config, "vssm"))


def _checked(config, arch):
    if config.arch != arch:
        raise ConfigError(f"config is for {config.arch!r}, not {arch!r}")
    return config.validate()


BUILDERS = {"cnn": build_cnn, "unet": build_unet, "vit": build_vit, "vssm": build_vssm}


def build_model(config, seed=0):
    """Build the architecture named by ``config.arch`` and initialize it from ``seed``."""
    config.validate()
    model = BUILDERS[config.arch](config)
    return init_params(model, InitPolicy(seed))


def count_params(model):
    return model.count_params()


def forward(model, batch):
    return model(batch)


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"SEGBCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path, state=None, extra=None):
    """Write named float64 arrays behind a JSON header.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header, then the little-endian arrays back to back in header order.
    ``extra`` is free-form JSON metadata stored in the header.
    """
    state = model.state_dict() if state is None else state
    entries = []
    offset = 0
    for name, arr in state.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "dtype": "float64-le",
            "config": model.config.to_dict(),
            "params": entries,
            "extra": extra or {},
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return (config dict, {name: array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a segbench checkpoint")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20 : 20 + hlen])
    if header.get("dtype") != "float64-le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    body = blob[20 + hlen :]
    state = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"]))
        end = e["offset"] + 8 * count
        if end > len(body):
            raise FormatError(f"{path}: truncated data for {e['name']}")
        state[e["name"]] = np.frombuffer(body[e["offset"] : end], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header["config"], state


def load_checkpoint(path):
    config, state = read_checkpoint(path)
    model = build_model(ModelConfig.from_dict(config))
    model.load_state_dict(state)
    return model
