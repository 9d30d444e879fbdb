"""Composite blocks: pre-activation residual block with LayerScale,
single-head self-attention, and the encoder/decoder stage blocks."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .diffcore import Tensor, concat, conv2d, group_norm, matmul, relu, reshape, softmax, transpose, upsample2x

LAYERSCALE_INIT = 0.1


def gn_groups(channels: int, preferred: int = 8) -> int:
    """Group count for ``channels``: ``preferred`` when it divides, else one group per channel."""
    if channels >= preferred and channels % preferred == 0:
        return preferred
    return channels


def conv_param(rng, cout, cin, k, dtype, name, gain: float = 2.0):
    """Fan-in scaled normal weight (``gain`` 2 is He for a following ReLU, 1 for a linear conv) and zero bias."""
    std = np.sqrt(gain / (cin * k * k))
    w = Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype), requires_grad=True, name=f"{name}.weight")
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias")
    return w, b


class _Params:
    """Mixin giving dataclass parameter records a flat ``name -> Tensor`` view."""

    def named(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                yield value.name, value
            elif isinstance(value, _Params):
                yield from value.named()
            elif isinstance(value, list):
                for item in value:
                    yield from item.named()


@dataclass
class ResBlockParams(_Params):
    conv1_w: Tensor
    conv1_b: Tensor
    gn1_gamma: Tensor
    gn1_beta: Tensor
    lambda1: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    gn2_gamma: Tensor
    gn2_beta: Tensor
    lambda2: Tensor
    groups: int = 8

    @property
    def channels(self) -> int:
        return self.conv1_w.shape[0]

    @classmethod
    def init(cls, rng, channels: int, name: str, groups: int = 8, dtype=np.float64):
        def vec(value, suffix):
            return Tensor(np.full(channels, value, dtype=dtype), requires_grad=True, name=f"{name}.{suffix}")

        w1, b1 = conv_param(rng, channels, channels, 3, dtype, f"{name}.conv1")
        w2, b2 = conv_param(rng, channels, channels, 3, dtype, f"{name}.conv2")
        return cls(
            w1, b1, vec(1.0, "gn1.gamma"), vec(0.0, "gn1.beta"), vec(LAYERSCALE_INIT, "lambda1"),
            w2, b2, vec(1.0, "gn2.gamma"), vec(0.0, "gn2.beta"), vec(LAYERSCALE_INIT, "lambda2"),
            groups=gn_groups(channels, groups),
        )


def _scaled(lam: Tensor, x: Tensor) -> Tensor:
    return reshape(lam, (1, -1, 1, 1)) * x


def preact_resblock(x: Tensor, p: ResBlockParams) -> Tensor:
    """``x + l1 * GN(relu(conv(x)))`` followed by the same update on the result."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ValueError(f"resblock expects {p.channels} channels, got input {x.shape}")
    h = group_norm(relu(conv2d(x, p.conv1_w, p.conv1_b, 1, 1)), p.groups, p.gn1_gamma, p.gn1_beta)
    x = x + _scaled(p.lambda1, h)
    h = group_norm(relu(conv2d(x, p.conv2_w, p.conv2_b, 1, 1)), p.groups, p.gn2_gamma, p.gn2_beta)
    return x + _scaled(p.lambda2, h)


@dataclass
class AttnParams(_Params):
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @property
    def d_k(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def init(cls, rng, channels: int, name: str, dtype=np.float64):
        std = 1.0 / np.sqrt(channels)

        def mat(suffix):
            data = (rng.standard_normal((channels, channels)) * std).astype(dtype)
            return Tensor(data, requires_grad=True, name=f"{name}.{suffix}")

        return cls(mat("wq"), mat("wk"), mat("wv"), mat("wo"))


def self_attention(x: Tensor, p: AttnParams, return_weights: bool = False):
    """Single-head attention over the ``h*w`` spatial tokens, added back to ``x``."""
    n, c, h, w = x.shape
    if p.wq.shape != (c, c):
        raise ValueError(f"attention projections are {p.wq.shape}, input has {c} channels")
    tokens = transpose(reshape(x, (n, c, h * w)), (0, 2, 1))
    q = matmul(tokens, p.wq)
    k = matmul(tokens, p.wk)
    v = matmul(tokens, p.wv)
    logits = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(p.d_k))
    attn = softmax(logits)
    mixed = matmul(matmul(attn, v), p.wo)
    out = x + reshape(transpose(mixed, (0, 2, 1)), (n, c, h, w))
    return (out, attn) if return_weights else out


@dataclass
class DownParams(_Params):
    resblocks: list
    down_w: Tensor
    down_b: Tensor

    @classmethod
    def init(cls, rng, channels: int, n_resblocks: int, name: str, groups: int = 8, dtype=np.float64):
        blocks = [ResBlockParams.init(rng, channels, f"{name}.res{i}", groups, dtype) for i in range(n_resblocks)]
        w, b = conv_param(rng, 2 * channels, channels, 3, dtype, f"{name}.down", gain=1.0)
        return cls(blocks, w, b)


def down_block(x: Tensor, p: DownParams):
    """ResBlocks at full resolution (each output kept as a skip), then a
    stride-2 3x3 convolution doubling the channels."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"down_block needs even spatial extents, got {x.shape}")
    skips = []
    for rb in p.resblocks:
        x = preact_resblock(x, rb)
        skips.append(x)
    return skips, conv2d(x, p.down_w, p.down_b, stride=2, padding=1)


@dataclass
class UpParams(_Params):
    up_w: Tensor
    up_b: Tensor
    fuse_w: Tensor
    fuse_b: Tensor
    resblocks: list = field(default_factory=list)

    @classmethod
    def init(cls, rng, channels: int, n_skips: int, n_resblocks: int, name: str, groups: int = 8, dtype=np.float64):
        uw, ub = conv_param(rng, channels, 2 * channels, 3, dtype, f"{name}.up", gain=1.0)
        fw, fb = conv_param(rng, channels, channels * (1 + n_skips), 1, dtype, f"{name}.fuse", gain=1.0)
        blocks = [ResBlockParams.init(rng, channels, f"{name}.res{i}", groups, dtype) for i in range(n_resblocks)]
        return cls(uw, ub, fw, fb, blocks)


def up_block(x: Tensor, skips, p: UpParams) -> Tensor:
    """Upsample and halve channels, concatenate with every skip of the level,
    fuse with a 1x1 convolution and refine with ResBlocks."""
    x = conv2d(upsample2x(x), p.up_w, p.up_b, 1, 1)
    for s in skips:
        if s.shape != x.shape:
            raise ValueError(f"skip shape {s.shape} does not match upsampled features {x.shape}")
    want = p.fuse_w.shape[1]
    have = x.shape[1] * (1 + len(skips))
    if want != have:
        raise ValueError(f"up_block fuse expects {want} input channels, got {have} from {len(skips)} skips")
    x = conv2d(concat([x, *skips], axis=1), p.fuse_w, p.fuse_b)
    for rb in p.resblocks:
        x = preact_resblock(x, rb)
    return x
