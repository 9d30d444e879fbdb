"""The compression-reconstruction-subtraction detector.

Data flow for a single-channel image ``I``::

    F_I   = stem(I)                       3x3 conv, 1 -> C0
    F_B   = crm(F_I)                      dense U-Net, same shape as F_I
    F_T   = ResBlock(F_I - F_B)
    F_hat = F_T + F_B
    conf  = sigmoid(seg_head(F_T))        3x3 conv, C0 -> 1
    recon = rec_head(F_hat)               3x3 conv, C0 -> 1
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io as lio
from .blocks import AttnParams, DownParams, ResBlockParams, UpParams, conv_param, down_block, preact_resblock, self_attention, up_block
from .diffcore import Tensor, conv2d, sigmoid


SEG_HEAD_INIT_SCALE = 0.01
SEG_PRIOR = 0.001


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 4
    channels: tuple = (16, 32, 64, 128)
    resblocks_per_encoder_stage: int = 2
    attention_blocks: int = 1
    groupnorm_groups: int = 8
    seed: int = 0
    dense_skips: bool = True
    subtraction_resblocks: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != self.stages:
            raise ValueError(f"channels {list(self.channels)} has {len(self.channels)} entries but stages={self.stages}")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        for a, b in zip(self.channels, self.channels[1:]):
            if b != 2 * a:
                raise ValueError(f"channels must double per stage, got {list(self.channels)}")
        if self.attention_blocks not in (0, 1, 2):
            raise ValueError(f"attention_blocks must be 0, 1 or 2, got {self.attention_blocks}")
        if self.resblocks_per_encoder_stage < 1 or self.subtraction_resblocks < 1:
            raise ValueError("ResBlock counts must be >= 1")

    @property
    def divisor(self) -> int:
        return 2**self.stages

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        presets = {
            "default": {},
            "tiny": {"stages": 4, "channels": (8, 16, 32, 64)},
            "micro": {"stages": 2, "channels": (8, 16)},
        }
        if name not in presets:
            raise ValueError(f"unknown model preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


@dataclass
class Model:
    config: ModelConfig
    stem_w: Tensor
    stem_b: Tensor
    encoder: list
    attention: list
    decoder: list
    subtraction: list
    seg_w: Tensor
    seg_b: Tensor
    rec_w: Tensor
    rec_b: Tensor
    meta: dict = field(default_factory=dict)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for t in (self.stem_w, self.stem_b):
            out[t.name] = t
        for group in (self.encoder, self.attention, self.decoder, self.subtraction):
            for p in group:
                out.update(p.named())
        for t in (self.seg_w, self.seg_b, self.rec_w, self.rec_b):
            out[t.name] = t
        return out

    @property
    def dtype(self):
        return self.stem_w.dtype

    def __call__(self, image):
        return forward(self, image)


def build(config: ModelConfig, dtype=np.float64) -> Model:
    """Deterministically initialise a model from ``config``."""
    rng = np.random.default_rng(config.seed)
    ch = config.channels
    g = config.groupnorm_groups
    stem_w, stem_b = conv_param(rng, ch[0], 1, 3, dtype, "stem", gain=1.0)
    encoder = [DownParams.init(rng, c, config.resblocks_per_encoder_stage, f"enc{i}", g, dtype) for i, c in enumerate(ch)]
    attention = [AttnParams.init(rng, 2 * ch[-1], f"attn{j}", dtype) for j in range(config.attention_blocks)]
    n_skips = config.resblocks_per_encoder_stage if config.dense_skips else 1
    decoder = [
        UpParams.init(rng, c, n_skips, config.resblocks_per_encoder_stage + 1, f"dec{i}", g, dtype)
        for i, c in enumerate(ch)
    ]
    subtraction = [ResBlockParams.init(rng, ch[0], f"sub{j}", g, dtype) for j in range(config.subtraction_resblocks)]
    seg_w, seg_b = conv_param(rng, 1, ch[0], 3, dtype, "seg_head", gain=1.0)
    # a small head and a rare-target prior keep the L1 term on the confidence map
    # from driving every pixel to 0 before SoftIoU can act
    seg_w.data *= SEG_HEAD_INIT_SCALE
    seg_b.data[...] = -np.log((1.0 - SEG_PRIOR) / SEG_PRIOR)
    rec_w, rec_b = conv_param(rng, 1, ch[0], 3, dtype, "rec_head", gain=1.0)
    return Model(config, stem_w, stem_b, encoder, attention, decoder, subtraction, seg_w, seg_b, rec_w, rec_b)


def build_for_gradcheck(config: ModelConfig) -> Model:
    """Float64 model at a generic point: the segmentation head without its small
    scale and prior bias, so upstream gradients are well above difference round off."""
    model = build(config, np.float64)
    model.seg_w.data /= SEG_HEAD_INIT_SCALE
    model.seg_b.data[...] = 0.0
    return model


def param_count(model: Model) -> int:
    return int(sum(t.size for t in model.parameters().values()))


def _check_divisible(x: Tensor, divisor: int):
    h, w = x.shape[2:]
    if h % divisor or w % divisor:
        raise ValueError(f"spatial size {h}x{w} must be divisible by {divisor} for this configuration")


def crm_forward(model: Model, f_i: Tensor, return_bottleneck: bool = False):
    """Compression-reconstruction: encoder, bottleneck attention, decoder."""
    cfg = model.config
    _check_divisible(f_i, cfg.divisor)
    x = f_i
    levels = []
    for p in model.encoder:
        skips, x = down_block(x, p)
        levels.append(skips if cfg.dense_skips else skips[-1:])
    for p in model.attention:
        x = self_attention(x, p)
    bottleneck = x
    for p, skips in zip(reversed(model.decoder), reversed(levels)):
        x = up_block(x, skips, p)
    return (x, bottleneck) if return_bottleneck else x


def subtraction_forward(f_i: Tensor, f_b: Tensor, params):
    """Return ``(F_T, F_hat)`` with ``F_T = ResBlock(F_I - F_B)`` and ``F_hat = F_T + F_B``."""
    if f_i.shape != f_b.shape:
        raise ValueError(f"subtraction needs equal shapes, got {f_i.shape} and {f_b.shape}")
    if isinstance(params, ResBlockParams):
        params = [params]
    r = f_i - f_b
    for p in params:
        r = preact_resblock(r, p)
    f_hat = r + f_b
    # F_T is re-derived from the sum so that F_hat - F_B - F_T is exactly 0
    # in floating point; it differs from r only by the rounding of the add
    f_t = f_hat - f_b
    return f_t, f_hat


def forward_features(model: Model, image) -> dict:
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=model.dtype))
    if image.ndim != 4 or image.shape[1] != 1:
        raise ValueError(f"expected an N x 1 x H x W image batch, got {image.shape}")
    lo, hi = float(image.data.min()), float(image.data.max())
    if lo < 0.0 or hi > 1.0:
        warnings.warn(f"input outside [0, 1] (range {lo:.3g}..{hi:.3g}); images should be divided by 255", stacklevel=3)
    f_i = conv2d(image, model.stem_w, model.stem_b, 1, 1)
    f_b, bott = crm_forward(model, f_i, return_bottleneck=True)
    f_t, f_hat = subtraction_forward(f_i, f_b, model.subtraction)
    conf = sigmoid(conv2d(f_t, model.seg_w, model.seg_b, 1, 1))
    rec = conv2d(f_hat, model.rec_w, model.rec_b, 1, 1)
    return {"F_I": f_i, "F_B": f_b, "F_T": f_t, "F_hat": f_hat, "bottleneck": bott, "confidence": conf, "reconstruction": rec}


def forward(model: Model, image):
    """Return ``(confidence, reconstruction)``, both ``N x 1 x H x W``."""
    feats = forward_features(model, image)
    return feats["confidence"], feats["reconstruction"]


# ---------------------------------------------------------------------------
# checkpoints: b"LRRC", u32 header length, JSON header, LRRT blobs in header order
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LRRC"


def checkpoint_bytes(model: Model, meta: dict | None = None) -> bytes:
    params = model.parameters()
    blobs = [lio.tensor_to_bytes(t.data) for t in params.values()]
    header = {
        "config": model.config.to_dict(),
        "meta": meta if meta is not None else model.meta,
        "tensors": [[name, len(b)] for name, b in zip(params, blobs)],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(blobs)


def save_checkpoint(model: Model, path, meta: dict | None = None):
    lio.atomic_write_bytes(path, checkpoint_bytes(model, meta))


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    (hl,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hl])
    offset = 8 + hl
    arrays = {}
    for name, nbytes in header["tensors"]:
        arrays[name] = lio.tensor_from_bytes(raw[offset : offset + nbytes])
        offset += nbytes
    config = ModelConfig.from_dict(header["config"])
    first = next(iter(arrays.values()))
    model = build(config, dtype=first.dtype)
    params = model.parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise ValueError(f"{path}: parameter names disagree with config: {missing[:5]}")
    for name, t in params.items():
        if t.shape != arrays[name].shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name].copy()
    model.meta = header.get("meta", {})
    return model
