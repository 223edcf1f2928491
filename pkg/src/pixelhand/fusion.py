"""Cascaded feature fusion and the prediction head.

The cascade walks a 4-level feature pyramid coarse-to-fine. At each step the
coarser fused map is upsampled, turned into a suppression mask by a 1x1
convolution, multiplied into the finer level ("highlight" fusion), concatenated
and fused by a 1x1 channel-reduction followed by a 3x3 convolution. The base
variant (BFF) skips the masking and concatenates directly. A head turns any
fused level into GeometryMaps at image resolution.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ParseError
from .geometry import GeometryMaps
from .tensor import (
    ConvKernel,
    Tensor,
    concat_channels,
    conv2d,
    elementwise,
    read_record,
    sigmoid,
    upsample2x,
    write_record,
)

BLOCK_KINDS = ("hff", "bff")

# Rotation values are clipped just inside the open interval so float saturation
# of the sigmoid cannot produce exactly +-pi/2.
_THETA_LIMIT = float(np.nextafter(math.pi / 2, 0.0))


@dataclass(frozen=True)
class FusionConfig:
    """Channel plan and variant switches for the cascade."""

    in_channels: tuple
    fused_channels: tuple
    block: str = "hff"
    head_channels: int = 16
    mask_sigmoid: bool = True
    strict_single_conv: bool = False

    def __post_init__(self):
        if len(self.in_channels) != 4 or len(self.fused_channels) != 4:
            raise ConfigError("need exactly 4 scales")
        if any(c < 1 for c in self.in_channels) or any(c < 1 for c in self.fused_channels):
            raise ConfigError("channel counts must be >= 1")
        if self.fused_channels[3] != self.in_channels[3]:
            raise ConfigError("scale 3 passes through unfused; fused_channels[3] must equal in_channels[3]")
        if self.block not in BLOCK_KINDS:
            raise ConfigError(f"block kind must be one of {BLOCK_KINDS}")
        if self.head_channels < 1:
            raise ConfigError("head_channels must be >= 1")

    def upsampled_channels(self, s: int) -> int:
        """Channels of the upsampled coarser input feeding block s (s in 0..2)."""
        return self.fused_channels[s + 1]


@dataclass(frozen=True)
class BlockWeights:
    mask: ConvKernel
    reduce: ConvKernel
    fuse: ConvKernel


@dataclass(frozen=True)
class HeadWeights:
    merge: ConvKernel
    score: ConvKernel
    rotation: ConvKernel
    distance: ConvKernel


@dataclass(frozen=True)
class FusionWeights:
    """Per-block kernels for scales 0..2 plus an independent head per scale 0..3."""

    blocks: tuple
    heads: tuple

    def __post_init__(self):
        if len(self.blocks) != 3 or len(self.heads) != 4:
            raise ConfigError("need 3 block weight sets and 4 heads")


def _check_spatial_halving(f_s: Tensor, f_prev: Tensor):
    if (f_s.height, f_s.width) != (2 * f_prev.height, 2 * f_prev.width):
        raise ConfigError(
            f"coarser level {f_prev.shape} is not half the size of {f_s.shape}"
        )


def highlight_mask(upsampled: Tensor, weights: BlockWeights, mask_sigmoid: bool = True) -> Tensor:
    """Complement mask the finer level gets multiplied by; in (0, 1) when squashed."""
    raw = conv2d(upsampled, weights.mask)
    return elementwise(1.0, sigmoid(raw) if mask_sigmoid else raw, "sub")


def hff_block(
    f_s: Tensor,
    f_prev_fused: Tensor,
    weights: BlockWeights,
    mask_sigmoid: bool = True,
    strict_single_conv: bool = False,
) -> Tensor:
    """Highlight fusion of one level with the upsampled coarser fused level."""
    _check_spatial_halving(f_s, f_prev_fused)
    u = upsample2x(f_prev_fused)
    masked = elementwise(f_s, highlight_mask(u, weights, mask_sigmoid), "mul")
    merged = concat_channels(masked, u)
    if strict_single_conv:
        return conv2d(merged, weights.fuse)
    return conv2d(conv2d(merged, weights.reduce), weights.fuse)


def bff_block(
    f_s: Tensor,
    f_prev_fused: Tensor,
    weights: BlockWeights,
    strict_single_conv: bool = False,
) -> Tensor:
    """Base fusion: concatenate directly, no masking."""
    _check_spatial_halving(f_s, f_prev_fused)
    u = upsample2x(f_prev_fused)
    merged = concat_channels(f_s, u)
    if strict_single_conv:
        return conv2d(merged, weights.fuse)
    return conv2d(conv2d(merged, weights.reduce), weights.fuse)


def cascade(features, config: FusionConfig, weights: FusionWeights):
    """Fuse a 4-level pyramid coarse-to-fine; returns [f'_0, f'_1, f'_2, f'_3]."""
    feats = list(features)
    if len(feats) != 4:
        raise ConfigError(f"need 4 pyramid levels, got {len(feats)}")
    for s in range(4):
        if feats[s].channels != config.in_channels[s]:
            raise ConfigError(
                f"level {s} has {feats[s].channels} channels, config says {config.in_channels[s]}"
            )
    for s in range(3):
        _check_spatial_halving(feats[s], feats[s + 1])
    fused = [None, None, None, feats[3]]
    for s in (2, 1, 0):
        if config.block == "hff":
            fused[s] = hff_block(
                feats[s], fused[s + 1], weights.blocks[s],
                config.mask_sigmoid, config.strict_single_conv,
            )
        else:
            fused[s] = bff_block(
                feats[s], fused[s + 1], weights.blocks[s], config.strict_single_conv
            )
    return fused


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def head(fused: Tensor, weights: HeadWeights, out_h: int, out_w: int) -> GeometryMaps:
    """Predict GeometryMaps from one fused level.

    A 3x3 merge convolution runs at feature resolution, the result is upsampled
    to (out_h, out_w), then 1x1/1x1/3x3 convolutions produce score, rotation and
    distance. Score is a sigmoid; rotation maps sigmoid output onto
    (-pi/2, pi/2); distances go through softplus so they stay non-negative.
    """
    merged = conv2d(fused, weights.merge)
    h, w = merged.height, merged.width
    if out_h % h or out_w % w or out_h // h != out_w // w:
        raise ConfigError(f"output {out_h}x{out_w} is not an integer multiple of {h}x{w}")
    factor = out_h // h
    if factor < 1 or factor & (factor - 1):
        raise ConfigError(f"upsampling factor {factor} is not a power of two")
    while merged.height < out_h:
        merged = upsample2x(merged)
    score = sigmoid(conv2d(merged, weights.score))
    rot_sig = sigmoid(conv2d(merged, weights.rotation))
    rotation = np.clip((rot_sig.data - 0.5) * math.pi, -_THETA_LIMIT, _THETA_LIMIT)
    distance = _softplus(conv2d(merged, weights.distance).data)
    return GeometryMaps(score, Tensor(rotation), Tensor(distance))


def _block_shapes(config: FusionConfig, s: int):
    n_s = config.in_channels[s]
    ch_u = config.upsampled_channels(s)
    c_s = config.fused_channels[s]
    concat_ch = n_s + ch_u
    fuse_in = concat_ch if config.strict_single_conv else c_s
    return {
        "mask": (n_s, ch_u, 1, 1),
        "reduce": (c_s, concat_ch, 1, 1),
        "fuse": (c_s, fuse_in, 3, 3),
    }


def _head_shapes(config: FusionConfig, s: int):
    hc = config.head_channels
    return {
        "merge": (hc, config.fused_channels[s], 3, 3),
        "score": (1, hc, 1, 1),
        "rotation": (1, hc, 1, 1),
        "distance": (4, hc, 3, 3),
    }


def make_random_weights(config: FusionConfig, seed: int = 0) -> FusionWeights:
    """Seeded Gaussian weights (zero biases) matching the config's shapes."""
    rng = np.random.default_rng(seed)

    def kernel(shape):
        scale = 0.3 / math.sqrt(shape[1] * shape[2] * shape[3])
        return ConvKernel(rng.normal(0.0, scale, shape), np.zeros(shape[0]))

    blocks = tuple(
        BlockWeights(**{k: kernel(v) for k, v in _block_shapes(config, s).items()})
        for s in range(3)
    )
    heads = tuple(
        HeadWeights(**{k: kernel(v) for k, v in _head_shapes(config, s).items()})
        for s in range(4)
    )
    return FusionWeights(blocks, heads)


def check_weights(config: FusionConfig, weights: FusionWeights) -> None:
    """Raise ConfigError when any kernel shape disagrees with the config."""
    for s in range(3):
        for name, shape in _block_shapes(config, s).items():
            actual = getattr(weights.blocks[s], name).weights.shape
            if actual != shape:
                raise ConfigError(f"block{s}.{name} has shape {actual}, expected {shape}")
    for s in range(4):
        for name, shape in _head_shapes(config, s).items():
            actual = getattr(weights.heads[s], name).weights.shape
            if actual != shape:
                raise ConfigError(f"head{s}.{name} has shape {actual}, expected {shape}")


def _named_arrays(weights: FusionWeights):
    for s in range(3):
        blk = weights.blocks[s]
        for name in ("mask", "reduce", "fuse"):
            kern = getattr(blk, name)
            yield f"block{s}.{name}.weight", kern.weights
            yield f"block{s}.{name}.bias", kern.bias
    for s in range(4):
        hd = weights.heads[s]
        for name in ("merge", "score", "rotation", "distance"):
            kern = getattr(hd, name)
            yield f"head{s}.{name}.weight", kern.weights
            yield f"head{s}.{name}.bias", kern.bias


def save_weights(weights: FusionWeights, path) -> None:
    """Manifest header (names and shapes) followed by one binary record per array."""
    entries = list(_named_arrays(weights))
    with open(path, "wb") as f:
        f.write(f"PWWEIGHTS {len(entries)}\n".encode())
        for name, arr in entries:
            dims = " ".join(str(d) for d in arr.shape)
            f.write(f"{name} {arr.ndim} {dims}\n".encode())
        for _, arr in entries:
            write_record(f, arr)


def load_weights(path) -> FusionWeights:
    with open(path, "rb") as f:
        header = f.readline().decode(errors="replace").split()
        if len(header) != 2 or header[0] != "PWWEIGHTS":
            raise ParseError(f"{path}: not a weights file")
        try:
            count = int(header[1])
        except ValueError:
            raise ParseError(f"{path}: bad entry count") from None
        manifest = []
        for _ in range(count):
            parts = f.readline().decode(errors="replace").split()
            if len(parts) < 2:
                raise ParseError(f"{path}: truncated manifest")
            name, rank = parts[0], int(parts[1])
            if len(parts) != 2 + rank:
                raise ParseError(f"{path}: manifest entry {name} malformed")
            manifest.append((name, tuple(int(d) for d in parts[2:])))
        arrays = {}
        for name, shape in manifest:
            arr = read_record(f)
            if arr.shape != shape:
                raise ConfigError(
                    f"{path}: {name} record shape {arr.shape} disagrees with manifest {shape}"
                )
            arrays[name] = arr

    def kernel(prefix):
        try:
            return ConvKernel(arrays[f"{prefix}.weight"], arrays[f"{prefix}.bias"])
        except KeyError as exc:
            raise ConfigError(f"{path}: missing kernel {exc.args[0]}") from None

    blocks = tuple(
        BlockWeights(kernel(f"block{s}.mask"), kernel(f"block{s}.reduce"), kernel(f"block{s}.fuse"))
        for s in range(3)
    )
    heads = tuple(
        HeadWeights(
            kernel(f"head{s}.merge"),
            kernel(f"head{s}.score"),
            kernel(f"head{s}.rotation"),
            kernel(f"head{s}.distance"),
        )
        for s in range(4)
    )
    return FusionWeights(blocks, heads)


def infer_config(
    weights: FusionWeights,
    block: str = "hff",
    mask_sigmoid: bool = True,
) -> FusionConfig:
    """Reconstruct the channel plan from kernel shapes (variant switches are not stored)."""
    in_channels = tuple(weights.blocks[s].mask.out_channels for s in range(3)) + (
        weights.blocks[2].mask.in_channels,
    )
    fused_channels = tuple(weights.blocks[s].fuse.out_channels for s in range(3)) + (
        in_channels[3],
    )
    strict = weights.blocks[0].fuse.in_channels != weights.blocks[0].reduce.out_channels
    config = FusionConfig(
        in_channels,
        fused_channels,
        block=block,
        head_channels=weights.heads[0].merge.out_channels,
        mask_sigmoid=mask_sigmoid,
        strict_single_conv=strict,
    )
    check_weights(config, weights)
    return config


def build_pyramid(image: Tensor):
    """Fixed backbone stand-in: average-pool the image to 1/4, 1/8, 1/16, 1/32."""
    if image.height % 32 or image.width % 32:
        raise ConfigError(f"image dims {image.height}x{image.width} must be divisible by 32")

    def pool(t: Tensor, k: int) -> Tensor:
        c, h, w = t.shape
        return Tensor(t.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4)))

    levels = [pool(image, 4)]
    for _ in range(3):
        levels.append(pool(levels[-1], 2))
    return levels
