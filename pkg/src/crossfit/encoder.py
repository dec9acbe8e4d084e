"""Small strided CNN producing per-field feature maps.

Both fields go through one shared parameter set (siamese). Each stage is a
stride-2 convolution followed by relu, so the final activations are
nonnegative and the downstream mask normalization lands in [0,1] without a
special case. Feature maps are channels-last (h, w, d_e); the batched engine
path keeps a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor

__all__ = ["EncoderConfig", "FeatureMap", "Encoder", "encode_stub"]

MACULA_FIELD = "macula-centric"
DISC_FIELD = "optic-disc-centric"


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, ...] = (16, 32, 48, 64)
    stride: int | tuple[int, ...] = 2
    kernel: int | tuple[int, ...] = 3
    input_size: int = 64

    def __post_init__(self):
        if len(self.stage_channels) < 1:
            raise ContractError("encoder needs at least one stage")
        for st, k in zip(self.strides, self.kernels):
            if st < 1 or k < 1:
                raise ContractError(f"bad stride/kernel: {st}/{k}")
            if k % 2 == 0 and k != st:
                # even kernels have no symmetric same-padding; only the exact
                # non-overlapping patch tiling (kernel == stride, no padding) works
                raise ContractError(f"even kernel {k} requires kernel == stride")
        if self.input_size % self.total_stride != 0:
            raise ContractError(
                f"input size {self.input_size} not divisible by total stride {self.total_stride}")

    def _per_stage(self, v) -> tuple[int, ...]:
        n = len(self.stage_channels)
        if isinstance(v, int):
            return (v,) * n
        if len(v) != n:
            raise ContractError(f"per-stage value {v} does not match {n} stages")
        return tuple(v)

    @property
    def strides(self) -> tuple[int, ...]:
        return self._per_stage(self.stride)

    @property
    def kernels(self) -> tuple[int, ...]:
        return self._per_stage(self.kernel)

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def feature_side(self) -> int:
        return self.input_size // self.total_stride

    @property
    def d_e(self) -> int:
        return self.stage_channels[-1]


@dataclass
class FeatureMap:
    values: Tensor  # (h, w, d_e)
    source_field: str = MACULA_FIELD


class Encoder:
    """conv-relu stack; call with (n, 3, S, S) or (3, S, S) tensors."""

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        self.cfg = cfg
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in = 3
        for c_out, k in zip(cfg.stage_channels, cfg.kernels):
            fan_in, fan_out = c_in * k * k, c_out * k * k
            w = ad.xavier_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out)
            self.weights.append(ad.parameter(w))
            self.biases.append(ad.parameter(np.zeros(c_out, dtype=ad.default_dtype())))
            c_in = c_out

    def parameters(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"enc.stage{i}.w", w
            yield f"enc.stage{i}.b", b

    def __call__(self, x: Tensor) -> Tensor:
        """(n,3,S,S) -> (n,h,w,d_e) channels-last (or unbatched equivalents)."""
        s = self.cfg.input_size
        if x.shape[-3:] != (3, s, s):
            raise ShapeError(f"encoder expects (...,3,{s},{s}) input, got {x.shape}")
        # center the [0,1] inputs; an all-positive input makes every
        # first-layer gradient row point the same way and stalls early SGD
        h = ad.add(x, Tensor(np.asarray(-0.5, dtype=ad.default_dtype())))
        for w, b, st, k in zip(self.weights, self.biases,
                               self.cfg.strides, self.cfg.kernels):
            h = ad.conv2d(h, w, stride=st, pad=0 if k == st else k // 2)
            bias = ad.reshape(b, (-1, 1, 1))
            h = ad.relu(ad.add(h, bias))
        if h.ndim == 4:
            return ad.transpose(h, (0, 2, 3, 1))
        return ad.transpose(h, (1, 2, 0))

    def encode_image(self, image: np.ndarray, source_field: str = MACULA_FIELD) -> FeatureMap:
        """Single channels-last image in [0,1] -> FeatureMap."""
        s = self.cfg.input_size
        if image.shape != (s, s, 3):
            raise ShapeError(f"expected ({s},{s},3) image, got {image.shape}")
        x = Tensor(np.ascontiguousarray(np.moveaxis(image, 2, 0)))
        return FeatureMap(self(x), source_field)


def encode_stub(image: np.ndarray, pool_factor: int,
                source_field: str = MACULA_FIELD) -> FeatureMap:
    """Parameter-free stand-in: channel mean, then block average pooling.

    Exactly local, so mask tests can predict every activation by hand.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (S,S,3) image, got {image.shape}")
    s = image.shape[0]
    if image.shape[1] != s or s % pool_factor != 0:
        raise ShapeError(f"side {image.shape[:2]} not square or not divisible by {pool_factor}")
    mono = image.mean(axis=2)
    hw = s // pool_factor
    pooled = mono.reshape(hw, pool_factor, hw, pool_factor).mean(axis=(1, 3))
    return FeatureMap(Tensor(pooled[:, :, None]), source_field)
