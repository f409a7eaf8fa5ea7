"""Fixed, lossless stand-in for the upscaler's VAE.

``space_to_depth`` folds every ``4x4`` RGB block into 48 channels, so the
latent has the LR frame's spatial size and decoding is an exact x4
rearrangement. ``pixel`` is the identity codec (the latent is the HR frame
itself).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .dataio import upscale_bicubic

CODEC_MODES = ("space_to_depth", "pixel")


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class LatentCodec:
    mode: str = "space_to_depth"
    image_channels: int = 3

    def __post_init__(self):
        if self.mode not in CODEC_MODES:
            raise CodecError(f"unknown codec mode {self.mode!r}; expected one of {CODEC_MODES}")

    @property
    def scale(self) -> int:
        return 4 if self.mode == "space_to_depth" else 1

    @property
    def latent_channels(self) -> int:
        return self.image_channels * self.scale**2

    def encode(self, hr: torch.Tensor) -> torch.Tensor:
        """``(..., C, sH, sW) -> (..., C*s*s, H, W)``."""
        h, w = hr.shape[-2:]
        if hr.shape[-3] != self.image_channels:
            raise CodecError(f"expected {self.image_channels} image channels, got {hr.shape[-3]}")
        if h % self.scale or w % self.scale:
            raise CodecError(f"frame size {h}x{w} not divisible by codec scale {self.scale}")
        if self.scale == 1:
            return hr.clone()
        return _batched(F.pixel_unshuffle, hr, self.scale)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """``(..., C*s*s, H, W) -> (..., C, sH, sW)``; never clips."""
        if latent.shape[-3] != self.latent_channels:
            raise CodecError(f"expected {self.latent_channels} latent channels, got {latent.shape[-3]}")
        if self.scale == 1:
            return latent.clone()
        return _batched(F.pixel_shuffle, latent, self.scale)


def _batched(fn, x: torch.Tensor, s: int) -> torch.Tensor:
    if x.dim() == 3:
        return fn(x.unsqueeze(0), s).squeeze(0)
    if x.dim() == 4:
        return fn(x, s)
    lead = x.shape[:-3]
    out = fn(x.reshape(-1, *x.shape[-3:]), s)
    return out.reshape(*lead, *out.shape[-3:])


def encode(hr: torch.Tensor, codec: LatentCodec) -> torch.Tensor:
    return codec.encode(hr)


def decode(latent: torch.Tensor, codec: LatentCodec) -> torch.Tensor:
    return codec.decode(latent)


def condition_lr(lr: torch.Tensor, codec: LatentCodec) -> torch.Tensor:
    """Bring LR frames to the latent's spatial size for concatenation.

    A no-op for ``space_to_depth`` (latent size == LR size); bicubic x4 for
    the ``pixel`` codec.
    """
    if codec.scale != 1:
        return lr
    return torch.from_numpy(upscale_bicubic(lr.detach().cpu().numpy(), 4)).to(lr.dtype)
