"""Coil sensitivity estimation from the ACS region and learned refinement."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .operators import apply_mask, channels_to_complex, complex_to_channels, ifft2c, rss

__all__ = [
    "SensitivityRefiner",
    "UNet",
    "estimate_initial_maps",
    "normalize_maps",
    "refine_maps",
]


def _relative_floor(magnitude: torch.Tensor, eps: float) -> torch.Tensor:
    # Per-sample threshold eps * max over (n_y, n_x); magnitude is [..., n_y, n_x].
    return eps * magnitude.flatten(-2).amax(-1)[..., None, None]


def estimate_initial_maps(kspace: torch.Tensor, acs: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Sensitivity maps from the auto-calibration region.

    Each coil's low-resolution ACS image is divided by the root-sum-of-squares
    of all coils' ACS images. Pixels where that RSS falls below ``eps`` times its
    maximum are set to zero.

    Parameters
    ----------
    kspace : torch.Tensor
        Complex k-space ``[..., n_c, n_y, n_x]``.
    acs : torch.Tensor
        ACS mask ``[..., n_y, n_x]``.
    eps : float
        Relative threshold and regularizer of the division.

    Returns
    -------
    torch.Tensor
        Complex maps with the shape of ``kspace``.
    """
    if not bool(acs.bool().any()):
        raise ValueError("ACS region is empty; cannot estimate sensitivity maps.")
    images = ifft2c(apply_mask(kspace, acs))
    combined = rss(images)
    floor = _relative_floor(combined, eps)
    support = combined >= floor
    support = support & (combined > 0)
    maps = images / (combined + floor).unsqueeze(-3)
    return torch.where(support.unsqueeze(-3), maps, torch.zeros_like(maps))


def normalize_maps(maps: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Scale maps so that ``sum_k conj(S_k) S_k = 1`` wherever their RSS exceeds ``eps * max``; zero elsewhere."""
    combined = rss(maps)
    support = (combined > _relative_floor(combined, eps)).unsqueeze(-3)
    safe = torch.where(support.squeeze(-3), combined, torch.ones_like(combined)).unsqueeze(-3)
    return torch.where(support, maps / safe, torch.zeros_like(maps))


class _ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, negative_slope: float, dropout: float):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.InstanceNorm2d(out_channels),
            nn.LeakyReLU(negative_slope),
            nn.Dropout2d(dropout),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.InstanceNorm2d(out_channels),
            nn.LeakyReLU(negative_slope),
            nn.Dropout2d(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class UNet(nn.Module):
    """U-Net with max-pool downsampling and nearest-neighbour upsampling.

    One encoder block per entry of ``filters``, each followed by a 2x max-pool,
    a bottleneck with twice the last width, and a mirrored decoder. Inputs are
    replicate-padded to a multiple of ``2 ** len(filters)`` (and to at least twice
    that size) and cropped back.
    """

    def __init__(
        self,
        in_channels: int = 2,
        out_channels: int = 2,
        filters: Sequence[int] = (8, 16, 32, 64),
        negative_slope: float = 0.2,
        dropout: float = 0.0,
    ):
        super().__init__()
        filters = tuple(filters)
        self.multiple = 2 ** len(filters)
        self.down = nn.ModuleList()
        channels = in_channels
        for width in filters:
            self.down.append(_ConvBlock(channels, width, negative_slope, dropout))
            channels = width
        self.bottleneck = _ConvBlock(channels, 2 * channels, negative_slope, dropout)
        channels = 2 * channels

        self.up_conv = nn.ModuleList()
        self.up_block = nn.ModuleList()
        for width in reversed(filters):
            self.up_conv.append(
                nn.Sequential(
                    nn.Conv2d(channels, width, 3, padding=1, bias=False),
                    nn.InstanceNorm2d(width),
                    nn.LeakyReLU(negative_slope),
                )
            )
            self.up_block.append(_ConvBlock(2 * width, width, negative_slope, dropout))
            channels = width
        self.out = nn.Conv2d(channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n_y, n_x = x.shape[-2:]
        # Instance norm needs at least 2x2 pixels at the bottleneck.
        pad_y = max(-n_y % self.multiple, 2 * self.multiple - n_y)
        pad_x = max(-n_x % self.multiple, 2 * self.multiple - n_x)
        pads = (pad_x // 2, pad_x - pad_x // 2, pad_y // 2, pad_y - pad_y // 2)
        out = F.pad(x, pads, mode="replicate") if pad_x or pad_y else x

        skips = []
        for block in self.down:
            out = block(out)
            skips.append(out)
            out = F.max_pool2d(out, 2)
        out = self.bottleneck(out)
        for up_conv, up_block, skip in zip(self.up_conv, self.up_block, reversed(skips)):
            out = up_conv(F.interpolate(out, scale_factor=2, mode="nearest"))
            out = up_block(torch.cat([out, skip], dim=1))
        out = self.out(out)
        return out[..., pads[2] : pads[2] + n_y, pads[0] : pads[0] + n_x]


class SensitivityRefiner(nn.Module):
    """Learned refinement of ACS sensitivity maps.

    Every coil's map goes through the same U-Net as a 2-channel image (coils are
    folded into the batch axis). The U-Net predicts a correction added to the
    input map, and the result is re-normalized to unit coil-sum of squares.
    """

    def __init__(self, filters: Sequence[int] = (8, 16, 32, 64), negative_slope: float = 0.2, dropout: float = 0.0):
        super().__init__()
        self.unet = UNet(2, 2, filters, negative_slope, dropout)

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        if not bool(torch.isfinite(torch.view_as_real(maps)).all()):
            raise ValueError("Initial sensitivity maps contain non-finite values.")
        shape = maps.shape
        folded = complex_to_channels(maps.reshape(-1, *shape[-2:]), dim=1)
        refined = folded + self.unet(folded)
        if not bool(torch.isfinite(refined).all()):
            raise FloatingPointError("Sensitivity refinement produced non-finite activations.")
        refined = channels_to_complex(refined, dim=1).reshape(shape)
        # Pixels outside the initial support stay zero.
        support = (rss(maps) > 0).unsqueeze(-3)
        return normalize_maps(torch.where(support, refined, torch.zeros_like(refined)))


def refine_maps(init_maps: torch.Tensor, refiner: SensitivityRefiner) -> torch.Tensor:
    """Apply a :class:`SensitivityRefiner` to initial maps ``[..., n_c, n_y, n_x]``."""
    return refiner(init_maps)
