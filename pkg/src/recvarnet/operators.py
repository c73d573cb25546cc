"""Differentiable k-space and coil operators.

All operators act on torch tensors. Complex-valued quantities are carried as
complex tensors; the network modules consume the real two-channel form produced
by :func:`complex_to_channels`. Spatial axes are always the last two.

Shapes used throughout::

    image          [..., n_y, n_x]
    coil stack     [..., n_c, n_y, n_x]
    sampling mask  [..., n_y, n_x]   (broadcast over coils)
"""

from __future__ import annotations

import torch

__all__ = [
    "adjoint_A",
    "apply_mask",
    "channels_to_complex",
    "complex_to_channels",
    "expand",
    "fft2c",
    "forward_A",
    "ifft2c",
    "reduce",
    "rss",
    "sense_reconstruct",
]

_SPATIAL = (-2, -1)


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise ValueError(f"{name} contains non-finite values.")


def fft2c(x: torch.Tensor) -> torch.Tensor:
    """Centered, orthonormal 2D Fourier transform over the last two axes.

    The zero frequency sits at index ``n // 2`` along each axis, also for odd
    sizes.

    Parameters
    ----------
    x : torch.Tensor
        Real or complex tensor with at least two dimensions.

    Returns
    -------
    torch.Tensor
        Complex tensor of the same shape.
    """
    _check_finite(x, "fft2c input")
    x = torch.fft.ifftshift(x, dim=_SPATIAL)
    x = torch.fft.fft2(x, dim=_SPATIAL, norm="ortho")
    return torch.fft.fftshift(x, dim=_SPATIAL)


def ifft2c(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`fft2c`."""
    _check_finite(x, "ifft2c input")
    x = torch.fft.ifftshift(x, dim=_SPATIAL)
    x = torch.fft.ifft2(x, dim=_SPATIAL, norm="ortho")
    return torch.fft.fftshift(x, dim=_SPATIAL)


def apply_mask(kspace: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero the unsampled k-space locations of every coil.

    ``mask`` has shape ``[..., n_y, n_x]`` and is broadcast over the coil axis of
    ``kspace`` (``[..., n_c, n_y, n_x]``).
    """
    if kspace.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"Spatial shape of k-space {tuple(kspace.shape[-2:])} does not match mask {tuple(mask.shape[-2:])}."
        )
    mask = mask.to(kspace.real.dtype if kspace.is_complex() else kspace.dtype)
    return kspace * mask.unsqueeze(-3)


def _check_coils(coil_data: torch.Tensor, maps: torch.Tensor) -> None:
    if coil_data.shape[-3:] != maps.shape[-3:]:
        raise ValueError(
            f"Coil data shape {tuple(coil_data.shape[-3:])} does not match sensitivity maps {tuple(maps.shape[-3:])}."
        )


def expand(image: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
    """Multiply an image by every coil sensitivity map.

    ``image`` is ``[..., n_y, n_x]``, ``maps`` is ``[..., n_c, n_y, n_x]``.
    """
    if image.shape[-2:] != maps.shape[-2:]:
        raise ValueError(f"Image shape {tuple(image.shape[-2:])} does not match maps {tuple(maps.shape[-2:])}.")
    return maps * image.unsqueeze(-3)


def reduce(coil_images: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
    """Combine coil images as ``sum_k conj(S_k) * x_k``."""
    _check_coils(coil_images, maps)
    return (maps.conj() * coil_images).sum(-3)


def forward_A(image: torch.Tensor, maps: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Multi-coil forward model: mask, Fourier transform, expand."""
    return apply_mask(fft2c(expand(image, maps)), mask)


def adjoint_A(kspace: torch.Tensor, maps: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Adjoint of :func:`forward_A`."""
    return reduce(ifft2c(apply_mask(kspace, mask)), maps)


def rss(coil_images: torch.Tensor, dim: int = -3) -> torch.Tensor:
    """Root-sum-of-squares coil combination, returns a real tensor."""
    if coil_images.is_complex():
        power = coil_images.real**2 + coil_images.imag**2
    else:
        power = coil_images**2
    power = power.sum(dim)
    # sqrt'(0) is infinite; route zero pixels through a constant branch so gradients stay finite.
    nonzero = power > 0
    return torch.where(nonzero, torch.where(nonzero, power, torch.ones_like(power)).sqrt(), torch.zeros_like(power))


def sense_reconstruct(kspace: torch.Tensor, maps: torch.Tensor) -> torch.Tensor:
    """SENSE coil combination of (possibly sub-sampled) k-space."""
    return reduce(ifft2c(kspace), maps)


def complex_to_channels(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Stack real and imaginary parts along a new size-2 axis ``dim``."""
    return torch.stack((x.real, x.imag), dim=dim)


def channels_to_complex(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Inverse of :func:`complex_to_channels`."""
    if x.shape[dim] != 2:
        raise ValueError(f"Expected size 2 along axis {dim}, got {x.shape[dim]}.")
    real, imag = x.unbind(dim)
    return torch.complex(real, imag)
