"""Sub-sampling masks and the auto-calibration (ACS) operator.

Masks are generated as numpy boolean arrays of shape ``(n_y, n_x)``. Cartesian
masks sample full columns (the last axis is the phase-encode axis); the
variable-density generator produces 2D point masks with a fully-sampled
central disc.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .operators import apply_mask

__all__ = [
    "SamplingMask",
    "acs_extract",
    "build_mask",
    "effective_acceleration",
    "full_mask",
    "load_mask",
    "random_cartesian_mask",
    "save_mask",
    "variable_density_mask",
]

# Default ACS fractions for random Cartesian masks (4 -> 8 %, 8 -> 4 %).
DEFAULT_ACS_FRACTIONS = {4: 0.08, 5: 0.08, 8: 0.04, 10: 0.04}

_MASK_MAGIC = b"SMSK"
_MASK_VERSION = 1
_MASK_HEADER = struct.Struct("<4sHIIdq")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SamplingMask:
    """Binary k-space sampling pattern with its ACS sub-mask.

    Attributes
    ----------
    mask : np.ndarray
        Boolean array ``(n_y, n_x)``; True where k-space is acquired.
    acs : np.ndarray
        Boolean array ``(n_y, n_x)`` marking the auto-calibration region. Always a subset of ``mask``.
    acceleration : float
        The requested acceleration factor.
    seed : int, optional
        Seed used to draw the random part of the mask.
    """

    mask: np.ndarray
    acs: np.ndarray
    acceleration: float
    seed: Optional[int] = None

    def __post_init__(self):
        if self.mask.shape != self.acs.shape or self.mask.ndim != 2:
            raise ValueError(f"mask and acs must be 2D with equal shapes, got {self.mask.shape} and {self.acs.shape}.")
        if np.any(self.acs & ~self.mask):
            raise ValueError("ACS region must be contained in the sampling mask.")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def mask_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.mask).to(dtype)

    def acs_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.acs).to(dtype)


def full_mask(shape: tuple[int, int]) -> SamplingMask:
    ones = np.ones(shape, dtype=bool)
    return SamplingMask(ones, ones.copy(), 1.0)


def _acs_columns(n_x: int, acs_fraction: float) -> np.ndarray:
    n_acs = max(1, _round_half_up(acs_fraction * n_x))
    start = n_x // 2 - n_acs // 2
    return np.arange(start, start + n_acs)


def random_cartesian_mask(
    shape: tuple[int, int], acceleration: float, acs_fraction: float, seed: int
) -> SamplingMask:
    """Random Cartesian column mask with a fully-sampled low-frequency block.

    The centered ``round(acs_fraction * n_x)`` columns are always acquired, the
    remaining columns are drawn uniformly at random until ``round(n_x / R)``
    columns are sampled.

    Parameters
    ----------
    shape : tuple of int
        ``(n_y, n_x)``.
    acceleration : float
        Target acceleration ``R``.
    acs_fraction : float
        Fraction of columns in the ACS block.
    seed : int
        Seed for the random column draw.

    Returns
    -------
    SamplingMask
    """
    n_y, n_x = shape
    if acceleration <= 0 or acceleration > n_x:
        raise ValueError(f"Acceleration must lie in (0, {n_x}], got {acceleration}.")
    if acceleration == 1:
        return SamplingMask(np.ones(shape, bool), np.ones(shape, bool), 1.0, seed)
    if acs_fraction * n_x < 1:
        raise ValueError(f"acs_fraction={acs_fraction} yields less than one ACS column for n_x={n_x}.")

    budget = _round_half_up(n_x / acceleration)
    acs_cols = _acs_columns(n_x, acs_fraction)
    if len(acs_cols) > budget:
        raise ValueError(f"ACS block of {len(acs_cols)} columns exceeds the budget of {budget} columns at R={acceleration}.")

    rng = np.random.default_rng(seed)
    others = np.setdiff1d(np.arange(n_x), acs_cols)
    chosen = rng.choice(others, size=budget - len(acs_cols), replace=False)

    columns = np.zeros(n_x, dtype=bool)
    columns[acs_cols] = True
    columns[chosen] = True
    acs_line = np.zeros(n_x, dtype=bool)
    acs_line[acs_cols] = True
    return SamplingMask(
        np.broadcast_to(columns, shape).copy(), np.broadcast_to(acs_line, shape).copy(), float(acceleration), seed
    )


def _centered_grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    n_y, n_x = shape
    yy = (np.arange(n_y) - n_y // 2) / (n_y / 2)
    xx = (np.arange(n_x) - n_x // 2) / (n_x / 2)
    return np.meshgrid(yy, xx, indexing="ij")


def variable_density_mask(
    shape: tuple[int, int],
    acceleration: float,
    center_radius: float = 0.12,
    seed: int = 0,
    density_width: float = 0.35,
) -> SamplingMask:
    """2D point mask with a fully-sampled central disc and Gaussian-density sampling outside.

    ``center_radius`` and ``density_width`` are expressed in normalized
    frequency units, where the k-space edge lies at distance 1 from the center.
    Exactly ``round(n_y * n_x / R)`` points are sampled.
    """
    if acceleration <= 0:
        raise ValueError(f"Acceleration must be positive, got {acceleration}.")
    n = shape[0] * shape[1]
    if acceleration == 1:
        return SamplingMask(np.ones(shape, bool), np.ones(shape, bool), 1.0, seed)

    yy, xx = _centered_grid(shape)
    radius = np.sqrt(yy**2 + xx**2)
    disc = radius <= center_radius
    budget = _round_half_up(n / acceleration)
    n_disc = int(disc.sum())
    if n_disc == 0:
        raise ValueError(f"center_radius={center_radius} selects no samples for shape {shape}.")
    if n_disc > budget:
        raise ValueError(f"Central disc of {n_disc} samples exceeds the budget of {budget} at R={acceleration}.")

    rng = np.random.default_rng(seed)
    outside = np.flatnonzero(~disc.ravel())
    weights = np.exp(-radius.ravel()[outside] ** 2 / (2 * density_width**2))
    chosen = rng.choice(outside, size=budget - n_disc, replace=False, p=weights / weights.sum())

    mask = disc.copy().ravel()
    mask[chosen] = True
    return SamplingMask(mask.reshape(shape), disc, float(acceleration), seed)


def build_mask(
    kind: str,
    shape: tuple[int, int],
    acceleration: float,
    seed: int,
    acs_fraction: Optional[float] = None,
    center_radius: float = 0.12,
) -> SamplingMask:
    """Dispatch to a mask generator by name (``"cartesian"`` or ``"variable-density"``)."""
    if acceleration == 1:
        return full_mask(shape)
    if kind == "cartesian":
        if acs_fraction is None:
            acs_fraction = DEFAULT_ACS_FRACTIONS.get(int(acceleration), 0.08)
        return random_cartesian_mask(shape, acceleration, acs_fraction, seed)
    if kind == "variable-density":
        return variable_density_mask(shape, acceleration, center_radius, seed)
    raise ValueError(f"Unknown mask type {kind!r}; expected 'cartesian' or 'variable-density'.")


def acs_extract(kspace: torch.Tensor, mask: Union[SamplingMask, torch.Tensor]) -> torch.Tensor:
    """Keep only the auto-calibration region of multi-coil k-space."""
    acs = mask.acs_tensor() if isinstance(mask, SamplingMask) else mask
    return apply_mask(kspace, acs)


def effective_acceleration(mask: Union[SamplingMask, np.ndarray]) -> Fraction:
    """Ratio of the total number of k-space locations to the acquired ones."""
    bits = mask.mask if isinstance(mask, SamplingMask) else np.asarray(mask)
    nonzero = int(np.count_nonzero(bits))
    if nonzero == 0:
        raise ValueError("Mask samples no k-space locations.")
    return Fraction(bits.size, nonzero)


def save_mask(path: Union[str, Path], mask: SamplingMask) -> None:
    """Write a mask as a small header followed by packed mask and ACS bitmaps."""
    n_y, n_x = mask.shape
    seed = -1 if mask.seed is None else int(mask.seed)
    header = _MASK_HEADER.pack(_MASK_MAGIC, _MASK_VERSION, n_y, n_x, float(mask.acceleration), seed)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.packbits(mask.mask.ravel()).tobytes())
        f.write(np.packbits(mask.acs.ravel()).tobytes())


def load_mask(path: Union[str, Path]) -> SamplingMask:
    raw = Path(path).read_bytes()
    if len(raw) < _MASK_HEADER.size:
        raise ValueError(f"{path}: file too short for a mask header.")
    magic, version, n_y, n_x, acceleration, seed = _MASK_HEADER.unpack_from(raw)
    if magic != _MASK_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}.")
    if version != _MASK_VERSION:
        raise ValueError(f"{path}: unsupported mask version {version}.")
    n = n_y * n_x
    n_packed = (n + 7) // 8
    expected = _MASK_HEADER.size + 2 * n_packed
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}.")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_MASK_HEADER.size)
    bits = np.unpackbits(body[:n_packed])[:n].astype(bool).reshape(n_y, n_x)
    acs = np.unpackbits(body[n_packed:])[:n].astype(bool).reshape(n_y, n_x)
    return SamplingMask(bits, acs, acceleration, None if seed == -1 else seed)
