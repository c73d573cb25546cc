"""Synthetic multi-coil acquisitions and the on-disk volume format.

Volume file layout (all little-endian)::

    offset  size  field
    0       4     magic  b"KSPV"
    4       2     version (uint16)
    6       1     dtype code (1 = complex64, 2 = float32)
    7       1     number of dimensions (1..4)
    8       16    shape, 4 x uint32 (unused trailing dims are 1)
    24      8     noise level sigma (float64)
    32      8     seed (int64, -1 if unknown)
    40      ...   payload, C-ordered; complex entries are interleaved real/imag float32
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .operators import expand, fft2c, ifft2c, rss

__all__ = [
    "AcquisitionSample",
    "MAP_GRADIENT_BOUND",
    "SliceDataset",
    "Volume",
    "VolumeHeader",
    "derive_seed",
    "generate_dataset",
    "generate_phantom",
    "load_manifest",
    "read_header",
    "read_volume",
    "simulate_acquisition",
    "simulate_coil_maps",
    "write_volume",
]

logger = logging.getLogger(__name__)

VOLUME_MAGIC = b"KSPV"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sHBB4Idq")
_DTYPES = {1: np.dtype("<c8"), 2: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("complex64"): 1, np.dtype("float32"): 2}

# Upper bound on |dS/du| of simulated coil maps, with u the image coordinate scaled to [-1, 1].
MAP_GRADIENT_BOUND = 6.0

MANIFEST_NAME = "manifest.json"


def derive_seed(*keys: int) -> int:
    """Deterministic 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    n_y, n_x = shape
    yy = (np.arange(n_y) - n_y // 2) / (n_y / 2)
    xx = (np.arange(n_x) - n_x // 2) / (n_x / 2)
    return np.meshgrid(yy, xx, indexing="ij")


def _ellipse(yy, xx, cy, cx, ay, ax, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_phantom(shape: tuple[int, int], seed: int) -> np.ndarray:
    """Random ellipse-composite head phantom with a smooth phase.

    Returns a complex128 array with magnitude in [0, 1].
    """
    rng = np.random.default_rng(seed)
    yy, xx = _grid(shape)

    head_ay, head_ax = rng.uniform(0.72, 0.88), rng.uniform(0.55, 0.72)
    angle = rng.uniform(-0.2, 0.2)
    head = _ellipse(yy, xx, 0.0, 0.0, head_ay, head_ax, angle)
    skull_inner = _ellipse(yy, xx, 0.0, 0.0, head_ay * 0.9, head_ax * 0.88, angle)
    magnitude = np.where(head, 0.9, 0.0)
    magnitude = np.where(skull_inner, rng.uniform(0.25, 0.4), magnitude)

    for _ in range(rng.integers(4, 9)):
        r = np.sqrt(rng.uniform(0.0, 0.45))
        theta = rng.uniform(0, 2 * np.pi)
        cy, cx = r * head_ay * np.sin(theta), r * head_ax * np.cos(theta)
        ay, ax = rng.uniform(0.05, 0.25, size=2)
        region = _ellipse(yy, xx, cy, cx, ay, ax, rng.uniform(0, np.pi)) & skull_inner
        magnitude = np.where(region, rng.uniform(0.05, 1.0), magnitude)

    coeffs = rng.uniform(-0.6, 0.6, size=3)
    phase = coeffs[0] * yy + coeffs[1] * xx + coeffs[2] * (yy**2 + xx**2)
    return np.clip(magnitude, 0.0, 1.0) * np.exp(1j * phase)


def simulate_coil_maps(shape: tuple[int, int], n_coils: int, seed: int) -> np.ndarray:
    """Smooth Gaussian-profile coil sensitivities normalized so that sum_k |S_k|^2 = 1.

    Coil centers sit at equally spaced angles on a circle just outside the
    field of view.
    """
    if n_coils < 1:
        raise ValueError(f"n_coils must be >= 1, got {n_coils}.")
    if n_coils == 1:
        return np.ones((1, *shape), dtype=np.complex128)
    rng = np.random.default_rng(seed)
    yy, xx = _grid(shape)
    offset = rng.uniform(0, 2 * np.pi)
    width = rng.uniform(0.7, 0.9)
    maps = []
    for k in range(n_coils):
        theta = offset + 2 * np.pi * k / n_coils
        cy, cx = 1.2 * np.sin(theta), 1.2 * np.cos(theta)
        profile = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        phase = rng.uniform(0, 2 * np.pi) + 0.5 * (np.sin(theta) * yy + np.cos(theta) * xx)
        maps.append(profile * np.exp(1j * phase))
    maps = np.stack(maps)
    return maps / np.sqrt((np.abs(maps) ** 2).sum(0))


@dataclass
class AcquisitionSample:
    """Fully-sampled multi-coil acquisition of a known image."""

    kspace: np.ndarray
    reference: np.ndarray
    maps: Optional[np.ndarray]
    sigma: float


def simulate_acquisition(phantom: np.ndarray, maps: np.ndarray, sigma: float, seed: int) -> AcquisitionSample:
    """Simulate ``y_k = F(S_k x) + e_k`` with circular complex Gaussian noise of std ``sigma``."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}.")
    x = torch.from_numpy(np.asarray(phantom, dtype=np.complex128))
    s = torch.from_numpy(np.asarray(maps, dtype=np.complex128))
    kspace = fft2c(expand(x, s)).numpy()
    if sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(kspace.shape) + 1j * rng.standard_normal(kspace.shape)
        kspace = kspace + sigma / np.sqrt(2) * noise
    reference = rss(ifft2c(torch.from_numpy(kspace))).numpy()
    return AcquisitionSample(kspace=kspace, reference=reference, maps=np.asarray(maps), sigma=float(sigma))


@dataclass
class Volume:
    """A stack of slices with its acquisition metadata."""

    data: np.ndarray
    sigma: float = 0.0
    seed: Optional[int] = None


@dataclass(frozen=True)
class VolumeHeader:
    shape: tuple[int, ...]
    dtype: np.dtype
    sigma: float
    seed: Optional[int]
    payload_offset: int

    @property
    def payload_nbytes(self) -> int:
        return int(np.prod(self.shape)) * self.dtype.itemsize


def write_volume(path: Union[str, Path], volume: Volume) -> None:
    data = np.asarray(volume.data)
    if np.iscomplexobj(data):
        data = data.astype("<c8")
        code = 1
    else:
        data = data.astype("<f4")
        code = 2
    if not 1 <= data.ndim <= 4:
        raise ValueError(f"Volumes must have 1 to 4 dimensions, got {data.ndim}.")
    dims = list(data.shape) + [1] * (4 - data.ndim)
    seed = -1 if volume.seed is None else int(volume.seed)
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, code, data.ndim, *dims, float(volume.sigma), seed)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(data).tobytes())


def read_header(path: Union[str, Path]) -> VolumeHeader:
    """Parse the header of a volume file without touching the payload."""
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(raw)}.")
    magic, version, code, ndim, *rest = _HEADER.unpack(raw)
    dims, sigma, seed = rest[:4], rest[4], rest[5]
    if magic != VOLUME_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {VOLUME_MAGIC!r}.")
    if version != VOLUME_VERSION:
        raise ValueError(f"{path}: unsupported volume version {version} (supported: {VOLUME_VERSION}).")
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}.")
    if not 1 <= ndim <= 4:
        raise ValueError(f"{path}: invalid dimension count {ndim}.")
    return VolumeHeader(tuple(dims[:ndim]), _DTYPES[code], sigma, None if seed == -1 else seed, _HEADER.size)


def read_volume(path: Union[str, Path]) -> Volume:
    header = read_header(path)
    expected = header.payload_offset + header.payload_nbytes
    actual = Path(path).stat().st_size
    if actual != expected:
        raise ValueError(f"{path}: expected {expected} bytes for shape {header.shape}, found {actual}.")
    data = np.fromfile(path, dtype=header.dtype, offset=header.payload_offset).reshape(header.shape)
    return Volume(data=data, sigma=header.sigma, seed=header.seed)


def generate_dataset(
    out_dir: Union[str, Path],
    seed: int,
    shape: tuple[int, int] = (64, 64),
    n_coils: int = 4,
    slices_per_volume: int = 4,
    n_train: int = 4,
    n_val: int = 1,
    n_test: int = 1,
    sigma: float = 0.0,
) -> dict:
    """Simulate volumes, write them to ``out_dir`` and return the manifest.

    Volumes are assigned to splits by a seeded shuffle of their indices.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_volumes = n_train + n_val + n_test
    order = np.random.default_rng(derive_seed(seed, 0)).permutation(n_volumes)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    entries = []
    for position, index in enumerate(order):
        index = int(index)
        maps = simulate_coil_maps(shape, n_coils, derive_seed(seed, 1, index))
        slices = []
        for s in range(slices_per_volume):
            phantom = generate_phantom(shape, derive_seed(seed, 2, index, s))
            slices.append(simulate_acquisition(phantom, maps, sigma, derive_seed(seed, 3, index, s)).kspace)
        name = f"volume_{index:03d}.kspv"
        write_volume(out_dir / name, Volume(np.stack(slices), sigma=sigma, seed=derive_seed(seed, 1, index)))
        entries.append(
            {"path": name, "split": splits[position], "slices": slices_per_volume, "coils": n_coils, "shape": list(shape)}
        )
        logger.info("Wrote %s (%s).", name, splits[position])

    entries.sort(key=lambda e: e["path"])
    manifest = {
        "version": 1,
        "seed": seed,
        "sigma": sigma,
        "volumes": entries,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return manifest


def load_manifest(path: Union[str, Path]) -> tuple[dict, Path]:
    """Load a manifest file (or the manifest inside a directory). Returns the manifest and its root dir."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return json.loads(path.read_text()), path.parent


class SliceDataset:
    """Slices of all volumes of one split, in manifest order.

    Items are ``(kspace, reference, slice_id)`` with complex64 k-space
    ``[n_c, n_y, n_x]`` and the fully-sampled RSS reference ``[n_y, n_x]``.
    """

    def __init__(self, manifest_path: Union[str, Path], split: str):
        manifest, root = load_manifest(manifest_path)
        self.split = split
        self.kspace: list[torch.Tensor] = []
        self.slice_ids: list[str] = []
        self.volume_names: list[str] = []
        for entry in manifest["volumes"]:
            if entry["split"] != split:
                continue
            volume = read_volume(root / entry["path"])
            self.volume_names.append(entry["path"])
            for s, kspace in enumerate(volume.data):
                self.kspace.append(torch.from_numpy(np.ascontiguousarray(kspace)).to(torch.complex64))
                self.slice_ids.append(f"{entry['path']}:{s}")
        self.references = [rss(ifft2c(k)) for k in self.kspace]

    def __len__(self) -> int:
        return len(self.kspace)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor, str]:
        return self.kspace[index], self.references[index], self.slice_ids[index]
