"""Reconstruction quality metrics and dataset-level evaluation reports."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
import torch

from .data import derive_seed
from .operators import apply_mask, ifft2c, rss
from .sampling import SamplingMask, build_mask
from .training import ssim as _ssim

__all__ = [
    "EvaluationReport",
    "Reconstructor",
    "evaluate_dataset",
    "model_reconstructor",
    "nmse",
    "psnr",
    "ssim",
    "zero_filled_recon",
    "zero_filled_reconstructor",
]

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

# Reconstructor signature: (masked kspace [n_c, n_y, n_x], mask) -> real image [n_y, n_x]
Reconstructor = Callable[[torch.Tensor, SamplingMask], np.ndarray]


def _as_float64(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(reference: ArrayLike, prediction: ArrayLike) -> float:
    """Peak signal-to-noise ratio in dB with the reference maximum as peak; ``inf`` for identical images."""
    reference, prediction = _as_float64(reference), _as_float64(prediction)
    mse = np.mean((reference - prediction) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(reference.max() ** 2 / mse))


def nmse(reference: ArrayLike, prediction: ArrayLike) -> float:
    """Squared error normalized by the squared norm of the reference."""
    reference, prediction = _as_float64(reference), _as_float64(prediction)
    return float(np.sum((prediction - reference) ** 2) / np.sum(reference**2))


def ssim(reference: ArrayLike, prediction: ArrayLike, data_range: Optional[float] = None) -> float:
    """SSIM in double precision; ``data_range`` defaults to the reference maximum."""
    reference, prediction = _as_float64(reference), _as_float64(prediction)
    if data_range is None:
        data_range = float(reference.max())
    return float(_ssim(torch.from_numpy(reference), torch.from_numpy(prediction), data_range))


def zero_filled_recon(masked_kspace: torch.Tensor) -> torch.Tensor:
    """Root-sum-of-squares of the inverse Fourier transform of sub-sampled k-space."""
    return rss(ifft2c(masked_kspace))


def zero_filled_reconstructor(masked_kspace: torch.Tensor, mask: SamplingMask) -> np.ndarray:
    return zero_filled_recon(masked_kspace).numpy()


def model_reconstructor(model) -> Reconstructor:
    """Wrap a :class:`~recvarnet.model.RecurrentVarNet` as a reconstructor."""
    model.eval()
    dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def reconstruct(masked_kspace: torch.Tensor, mask: SamplingMask) -> np.ndarray:
        complex_dtype = torch.complex128 if dtype == torch.float64 else torch.complex64
        _, image = model(masked_kspace.to(complex_dtype), mask.mask_tensor(dtype), mask.acs_tensor(dtype))
        return image.numpy()

    return reconstruct


@dataclass
class EvaluationReport:
    """Per-slice metrics, per-volume averages and one summary row per acceleration."""

    method: str
    slices: list = field(default_factory=list)
    volumes: list = field(default_factory=list)
    summary: list = field(default_factory=list)

    def summary_for(self, acceleration: float) -> dict:
        for row in self.summary:
            if row["acceleration"] == acceleration:
                return row
        raise KeyError(acceleration)

    def to_records(self) -> list[dict]:
        return (
            [{"record": "volume", "method": self.method, **v} for v in self.volumes]
            + [{"record": "summary", "method": self.method, **s} for s in self.summary]
        )

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, default=_json_default) for r in self.to_records()) + "\n"

    def to_table(self) -> str:
        lines = [f"{'R':>6}  {'method':<14}{'SSIM':>9}{'pSNR':>9}{'NMSE':>9}{'slices':>8}"]
        for row in self.summary:
            lines.append(
                f"{row['acceleration']:>6g}  {self.method:<14}{row['ssim']:>9.4f}{row['psnr']:>9.2f}"
                f"{row['nmse']:>9.4f}{row['n_slices']:>8d}"
            )
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Union[str, Path], stem: Optional[str] = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"report_{self.method}"
        jsonl, table = out_dir / f"{stem}.jsonl", out_dir / f"{stem}.txt"
        jsonl.write_text(self.to_jsonl())
        table.write_text(self.to_table())
        return jsonl, table


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"Cannot serialize {type(value)}")


def _finite_mean(values: Sequence[float]) -> float:
    # psnr is +inf for exact reconstructions; the mean is then +inf as well
    return float(np.mean(values)) if len(values) else float("nan")


def evaluate_dataset(
    volumes: Iterable[tuple[str, Optional[np.ndarray]]],
    reconstructor: Reconstructor,
    accelerations: Sequence[float],
    method: str = "model",
    mask_type: str = "variable-density",
    seed: int = 0,
    acs_fraction: Optional[float] = None,
    center_radius: float = 0.12,
    on_slice: Optional[Callable[[dict, np.ndarray, np.ndarray, np.ndarray], None]] = None,
) -> EvaluationReport:
    """Evaluate a reconstructor against fully-sampled RSS references.

    Parameters
    ----------
    volumes : iterable of (name, kspace)
        Fully-sampled k-space ``[n_slices, n_c, n_y, n_x]`` per volume. A ``None``
        k-space records an error entry for that volume and evaluation continues.
    reconstructor : callable
        ``(masked_kspace, mask) -> image``.
    accelerations : sequence of float
        Acceleration factors to evaluate.
    method : str
        Label used in the report.
    mask_type, seed, acs_fraction, center_radius
        Mask generation settings. The mask of slice ``s`` of the ``v``-th volume at
        acceleration ``R`` is seeded with ``derive_seed(seed, v, s, R)``.
    on_slice : callable, optional
        Called as ``on_slice(record, reference, zero_filled, prediction)`` per slice.

    Returns
    -------
    EvaluationReport
    """
    report = EvaluationReport(method=method)
    for v, (name, kspace) in enumerate(volumes):
        if kspace is None:
            report.volumes.append({"volume": name, "error": "missing reference data"})
            logger.warning("Skipping %s: missing reference data.", name)
            continue
        kspace = torch.from_numpy(np.ascontiguousarray(kspace))
        for acceleration in accelerations:
            rows = []
            for s, slice_kspace in enumerate(kspace):
                reference = rss(ifft2c(slice_kspace)).numpy()
                mask = build_mask(
                    mask_type,
                    tuple(slice_kspace.shape[-2:]),
                    acceleration,
                    derive_seed(seed, v, s, int(acceleration)),
                    acs_fraction,
                    center_radius,
                )
                masked = apply_mask(slice_kspace, mask.mask_tensor(slice_kspace.real.dtype))
                prediction = np.asarray(reconstructor(masked, mask), dtype=np.float64)
                record = {
                    "volume": name,
                    "slice": s,
                    "acceleration": acceleration,
                    "ssim": ssim(reference, prediction),
                    "psnr": psnr(reference, prediction),
                    "nmse": nmse(reference, prediction),
                }
                rows.append(record)
                if on_slice is not None:
                    on_slice(record, reference, zero_filled_recon(masked).numpy(), prediction)
            report.slices.extend(rows)
            report.volumes.append(
                {
                    "volume": name,
                    "acceleration": acceleration,
                    "n_slices": len(rows),
                    **{m: _finite_mean([r[m] for r in rows]) for m in ("ssim", "psnr", "nmse")},
                }
            )

    for acceleration in accelerations:
        rows = [r for r in report.slices if r["acceleration"] == acceleration]
        report.summary.append(
            {
                "acceleration": acceleration,
                "n_slices": len(rows),
                **{m: _finite_mean([r[m] for r in rows]) for m in ("ssim", "psnr", "nmse")},
            }
        )
    return report
