"""Reconstruction-kernel normalization of CT volumes.

A volume is split into difference-of-Gaussian bands

    F1 = L0 - L1, F2 = L1 - L2, ..., F5 = L4 - L5, F6 = L5

where ``Lk`` is the volume smoothed at ``SIGMAS[k]`` (voxel units, so the
reference and the input must live on the same resampled grid). The bands
telescope back to the input. Normalization rescales bands 1-5 so that
their standard deviation inside a region mask matches a reference, and
repeats until every band is within 5% of its target.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataio import Mask, Volume, check_grid

SIGMAS = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0)
N_BANDS = len(SIGMAS)
LAMBDA_RANGE = (0.95, 1.05)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ``ceil(4 sigma)``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth_array(data: np.ndarray, sigma: float) -> np.ndarray:
    out = np.asarray(data, dtype=float)
    if sigma == 0:
        return out.copy()
    k = gaussian_kernel(sigma)
    for axis in range(out.ndim):
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return out


def gaussian_smooth(volume: Volume, sigma: float) -> Volume:
    """Separable Gaussian smoothing with edge replication; sigma in voxels."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return Volume(np.asarray(volume.data).copy(), volume.spacing)
    return Volume(_smooth_array(volume.data, sigma), volume.spacing)


@dataclass(frozen=True)
class BandDecomposition:
    bands: tuple[np.ndarray, ...]
    sigmas: tuple[float, ...] = SIGMAS
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def reconstruct(self, lambdas=None) -> np.ndarray:
        """``F6 + sum(lambda_i * F_i)``; ``lambdas=None`` means all ones."""
        lam = np.ones(N_BANDS - 1) if lambdas is None else np.asarray(lambdas, float)
        out = self.bands[-1].copy()
        for li, band in zip(lam, self.bands[:-1]):
            out += li * band
        return out


def _decompose_array(data, spacing=(1.0, 1.0, 1.0)) -> BandDecomposition:
    levels = [_smooth_array(data, s) for s in SIGMAS]
    bands = [levels[i - 1] - levels[i] for i in range(1, N_BANDS)]
    bands.append(levels[-1])
    return BandDecomposition(tuple(bands), SIGMAS, spacing)


def decompose(volume: Volume) -> BandDecomposition:
    return _decompose_array(volume.data, volume.spacing)


@dataclass(frozen=True)
class RknReference:
    """Target standard deviations of bands 1-5."""

    band_sds: tuple[float, ...]

    def __post_init__(self):
        sds = tuple(float(s) for s in self.band_sds)
        if len(sds) != N_BANDS - 1:
            raise ValueError(f"need {N_BANDS - 1} band SDs, got {len(sds)}")
        if any(not np.isfinite(s) or s < 0 for s in sds):
            raise ValueError("band SDs must be finite and >= 0")
        object.__setattr__(self, "band_sds", sds)

    def to_json(self) -> str:
        return json.dumps({"band_sds": list(self.band_sds)})

    @classmethod
    def from_json(cls, text: str) -> "RknReference":
        return cls(tuple(json.loads(text)["band_sds"]))


def _masked_sds(decomp: BandDecomposition, m: np.ndarray) -> np.ndarray:
    return np.array([band[m].std(ddof=0) for band in decomp.bands[:-1]])


def band_sds(decomp: BandDecomposition, mask: Mask) -> RknReference:
    """Population SD of bands 1-5 over the mask voxels."""
    m = np.asarray(mask.data, dtype=bool)
    if m.shape != decomp.bands[0].shape:
        raise ValueError("mask does not match decomposition grid")
    if not m.any():
        raise ValueError("empty mask")
    return RknReference(tuple(_masked_sds(decomp, m)))


def reference_from_image(volume: Volume, mask: Mask) -> RknReference:
    check_grid(volume, mask)
    return band_sds(decompose(volume), mask)


@dataclass(frozen=True)
class RknResult:
    volume: Volume
    iterations: int
    lambdas: np.ndarray
    converged: bool


def _in_range(x):
    lo, hi = LAMBDA_RANGE
    return bool(np.all((x >= lo) & (x <= hi)))


def rkn_normalize(volume: Volume, reference: RknReference, mask: Mask, max_iters: int = 10) -> RknResult:
    """Iteratively match band energies inside ``mask`` to ``reference``.

    Each iteration decomposes the current image, sets
    ``lambda_i = r_i / e_i`` (1 when ``e_i == 0``) and stops if every
    ``lambda_i`` and every ``e_i / r_i`` lies in [0.95, 1.05]; otherwise the
    image is rebuilt as ``F6 + sum(lambda_i F_i)`` over the whole grid.
    Requiring the reciprocal too keeps the output band SDs themselves
    inside [0.95, 1.05] times the reference.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    check_grid(volume, mask)
    m = np.asarray(mask.data, dtype=bool)
    if not m.any():
        raise ValueError("empty mask")
    r = np.asarray(reference.band_sds, dtype=float)
    current = np.asarray(volume.data, dtype=float)
    lam = np.ones(N_BANDS - 1)
    for it in range(1, max_iters + 1):
        decomp = _decompose_array(current, volume.spacing)
        e = _masked_sds(decomp, m)
        flat = e == 0
        lam = np.where(flat, 1.0, r / np.where(flat, 1.0, e))
        ratio = np.where(flat | (r == 0), 1.0, e / np.where(r == 0, 1.0, r))
        if _in_range(lam) and _in_range(ratio):
            out = volume.data if it == 1 else current
            return RknResult(Volume(out, volume.spacing), it, lam, True)
        current = decomp.reconstruct(lam)
    return RknResult(Volume(current, volume.spacing), max_iters, lam, False)
