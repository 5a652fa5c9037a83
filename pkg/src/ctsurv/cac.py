"""Agatston coronary artery calcium scoring.

Lesions are 8-connected components of ``HU >= 130`` voxels inside the
artery mask, found independently on every axial slice. Components below
1 mm^2 are dropped; each remaining lesion scores ``area_mm2 * weight``
where the weight comes from its peak HU. No slice-thickness rescaling is
applied.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .dataio import Mask, Volume, check_grid

HU_THRESHOLD = 130.0
MIN_AREA_MM2 = 1.0
_EIGHT = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class LesionComponent:
    slice_index: int
    voxel_count: int
    area_mm2: float
    peak_hu: float
    weight: int
    score: float


@dataclass
class CacReport:
    lesions: list[LesionComponent] = field(default_factory=list)
    total_score: float = 0.0

    def to_dict(self):
        return {
            "total_score": self.total_score,
            "lesions": [asdict(l) for l in self.lesions],
        }


def density_weight(peak_hu: float) -> int:
    """1 for 130-199, 2 for 200-299, 3 for 300-399, 4 for >= 400 HU."""
    if not peak_hu >= HU_THRESHOLD:
        raise ValueError(f"peak {peak_hu} HU is below {HU_THRESHOLD}")
    if peak_hu >= 400:
        return 4
    if peak_hu >= 300:
        return 3
    if peak_hu >= 200:
        return 2
    return 1


def candidate_mask(volume: Volume, artery_mask: Mask) -> Mask:
    check_grid(volume, artery_mask)
    cand = np.asarray(artery_mask.data, dtype=bool) & (volume.data >= HU_THRESHOLD)
    return Mask(cand, volume.spacing)


def label_components_2d(mask_slice) -> tuple[np.ndarray, int]:
    """8-connected labels numbered in raster order of each component's first voxel."""
    m = np.asarray(mask_slice, dtype=bool)
    labels, n = ndimage.label(m, structure=_EIGHT)
    if n == 0:
        return labels, 0
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    # first raster index of every label, then renumber by it
    first = np.full(n + 1, flat.size)
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:], kind="stable") + 1
    remap = np.zeros(n + 1, dtype=labels.dtype)
    remap[order] = np.arange(1, n + 1)
    return remap[labels], n


def _score_slice(z, hu_slice, cand_slice, pixel_area):
    labels, n = label_components_2d(cand_slice)
    out = []
    if n == 0:
        return out
    idx = np.arange(1, n + 1)
    counts = ndimage.sum_labels(np.ones_like(labels), labels, idx)
    peaks = ndimage.maximum(hu_slice, labels, idx)
    for count, peak in zip(counts, peaks):
        area = int(count) * pixel_area
        if area < MIN_AREA_MM2:
            continue
        w = density_weight(float(peak))
        out.append(LesionComponent(int(z), int(count), area, float(peak), w, area * w))
    return out


def agatston(volume: Volume, artery_mask: Mask) -> CacReport:
    cand = candidate_mask(volume, artery_mask).data
    sx, sy, _ = volume.spacing
    pixel_area = sx * sy
    lesions = []
    for z in range(volume.data.shape[0]):
        if cand[z].any():
            lesions.extend(_score_slice(z, volume.data[z], cand[z], pixel_area))
    total = math.fsum(l.score for l in lesions)
    return CacReport(lesions, total)
