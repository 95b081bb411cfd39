"""Region-growing baselines on intensity or probability volumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .evaluate import CenterlineSet, Chain
from .volume import Volume3D


class SeedPredicateFailed(Exception):
    """The seed voxel does not satisfy the threshold predicate."""


@dataclass(frozen=True)
class RegionGrowResult:
    """Connected mask grown from the seed, plus a coarse leakage flag."""

    mask: np.ndarray  # bool, indexed [z, y, x] like Volume3D.data
    voxel_count: int
    leaked: bool


def region_grow(vol: Volume3D, seed_index, threshold: float,
                polarity: str = "above",
                leak_ceiling: int | None = None) -> RegionGrowResult:
    """6-connected flood fill of voxels passing the threshold predicate.

    ``seed_index`` is an (i, j, k) = (x, y, z) voxel index. ``polarity``
    selects values strictly comparison-inclusive: 'above' keeps values >=
    threshold (probability images), 'below' keeps values <= threshold
    (intensity images where the structure is dark). ``leaked`` is set when
    the grown mask exceeds ``leak_ceiling`` voxels; it is reporting only.
    """
    if polarity not in ("above", "below"):
        raise ValueError(f"polarity must be 'above' or 'below', got {polarity!r}")
    i, j, k = (int(v) for v in seed_index)
    nx, ny, nz = vol.dims
    if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
        raise SeedPredicateFailed(f"seed index {(i, j, k)} outside the volume")
    predicate = vol.data >= threshold if polarity == "above" else vol.data <= threshold
    if not predicate[k, j, i]:
        raise SeedPredicateFailed(
            f"seed value {vol.data[k, j, i]:g} fails threshold {threshold:g} ({polarity})"
        )
    structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
    labels, _ = ndimage.label(predicate, structure=structure)
    mask = labels == labels[k, j, i]
    count = int(mask.sum())
    leaked = leak_ceiling is not None and count > leak_ceiling
    return RegionGrowResult(mask=mask, voxel_count=count, leaked=leaked)


def mask_to_volume(vol: Volume3D, mask: np.ndarray) -> Volume3D:
    """Binary mask as a volume aligned with ``vol`` (for MetaImage export)."""
    return Volume3D(dims=vol.dims, spacing=vol.spacing, origin=vol.origin,
                    data=mask.astype(np.float64).ravel(), element_type="MET_SHORT")


def mask_centerline(vol: Volume3D, mask: np.ndarray) -> CenterlineSet:
    """Skeletonize a mask and return its voxel skeleton as world points.

    The skeleton is an unordered point cloud (single chain, scan order),
    which is all the bidirectional distance measure needs to compare a
    grown region against reference centerlines.
    """
    skel = skeletonize(mask.astype(bool))
    zz, yy, xx = np.nonzero(skel)
    if xx.size == 0:
        # degenerate masks (a few voxels) skeletonize to nothing; fall back
        # to the mask voxels themselves
        zz, yy, xx = np.nonzero(mask)
    if xx.size == 0:
        raise ValueError("cannot extract a centerline from an empty mask")
    voxels = np.stack([xx, yy, zz], axis=1).astype(float)
    points = vol.voxel_to_world(voxels)
    return CenterlineSet(chains=[Chain(points=points)])
