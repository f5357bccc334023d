"""Calcification candidates: HU thresholding, componentization, mask filters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GridMismatchError
from .morphology import connected_components, dilate_ball
from .volume import ElementKind, Grid3, Volume, assert_same_grid, grids_compatible

CALCIUM_THRESHOLD_HU = 130.0


@dataclass
class Lesion:
    """One connected calcification candidate with its per-voxel indices and stats."""

    id: int
    grid: Grid3
    voxels: np.ndarray          # (k, 3) int voxel indices
    volume_mm3: float
    max_hu: float
    mean_hu: float
    centroid_world: np.ndarray  # (3,) mm

    @property
    def voxel_count(self) -> int:
        return int(self.voxels.shape[0])

    def world_points(self) -> np.ndarray:
        return self.grid.voxel_to_world(self.voxels)


def threshold_calcium(image: Volume, threshold_hu: float = CALCIUM_THRESHOLD_HU) -> Volume:
    """Binary mask of voxels with HU >= threshold (inclusive)."""
    mask = (image.data >= threshold_hu).astype(np.uint8)
    return Volume(image.grid, ElementKind.MASK, mask)


def _lesion_from_voxels(lesion_id: int, grid: Grid3, voxels: np.ndarray, image_data: np.ndarray) -> Lesion:
    hu = image_data[tuple(voxels.T)].astype(np.float64)
    world = grid.voxel_to_world(voxels)
    return Lesion(
        id=lesion_id,
        grid=grid,
        voxels=voxels,
        volume_mm3=float(voxels.shape[0] * grid.voxel_volume_mm3),
        max_hu=float(hu.max()),
        mean_hu=float(hu.mean()),
        centroid_world=world.mean(axis=0),
    )


def extract_lesions(candidate_mask: Volume, image: Volume, connectivity: int = 26) -> list[Lesion]:
    """One Lesion per connected component of the candidate mask, in scan order."""
    assert_same_grid(candidate_mask, image)
    comps = connected_components(candidate_mask, connectivity)
    lesions: list[Lesion] = []
    if comps.count == 0:
        return lesions
    slices = ndimage.find_objects(comps.labels)
    for lab in range(1, comps.count + 1):
        box = slices[lab - 1]
        local = np.argwhere(comps.labels[box] == lab)
        voxels = local + np.array([s.start for s in box])
        lesions.append(_lesion_from_voxels(lab, candidate_mask.grid, voxels, image.data))
    return lesions


def _filter_by_region(lesions: list[Lesion], region: Volume) -> list[Lesion]:
    # Whole-object rule: a lesion is kept intact iff >= 1 voxel lies in the region.
    region_mask = region.bool_mask()
    kept = []
    for lesion in lesions:
        bad = grids_compatible(lesion.grid, region.grid)
        if bad is not None:
            raise GridMismatchError(f"lesion grid differs from mask grid in {bad}", field=bad)
        if region_mask[tuple(lesion.voxels.T)].any():
            kept.append(lesion)
    return kept


def filter_by_pericardium(lesions: list[Lesion], pericardium: Volume,
                          dilation_mm: float = 1.0) -> list[Lesion]:
    """Keep lesions with at least one voxel inside the dilated pericardium."""
    region = dilate_ball(pericardium, dilation_mm)
    return _filter_by_region(lesions, region)


def filter_by_vessel_proximity(lesions: list[Lesion], vessels: Volume,
                               dilation_mm: float = 3.0) -> list[Lesion]:
    """Keep lesions intersecting the coronary mask dilated by dilation_mm."""
    region = dilate_ball(vessels, dilation_mm)
    return _filter_by_region(lesions, region)


def filter_mask_by_pericardium(mask: Volume, pericardium: Volume,
                               dilation_mm: float = 1.0, connectivity: int = 26) -> Volume:
    """Whole-object pericardium filter applied to a binary mask (used for the CA mask)."""
    assert_same_grid(mask, pericardium)
    region = dilate_ball(pericardium, dilation_mm).bool_mask()
    comps = connected_components(mask, connectivity)
    out = np.zeros(mask.grid.dims, dtype=np.uint8)
    for lab in range(1, comps.count + 1):
        comp = comps.labels == lab
        if region[comp].any():
            out[comp] = 1
    return Volume(mask.grid, ElementKind.MASK, out)
