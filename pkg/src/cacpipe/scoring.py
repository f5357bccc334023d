"""Agatston, volume, and mass scores per coronary territory, plus CVD risk bins."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import (CORONARY_CODES, ElementKind, Grid3, TerritoryCode, Volume,
                     assert_same_grid)

# Classic Agatston constants; the slice factor sz/3 reduces to 1 at 3 mm slices.
DEFAULT_MIN_ISLAND_AREA_MM2 = 1.0
DEFAULT_MASS_CALIBRATION = 0.001  # mg / (mm^3 * HU)

_STRUCTURE_8 = np.ones((3, 3), dtype=bool)


def hu_density_weight(max_hu: float) -> int:
    """Agatston density factor from an island's peak HU (130/200/300/400 bins)."""
    if max_hu < 130:
        return 0
    if max_hu < 200:
        return 1
    if max_hu < 300:
        return 2
    if max_hu < 400:
        return 3
    return 4


def _territory_codes_present(labels: np.ndarray):
    present = np.unique(labels)
    return [TerritoryCode(c) for c in present if c in set(int(t) for t in CORONARY_CODES)]


def agatston_score(labels: Volume, image: Volume, *,
                   min_island_area_mm2: float = DEFAULT_MIN_ISLAND_AREA_MM2,
                   slice_correction: bool = True) -> dict:
    """Per-territory Agatston score in AU.

    Per axial slice and territory, 8-connected 2D islands are weighted by
    area * density factor; islands below the minimum area are skipped. With
    slice correction the contribution scales by slice thickness / 3 mm.
    """
    assert_same_grid(labels, image)
    sx, sy, sz = labels.grid.spacing
    pixel_area = sx * sy
    factor = (sz / 3.0) if slice_correction else 1.0

    scores = {code: 0.0 for code in CORONARY_CODES}
    lab = labels.data
    img = image.data
    nz = labels.grid.dims[2]
    for z in range(nz):
        slab = lab[:, :, z]
        if not slab.any():
            continue
        for code in _territory_codes_present(slab):
            plane = slab == int(code)
            islands, count = ndimage.label(plane, structure=_STRUCTURE_8)
            for isl in range(1, count + 1):
                sel = islands == isl
                area = float(np.count_nonzero(sel)) * pixel_area
                if area < min_island_area_mm2:
                    continue
                weight = hu_density_weight(float(img[:, :, z][sel].max()))
                scores[code] += area * weight * factor
    return scores


def volume_score(labels: Volume, grid: Grid3 | None = None) -> dict:
    """Per-territory calcified volume in mm^3 (voxel count times voxel volume)."""
    g = grid if grid is not None else labels.grid
    voxvol = g.voxel_volume_mm3
    counts = np.bincount(labels.data.ravel(), minlength=int(max(TerritoryCode)) + 1)
    return {code: float(counts[int(code)]) * voxvol for code in CORONARY_CODES}


def mass_score(labels: Volume, image: Volume,
               calibration: float = DEFAULT_MASS_CALIBRATION) -> dict:
    """Per-territory calcium mass in mg: sum of HU * voxel volume * calibration."""
    assert_same_grid(labels, image)
    voxvol = labels.grid.voxel_volume_mm3
    out = {}
    for code in CORONARY_CODES:
        sel = labels.data == int(code)
        hu_sum = float(image.data[sel].astype(np.float64).sum()) if sel.any() else 0.0
        out[code] = hu_sum * voxvol * calibration
    return out


def risk_category(total_agatston: float, scheme: str = "five") -> int:
    """CVD risk category from the total Agatston score.

    five:  [0,1) -> 1, [1,10] -> 2, (10,100] -> 3, (100,400] -> 4, >400 -> 5
    four:  0 -> 1, (0,100] -> 2, (100,400] -> 3, >400 -> 4
    """
    s = float(total_agatston)
    if s < 0:
        raise ValueError(f"score must be >= 0, got {s}")
    if scheme == "five":
        if s < 1:
            return 1
        if s <= 10:
            return 2
        if s <= 100:
            return 3
        if s <= 400:
            return 4
        return 5
    if scheme == "four":
        if s == 0:
            return 1
        if s <= 100:
            return 2
        if s <= 400:
            return 3
        return 4
    raise ValueError(f"scheme must be 'five' or 'four', got {scheme!r}")


@dataclass
class TerritoryScores:
    agatston: float = 0.0
    volume_mm3: float = 0.0
    mass_mg: float = 0.0
    lesion_count: int = 0

    def as_dict(self) -> dict:
        return {"agatston": self.agatston, "volume_mm3": self.volume_mm3,
                "mass_mg": self.mass_mg, "lesion_count": self.lesion_count}


@dataclass
class ScoreReport:
    per_territory: dict = field(default_factory=dict)  # TerritoryCode -> TerritoryScores
    total: TerritoryScores = field(default_factory=TerritoryScores)
    risk5: int = 1
    risk4: int = 1
    lesions: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "total": self.total.as_dict(),
            "per_territory": {code.name: ts.as_dict() for code, ts in self.per_territory.items()},
            "risk5": self.risk5,
            "risk4": self.risk4,
            "lesions": self.lesions,
        }


def compile_report(labels: Volume, image: Volume, lesion_assignments, *,
                   min_island_area_mm2: float = DEFAULT_MIN_ISLAND_AREA_MM2,
                   slice_correction: bool = True,
                   calibration: float = DEFAULT_MASS_CALIBRATION) -> ScoreReport:
    """Assemble the full report from a territory label map and per-lesion assignments.

    `lesion_assignments` is a sequence of (Lesion, per-voxel code array) pairs
    for the coronary lesions; it feeds the per-lesion detail records and the
    per-territory lesion counts.
    """
    ag = agatston_score(labels, image, min_island_area_mm2=min_island_area_mm2,
                        slice_correction=slice_correction)
    vol = volume_score(labels)
    mass = mass_score(labels, image, calibration=calibration)

    report = ScoreReport()
    for code in CORONARY_CODES:
        report.per_territory[code] = TerritoryScores(
            agatston=ag[code], volume_mm3=vol[code], mass_mg=mass[code])

    for lesion, codes in lesion_assignments:
        territories = {}
        for code in CORONARY_CODES:
            n = int(np.count_nonzero(codes == int(code)))
            if n:
                territories[code.name] = n
                report.per_territory[code].lesion_count += 1
        report.lesions.append({
            "id": lesion.id,
            "territories": territories,
            "centroid_world": [float(v) for v in lesion.centroid_world],
            "volume_mm3": lesion.volume_mm3,
            "max_hu": lesion.max_hu,
            "agatston": _lesion_agatston(lesion, codes, image,
                                         min_island_area_mm2=min_island_area_mm2,
                                         slice_correction=slice_correction),
        })

    report.total = TerritoryScores(
        agatston=sum(ts.agatston for ts in report.per_territory.values()),
        volume_mm3=sum(ts.volume_mm3 for ts in report.per_territory.values()),
        mass_mg=sum(ts.mass_mg for ts in report.per_territory.values()),
        lesion_count=sum(ts.lesion_count for ts in report.per_territory.values()),
    )
    report.risk5 = risk_category(report.total.agatston, "five")
    report.risk4 = risk_category(report.total.agatston, "four")
    return report


def _lesion_agatston(lesion, codes, image, *, min_island_area_mm2, slice_correction):
    # Score the lesion in isolation: islands restricted to its own voxels.
    lo = lesion.voxels.min(axis=0)
    hi = lesion.voxels.max(axis=0) + 1
    dims = tuple(int(h - l) for l, h in zip(lo, hi))
    sub = np.zeros(dims, dtype=np.uint8)
    local = lesion.voxels - lo
    sub[tuple(local.T)] = codes
    grid = Grid3(dims, lesion.grid.spacing,
                 tuple(lesion.grid.voxel_to_world(lo)))
    img_sub = image.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].copy()
    out = agatston_score(Volume(grid, ElementKind.LABEL, sub),
                         Volume(grid, image.kind, img_sub),
                         min_island_area_mm2=min_island_area_mm2,
                         slice_correction=slice_correction)
    return float(sum(out.values()))
