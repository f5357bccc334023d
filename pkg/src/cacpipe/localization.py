"""Aortic valve center and coronary ostia: file injection plus a geometric fallback.

In deployment the three points come from an upstream localizer through
ostia.json; the geometric estimators below stand in when oracle-quality masks
are available (phantoms, curated studies).
"""

from __future__ import annotations

import json
import math
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMaskError, OstiaFileError, SingleOstiumError
from .morphology import connected_components, edt, neighbor_counts, skeletonize_3d
from .volume import Volume

SANITY_RADIUS_MM = 40.0
_FIELDS = ("valve_center", "left_ostium", "right_ostium")


@dataclass
class OstiaPoints:
    valve_center: np.ndarray
    left_ostium: np.ndarray
    right_ostium: np.ndarray
    source: str  # "external" | "geometric"

    def __post_init__(self):
        for name in _FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.array_equal(self.left_ostium, self.right_ostium):
            raise SingleOstiumError("left and right ostium coincide")


def _check_sanity(points: OstiaPoints, bound_mm: float = SANITY_RADIUS_MM) -> None:
    for name in ("left_ostium", "right_ostium"):
        d = float(np.linalg.norm(getattr(points, name) - points.valve_center))
        if d > bound_mm:
            warnings.warn(f"{name} is {d:.1f} mm from the valve center (> {bound_mm} mm)")


def load_ostia(path) -> OstiaPoints:
    """Read ostia.json; sanity-bound violations warn rather than fail."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise OstiaFileError(f"malformed JSON in {path}: {exc}") from exc
    coords = {}
    for name in _FIELDS:
        if name not in payload:
            raise OstiaFileError(f"missing field {name!r}", field=name)
        value = payload[name]
        if not (isinstance(value, (list, tuple)) and len(value) == 3):
            raise OstiaFileError(f"field {name!r} must be an array of 3 reals", field=name)
        coords[name] = np.asarray(value, dtype=np.float64)
    points = OstiaPoints(source="external", **coords)
    _check_sanity(points)
    return points


def save_ostia(points: OstiaPoints, path) -> None:
    payload = {name: [float(v) for v in getattr(points, name)] for name in _FIELDS}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _scan_order_key(voxel) -> tuple:
    x, y, z = (int(v) for v in voxel)
    return (z, y, x)  # x-fastest scan


def estimate_valve_center(aorta: Volume, probe_mm: float = 5.0) -> np.ndarray:
    """Aortic-root end of the aorta skeleton.

    Of all skeleton endpoints, returns the one whose surrounding cross-section
    (mean interior distance over the skeleton within probe_mm of the endpoint)
    is largest; the root end wins because the root is the widest part. Ties go
    to the lower z, then lexicographic (x, y, z).
    """
    if not aorta.data.any():
        raise EmptyMaskError("aorta mask is empty")
    grid = aorta.grid
    spacing = np.asarray(grid.spacing)
    skel = skeletonize_3d(aorta).bool_mask()
    interior = edt(aorta, to="background").data

    counts = neighbor_counts(skel)
    endpoints = np.argwhere(skel & (counts == 1))
    if len(endpoints) == 0:
        # Degenerate skeleton (single voxel or pure ring): widest voxel wins.
        voxels = np.argwhere(skel)
        depth = interior[tuple(voxels.T)]
        cand = voxels[depth == depth.max()]
        best = min(cand, key=_scan_order_key)
        return grid.voxel_to_world(best)

    vox = np.argwhere(skel)
    index = {tuple(v): i for i, v in enumerate(vox)}
    offsets = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                        for dz in (-1, 0, 1) if (dx, dy, dz) != (0, 0, 0)])

    def mean_depth_near(endpoint) -> float:
        # Geodesic walk along the skeleton, accumulating world path length.
        # fsum keeps the mean independent of traversal order, so symmetric
        # tube ends tie exactly.
        start = tuple(endpoint)
        dist = {start: 0.0}
        queue = deque([start])
        depths = []
        while queue:
            cur = queue.popleft()
            depths.append(float(interior[cur]))
            for off in offsets:
                nxt = tuple(np.asarray(cur) + off)
                if nxt in index and nxt not in dist:
                    step = float(np.linalg.norm(off * spacing))
                    d = dist[cur] + step
                    if d <= probe_mm:
                        dist[nxt] = d
                        queue.append(nxt)
        return math.fsum(sorted(depths)) / len(depths)

    scored = [(-mean_depth_near(ep), int(ep[2]), int(ep[0]), int(ep[1]), ep) for ep in endpoints]
    scored.sort(key=lambda item: item[:4])
    return grid.voxel_to_world(scored[0][4])


def _aorta_surface_voxels(aorta: Volume) -> np.ndarray:
    from scipy import ndimage
    binary = aorta.bool_mask()
    core = ndimage.binary_erosion(binary, structure=ndimage.generate_binary_structure(3, 1))
    return np.argwhere(binary & ~core)


def _local_axis(aorta: Volume, valve: np.ndarray, radius_mm: float = 15.0) -> np.ndarray:
    grid = aorta.grid
    voxels = np.argwhere(aorta.bool_mask())
    world = grid.voxel_to_world(voxels)
    near = world[np.linalg.norm(world - valve, axis=1) <= radius_mm]
    if len(near) < 3:
        near = world
    centered = near - near.mean(axis=0)
    cov = centered.T @ centered / len(near)
    eigvals, eigvecs = np.linalg.eigh(cov)
    axis = eigvecs[:, -1]
    toward_body = world.mean(axis=0) - valve
    if float(np.dot(axis, toward_body)) < 0:
        axis = -axis
    return axis / np.linalg.norm(axis)


def estimate_ostia(aorta: Volume, vessels: Volume, valve_center,
                   search_mm: float = 25.0) -> OstiaPoints:
    """Geometric ostia from oracle-quality masks.

    Vessel components near the valve are grouped into two angular clusters
    around the local aorta axis; each cluster's ostium is the aorta surface
    voxel closest to it. Left/right follows the sign of
    (axis x cluster direction) . x-axis, larger value = left.
    """
    if not aorta.data.any():
        raise EmptyMaskError("aorta mask is empty")
    if not vessels.data.any():
        raise EmptyMaskError("vessel mask is empty")
    grid = aorta.grid
    valve = np.asarray(valve_center, dtype=np.float64)

    comps = connected_components(vessels, 26)
    clusters = []  # (mean_angle, world points) per qualifying component
    axis = _local_axis(aorta, valve)
    base_u = np.array([1.0, 0.0, 0.0])
    if abs(float(np.dot(base_u, axis))) > 0.9:
        base_u = np.array([0.0, 1.0, 0.0])
    u = base_u - np.dot(base_u, axis) * axis
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)

    for lab in range(1, comps.count + 1):
        voxels = np.argwhere(comps.labels == lab)
        world = grid.voxel_to_world(voxels)
        near = world[np.linalg.norm(world - valve, axis=1) <= search_mm]
        if len(near) == 0:
            continue
        rel = near - valve
        angles = np.arctan2(rel @ v, rel @ u)
        # Circular mean keeps wraparound components in one place.
        mean_angle = float(np.arctan2(np.sin(angles).mean(), np.cos(angles).mean()))
        clusters.append((mean_angle, near))

    if not clusters:
        raise SingleOstiumError(
            f"no vessel voxel within {search_mm} mm of the valve center")
    if len(clusters) < 2:
        raise SingleOstiumError(
            "found a single vessel cluster near the valve; inject ostia via load_ostia")

    # Split cluster means at the two largest circular gaps.
    clusters.sort(key=lambda c: c[0])
    angles = np.array([c[0] for c in clusters])
    gaps = np.diff(np.concatenate([angles, [angles[0] + 2 * np.pi]]))
    cut_order = np.argsort(-gaps, kind="stable")
    cut_a, cut_b = sorted(int(i) for i in cut_order[:2])
    group_a = clusters[cut_a + 1:cut_b + 1]
    group_b = clusters[cut_b + 1:] + clusters[:cut_a + 1]

    surface = _aorta_surface_voxels(aorta)
    surface_world = grid.voxel_to_world(surface)

    def ostium_of(group):
        pts = np.vstack([c[1] for c in group])
        tree = cKDTree(pts)
        dists, _ = tree.query(surface_world)
        dmin = dists.min()
        cand = surface[dists == dmin]
        best = min(cand, key=_scan_order_key)
        direction = pts.mean(axis=0) - valve
        direction /= np.linalg.norm(direction)
        side_sign = float(np.dot(np.cross(axis, direction), np.array([1.0, 0.0, 0.0])))
        return grid.voxel_to_world(best), side_sign

    (pa, sa), (pb, sb) = ostium_of(group_a), ostium_of(group_b)
    if sa == sb:
        # Degenerate orientation; fall back to lexicographic order for determinism.
        first_left = tuple(pa) < tuple(pb)
    else:
        first_left = sa > sb
    left, right = (pa, pb) if first_left else (pb, pa)
    points = OstiaPoints(valve_center=valve, left_ostium=left, right_ostium=right,
                         source="geometric")
    _check_sanity(points)
    return points
