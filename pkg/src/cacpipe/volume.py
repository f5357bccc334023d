"""Voxel-grid data model and MetaImage (.mha) I/O.

Volumes are dense 3D scalar grids with physical spacing and origin. Data is
stored in an (nx, ny, nz) array indexed ``data[x, y, z]``; on disk the payload
is x-fastest (MetaImage convention), which matches ``ravel(order="F")``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, MetaImageError

# Co-registration tolerance for spacing/origin when asserting a shared grid.
GRID_TOL_MM = 1e-4


class TerritoryCode(enum.IntEnum):
    """Stable label codes for coronary territories in label volumes."""

    BACKGROUND = 0
    LM = 1
    LAD = 2
    LCX = 3
    RCA = 4
    AORTA = 5


CORONARY_CODES = (TerritoryCode.LM, TerritoryCode.LAD, TerritoryCode.LCX, TerritoryCode.RCA)


class ElementKind(enum.Enum):
    HU = "hu"          # int16 Hounsfield units
    MASK = "mask"      # uint8 in {0, 1}
    LABEL = "label"    # uint8 TerritoryCode values
    REAL = "real"      # float32 on disk; float64 permitted in memory


_KIND_DTYPES = {
    ElementKind.HU: (np.int16,),
    ElementKind.MASK: (np.uint8,),
    ElementKind.LABEL: (np.uint8,),
    ElementKind.REAL: (np.float32, np.float64),
}

_MET_TYPES = {"MET_SHORT": np.int16, "MET_UCHAR": np.uint8, "MET_FLOAT": np.float32}
_MET_NAMES = {np.dtype(np.int16): "MET_SHORT", np.dtype(np.uint8): "MET_UCHAR",
              np.dtype(np.float32): "MET_FLOAT"}

_MANDATORY_KEYS = ("ObjectType", "NDims", "DimSize", "ElementSpacing", "Offset",
                   "ElementType", "ElementDataFile")


@dataclass(frozen=True)
class Grid3:
    """Voxel-grid geometry: dims (voxels), spacing (mm/voxel), origin (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"dims must be three integers >= 1, got {self.dims}")
        if len(self.spacing) != 3 or any(float(s) <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def voxel_to_world(self, index) -> np.ndarray:
        """Affine map voxel index -> world mm (voxel centers); accepts (..., 3) arrays."""
        idx = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_voxel(self, world) -> np.ndarray:
        """Inverse of voxel_to_world, rounded to the nearest index."""
        w = np.asarray(world, dtype=np.float64)
        idx = (w - np.asarray(self.origin)) / np.asarray(self.spacing)
        return np.rint(idx).astype(np.int64)

    def contains_world(self, world) -> bool:
        """True if a world point lies within the grid's physical extent (half-voxel border)."""
        w = np.asarray(world, dtype=np.float64)
        lo = np.asarray(self.origin) - 0.5 * np.asarray(self.spacing)
        hi = np.asarray(self.origin) + (np.asarray(self.dims) - 0.5) * np.asarray(self.spacing)
        return bool(np.all(w >= lo) and np.all(w <= hi))


@dataclass(eq=False)
class Volume:
    """A dense scalar grid: geometry, element kind, and an (nx, ny, nz) array."""

    grid: Grid3
    kind: ElementKind
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if tuple(self.data.shape) != self.grid.dims:
            raise ValueError(f"data shape {self.data.shape} != grid dims {self.grid.dims}")
        if self.data.dtype not in [np.dtype(d) for d in _KIND_DTYPES[self.kind]]:
            raise ValueError(f"dtype {self.data.dtype} invalid for element kind {self.kind.value}")
        if self.kind is ElementKind.MASK and self.data.size and self.data.max() > 1:
            raise ValueError("mask volume contains values outside {0, 1}")
        if self.kind is ElementKind.LABEL and self.data.size and self.data.max() > max(TerritoryCode):
            raise ValueError("label volume contains codes outside TerritoryCode")

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.grid == other.grid and self.kind == other.kind
                and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))

    def new_like(self, data, kind=None) -> "Volume":
        return Volume(self.grid, kind if kind is not None else self.kind, data)

    def bool_mask(self) -> np.ndarray:
        return self.data.astype(bool)


def make_mask(grid: Grid3, data) -> Volume:
    return Volume(grid, ElementKind.MASK, np.asarray(data).astype(np.uint8))


def voxel_to_world(grid: Grid3, index) -> np.ndarray:
    return grid.voxel_to_world(index)


def world_to_voxel(grid: Grid3, world) -> np.ndarray:
    return grid.world_to_voxel(world)


def grids_compatible(a: Grid3, b: Grid3):
    """Return None if grids co-register, else the name of the first differing field."""
    if a.dims != b.dims:
        return "dims"
    for name in ("spacing", "origin"):
        av, bv = getattr(a, name), getattr(b, name)
        for axis in range(3):
            if abs(av[axis] - bv[axis]) > GRID_TOL_MM:
                return f"{name}[{axis}]"
    return None


def assert_same_grid(a: Volume, b: Volume) -> None:
    """Raise GridMismatchError unless dims match exactly and spacing/origin agree to 1e-4 mm."""
    bad = grids_compatible(a.grid, b.grid)
    if bad is not None:
        raise GridMismatchError(
            f"grid mismatch in {bad}: {getattr(a.grid, bad.split('[')[0])} vs "
            f"{getattr(b.grid, bad.split('[')[0])}", field=bad)


def _parse_triple(value, caster, key):
    parts = value.split()
    if len(parts) != 3:
        raise MetaImageError(f"{key} must have 3 components, got {value!r}", key=key)
    try:
        return tuple(caster(p) for p in parts)
    except ValueError as exc:
        raise MetaImageError(f"cannot parse {key} = {value!r}", key=key) from exc


def read_metaimage(path, kind: ElementKind | None = None) -> Volume:
    """Read the supported MetaImage subset: text header, then raw LOCAL payload.

    Header keys may appear in any order. When `kind` is not given it is
    inferred from ElementType (MET_UCHAR becomes LABEL if any value exceeds 1,
    else MASK).
    """
    with open(path, "rb") as fh:
        blob = fh.read()

    header: dict[str, str] = {}
    pos = 0
    while True:
        eol = blob.find(b"\n", pos)
        if eol < 0:
            raise MetaImageError("header ended before ElementDataFile", key="ElementDataFile")
        line = blob[pos:eol].decode("ascii", errors="replace").strip()
        pos = eol + 1
        if not line:
            continue
        if "=" not in line:
            raise MetaImageError(f"malformed header line {line!r}", key=line.split()[0] if line else "")
        key, value = (part.strip() for part in line.split("=", 1))
        header[key] = value
        if key == "ElementDataFile":
            break

    for key in _MANDATORY_KEYS:
        if key not in header:
            raise MetaImageError(f"missing mandatory key {key}", key=key)
    if header["ObjectType"] != "Image":
        raise MetaImageError(f"ObjectType must be Image, got {header['ObjectType']!r}", key="ObjectType")
    if header["NDims"] != "3":
        raise MetaImageError(f"NDims must be 3, got {header['NDims']!r}", key="NDims")
    if header["ElementDataFile"] != "LOCAL":
        raise MetaImageError("only ElementDataFile = LOCAL is supported", key="ElementDataFile")
    if header.get("BinaryData", "True") != "True":
        raise MetaImageError("BinaryData must be True", key="BinaryData")
    if header.get("BinaryDataByteOrderMSB", "False") != "False":
        raise MetaImageError("payload must be little-endian", key="BinaryDataByteOrderMSB")
    if header.get("CompressedData", "False") != "False":
        raise MetaImageError("compressed payloads are unsupported", key="CompressedData")
    if "TransformMatrix" in header:
        try:
            mat = tuple(float(v) for v in header["TransformMatrix"].split())
        except ValueError as exc:
            raise MetaImageError("cannot parse TransformMatrix", key="TransformMatrix") from exc
        if mat != (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0):
            raise MetaImageError("non-identity TransformMatrix is unsupported", key="TransformMatrix")

    elem = header["ElementType"]
    if elem not in _MET_TYPES:
        raise MetaImageError(f"unsupported ElementType {elem!r}", key="ElementType")
    dtype = np.dtype(_MET_TYPES[elem]).newbyteorder("<")

    dims = _parse_triple(header["DimSize"], int, "DimSize")
    spacing = _parse_triple(header["ElementSpacing"], float, "ElementSpacing")
    origin = _parse_triple(header["Offset"], float, "Offset")
    try:
        grid = Grid3(dims, spacing, origin)
    except ValueError as exc:
        raise MetaImageError(str(exc), key="DimSize") from exc

    count = dims[0] * dims[1] * dims[2]
    payload = blob[pos:]
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise MetaImageError(
            f"payload is {len(payload)} bytes, DimSize implies {expected}", key="ElementDataFile")
    data = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))
    data = data.reshape(dims, order="F")

    if kind is None:
        if elem == "MET_SHORT":
            kind = ElementKind.HU
        elif elem == "MET_FLOAT":
            kind = ElementKind.REAL
        else:
            kind = ElementKind.LABEL if (data.size and data.max() > 1) else ElementKind.MASK
    return Volume(grid, kind, data)


def write_metaimage(vol: Volume, path) -> None:
    """Write a Volume as a single-file .mha; byte output is deterministic."""
    dtype = np.dtype(vol.data.dtype)
    if dtype not in _MET_NAMES:
        raise MetaImageError(
            f"dtype {dtype} has no MetaImage element type (convert to float32 first)",
            key="ElementType")
    g = vol.grid
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"DimSize = {g.dims[0]} {g.dims[1]} {g.dims[2]}",
        f"ElementSpacing = {g.spacing[0]!r} {g.spacing[1]!r} {g.spacing[2]!r}",
        f"Offset = {g.origin[0]!r} {g.origin[1]!r} {g.origin[2]!r}",
        f"ElementType = {_MET_NAMES[dtype]}",
        "ElementDataFile = LOCAL",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = np.ascontiguousarray(vol.data.ravel(order="F")).astype(dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
