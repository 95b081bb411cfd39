"""3-D scalar volumes: world-mm geometry, trilinear sampling, MetaImage I/O.

All geometry in this package lives in world millimetres. A volume owns the
mapping between world points and continuous voxel coordinates; sampling
converts to voxel space at the last moment.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class OutOfBounds(Exception):
    """A sample point fell outside the volume extent."""


class ParseError(Exception):
    """Malformed MetaImage header or payload."""


class UnsupportedElementType(ParseError):
    """ElementType is not one of the supported scalar types."""


_ELEMENT_DTYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}


def as_point(p) -> np.ndarray:
    """Coerce to a finite float 3-vector (world mm)."""
    pt = np.asarray(p, dtype=float)
    if pt.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {pt.shape}")
    if not np.all(np.isfinite(pt)):
        raise ValueError("point has non-finite components")
    return pt


@dataclass(frozen=True)
class Volume3D:
    """Immutable scalar grid with anisotropic spacing.

    ``dims`` is (nx, ny, nz); ``data`` is stored as a read-only float64
    array indexed ``data[z, y, x]`` (x fastest, matching the on-disk raw
    layout). ``origin`` is the world position of voxel (0, 0, 0).
    Instances never mutate after construction and are safe for concurrent
    reads.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray
    element_type: str = "MET_DOUBLE"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        if self.element_type not in _ELEMENT_DTYPES:
            raise UnsupportedElementType(self.element_type)
        nx, ny, nz = dims
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.size != nx * ny * nz:
            raise ValueError(
                f"data length {arr.size} does not match dims product {nx * ny * nz}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains non-finite values")
        arr = arr.reshape(nz, ny, nx).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "data", arr)

    # -- geometry ---------------------------------------------------------

    def world_to_voxel(self, p) -> np.ndarray:
        """(p - origin) / spacing, componentwise; accepts (3,) or (N, 3)."""
        pts = np.asarray(p, dtype=float)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, q) -> np.ndarray:
        pts = np.asarray(q, dtype=float)
        return pts * np.asarray(self.spacing) + np.asarray(self.origin)

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World corners spanned by voxel centers (0,0,0) .. dims-1."""
        lo = np.asarray(self.origin, dtype=float)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi

    def contains(self, p) -> bool | np.ndarray:
        """True where the world point maps inside [0, dims-1] per axis."""
        q = self.world_to_voxel(p)
        upper = np.asarray(self.dims, dtype=float) - 1.0
        ok = (q >= 0.0) & (q <= upper)
        return ok.all(axis=-1)

    def value_at(self, i: int, j: int, k: int) -> float:
        """Voxel value at integer index (i, j, k) = (x, y, z)."""
        return float(self.data[k, j, i])

    # -- sampling ---------------------------------------------------------

    def sample_trilinear(self, p) -> float:
        """Trilinear interpolation at one world point.

        Exact at voxel centers. Raises :class:`OutOfBounds` when the point
        falls outside the grid; callers rely on this to observe the volume
        boundary.
        """
        return float(self.sample_many(np.asarray(p, dtype=float)[None, :])[0])

    def sample_many(self, pts: np.ndarray) -> np.ndarray:
        """Vectorized trilinear sampling of an (N, 3) world point array."""
        q = self.world_to_voxel(pts)
        upper = np.asarray(self.dims, dtype=float) - 1.0
        if np.any(q < 0.0) or np.any(q > upper):
            bad = np.where((q < 0.0) | (q > upper))[0]
            raise OutOfBounds(f"{bad.size} sample point(s) outside the volume")
        # floor clipped to dims-2 so q == dims-1 lands on the last cell
        i0 = np.minimum(q.astype(np.int64), np.asarray(self.dims) - 2)
        i0 = np.maximum(i0, 0)
        f = q - i0
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        d = self.data
        c000 = d[z0, y0, x0]
        c100 = d[z0, y0, x0 + 1]
        c010 = d[z0, y0 + 1, x0]
        c110 = d[z0, y0 + 1, x0 + 1]
        c001 = d[z0 + 1, y0, x0]
        c101 = d[z0 + 1, y0, x0 + 1]
        c011 = d[z0 + 1, y0 + 1, x0]
        c111 = d[z0 + 1, y0 + 1, x0 + 1]
        c00 = c000 + (c100 - c000) * fx
        c10 = c010 + (c110 - c010) * fx
        c01 = c001 + (c101 - c001) * fx
        c11 = c011 + (c111 - c011) * fx
        c0 = c00 + (c10 - c00) * fy
        c1 = c01 + (c11 - c01) * fy
        return c0 + (c1 - c0) * fz


def sample_trilinear(vol: Volume3D, p) -> float:
    return vol.sample_trilinear(p)


def world_to_voxel(vol: Volume3D, p) -> np.ndarray:
    return vol.world_to_voxel(p)


# -- MetaImage I/O ---------------------------------------------------------

_REQUIRED_KEYS = ("NDims", "DimSize", "ElementType", "ElementDataFile")


def load_volume(path) -> Volume3D:
    """Read a MetaImage header (.mhd) plus its raw payload.

    Supports scalar little-endian MET_SHORT / MET_FLOAT / MET_DOUBLE data
    with the payload in a separate file named by ElementDataFile.
    """
    path = os.fspath(path)
    header: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"malformed header line: {line!r}")
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
            if key.strip() == "ElementDataFile":
                break
    for key in _REQUIRED_KEYS:
        if key not in header:
            raise ParseError(f"missing required header key {key}")
    if header["NDims"] != "3":
        raise ParseError(f"NDims must be 3, got {header['NDims']}")
    if header.get("CompressedData", "False").lower() == "true":
        raise ParseError("compressed payloads are not supported")
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise ParseError("big-endian payloads are not supported")
    element_type = header["ElementType"]
    if element_type not in _ELEMENT_DTYPES:
        raise UnsupportedElementType(element_type)
    try:
        dims = tuple(int(t) for t in header["DimSize"].split())
        spacing = tuple(float(t) for t in header.get("ElementSpacing", "1 1 1").split())
        origin = tuple(float(t) for t in header.get("Offset", "0 0 0").split())
    except ValueError as exc:
        raise ParseError(f"bad numeric header field: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise ParseError("DimSize / ElementSpacing / Offset must have 3 entries")
    datafile = header["ElementDataFile"]
    if datafile in ("LOCAL", "LIST"):
        raise ParseError(f"ElementDataFile {datafile} is not supported")
    raw_path = os.path.join(os.path.dirname(path), datafile)
    dtype = _ELEMENT_DTYPES[element_type]
    raw = np.fromfile(raw_path, dtype=dtype)
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise ParseError(
            f"payload has {raw.size} elements, header dims imply {expected}"
        )
    return Volume3D(
        dims=dims,
        spacing=spacing,
        origin=origin,
        data=raw.astype(np.float64),
        element_type=element_type,
    )


def save_volume(vol: Volume3D, path) -> None:
    """Write ``vol`` as a .mhd header plus sibling .raw payload."""
    path = os.fspath(path)
    base, ext = os.path.splitext(path)
    if ext.lower() != ".mhd":
        raise ValueError(f"expected a .mhd path, got {path}")
    raw_name = os.path.basename(base) + ".raw"
    dtype = _ELEMENT_DTYPES[vol.element_type]
    nx, ny, nz = vol.dims
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"DimSize = {nx} {ny} {nz}",
        "ElementSpacing = {} {} {}".format(*(repr(s) for s in vol.spacing)),
        "Offset = {} {} {}".format(*(repr(o) for o in vol.origin)),
        f"ElementType = {vol.element_type}",
        f"ElementDataFile = {raw_name}",
    ]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    payload = np.ascontiguousarray(vol.data, dtype=np.float64).astype(dtype)
    payload.tofile(os.path.join(os.path.dirname(path), raw_name))
