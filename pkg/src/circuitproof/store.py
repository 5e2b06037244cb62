"""Chunked on-disk storage of image and label volumes.

Store layout (one directory per volume):

    meta.txt                    key = value text: dims, voxel_size, chunk_shape, dtypes
    image/<cx>_<cy>_<cz>.raw    uint8 chunk, little-endian, x-fastest
    labels/<cx>_<cy>_<cz>.raw   uint64 chunk, little-endian, x-fastest

Chunks at the volume edge are stored at full chunk shape, zero-padded.  A store
is never written after creation; corrections live in the edit log.

In-memory arrays are indexed ``arr[x, y, z]`` and serialized in Fortran order,
which makes x the fastest-varying axis on disk.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .model import BoundsError, FormatError, PhysPoint, VolumeMeta, VoxelCoord, phys_to_voxel

IMAGE_DTYPE = np.dtype("<u1")
LABEL_DTYPE = np.dtype("<u8")
DEFAULT_CHUNK_SHAPE = (128, 128, 64)

_META_NAME = "meta.txt"


def _parse_ints(text: str, n: int, key: str) -> tuple[int, ...]:
    parts = text.split()
    if len(parts) != n:
        raise FormatError(f"{key}: expected {n} values, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise FormatError(f"{key}: {exc}") from exc


def _parse_floats(text: str, n: int, key: str) -> tuple[float, ...]:
    parts = text.split()
    if len(parts) != n:
        raise FormatError(f"{key}: expected {n} values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise FormatError(f"{key}: {exc}") from exc


def read_meta(path: Path) -> VolumeMeta:
    meta_file = Path(path) / _META_NAME
    if not meta_file.is_file():
        raise FormatError(f"missing {meta_file}")
    entries: dict[str, str] = {}
    for line in meta_file.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"bad meta line {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    for key in ("dims", "voxel_size", "chunk_shape"):
        if key not in entries:
            raise FormatError(f"meta.txt missing key {key!r}")
    if entries.get("image_dtype", "uint8") != "uint8":
        raise FormatError(f"unsupported image_dtype {entries['image_dtype']!r}")
    if entries.get("label_dtype", "uint64") != "uint64":
        raise FormatError(f"unsupported label_dtype {entries['label_dtype']!r}")
    return VolumeMeta(
        dims=_parse_ints(entries["dims"], 3, "dims"),
        voxel_size=_parse_floats(entries["voxel_size"], 3, "voxel_size"),
        chunk_shape=_parse_ints(entries["chunk_shape"], 3, "chunk_shape"),
    )


def write_meta(path: Path, meta: VolumeMeta) -> None:
    lines = [
        "dims = {} {} {}".format(*meta.dims),
        "voxel_size = {} {} {}".format(*meta.voxel_size),
        "chunk_shape = {} {} {}".format(*meta.chunk_shape),
        "image_dtype = uint8",
        "label_dtype = uint64",
    ]
    (Path(path) / _META_NAME).write_text("\n".join(lines) + "\n")


class Subvolume:
    """A dense region of image + label voxels, padded with 0 outside the volume."""

    __slots__ = ("origin", "shape", "image", "labels")

    def __init__(self, origin: tuple[int, int, int], image: np.ndarray, labels: np.ndarray):
        if image.shape != labels.shape:
            raise ValueError(f"image shape {image.shape} != labels shape {labels.shape}")
        self.origin = tuple(int(c) for c in origin)
        self.shape = tuple(int(s) for s in image.shape)
        self.image = image
        self.labels = labels

    def voxel_count(self) -> int:
        return int(np.prod(self.shape))


class VolumeStore:
    """Read-only handle over a store directory; chunks load on demand."""

    def __init__(self, path: Path, meta: VolumeMeta):
        self.path = Path(path)
        self.meta = meta
        self._chunk_cache: dict[tuple[str, int, int, int], np.ndarray] = {}
        self._full: dict[str, np.ndarray] = {}

    # -- chunk access -------------------------------------------------------

    def _chunk_counts(self) -> tuple[int, int, int]:
        return tuple(
            math.ceil(d / c) for d, c in zip(self.meta.dims, self.meta.chunk_shape)
        )

    def _chunk_path(self, kind: str, cx: int, cy: int, cz: int) -> Path:
        return self.path / kind / f"{cx}_{cy}_{cz}.raw"

    def _load_chunk(self, kind: str, cx: int, cy: int, cz: int) -> np.ndarray:
        key = (kind, cx, cy, cz)
        cached = self._chunk_cache.get(key)
        if cached is not None:
            return cached
        dtype = IMAGE_DTYPE if kind == "image" else LABEL_DTYPE
        cs = self.meta.chunk_shape
        p = self._chunk_path(kind, cx, cy, cz)
        if not p.is_file():
            raise FormatError(f"missing chunk {p}")
        raw = np.fromfile(p, dtype=dtype)
        if raw.size != cs[0] * cs[1] * cs[2]:
            raise FormatError(f"chunk {p} has {raw.size} voxels, expected {np.prod(cs)}")
        arr = raw.reshape(cs, order="F")
        self._chunk_cache[key] = arr
        return arr

    def read_full(self, kind: str) -> np.ndarray:
        """Assemble the entire volume for one kind; cached."""
        if kind in self._full:
            return self._full[kind]
        dims = self.meta.dims
        cs = self.meta.chunk_shape
        dtype = IMAGE_DTYPE if kind == "image" else LABEL_DTYPE
        out = np.zeros(dims, dtype=dtype, order="F")
        ncx, ncy, ncz = self._chunk_counts()
        for cz in range(ncz):
            for cy in range(ncy):
                for cx in range(ncx):
                    chunk = self._load_chunk(kind, cx, cy, cz)
                    x0, y0, z0 = cx * cs[0], cy * cs[1], cz * cs[2]
                    x1 = min(x0 + cs[0], dims[0])
                    y1 = min(y0 + cs[1], dims[1])
                    z1 = min(z0 + cs[2], dims[2])
                    out[x0:x1, y0:y1, z0:z1] = chunk[: x1 - x0, : y1 - y0, : z1 - z0]
        self._full[kind] = out
        return out

    def _read_box(self, kind: str, origin: tuple[int, int, int], shape: tuple[int, int, int]) -> np.ndarray:
        """Dense box read; out-of-volume voxels are 0.  F-ordered (x fastest)
        so chunk assembly and wire encoding stay contiguous."""
        dtype = IMAGE_DTYPE if kind == "image" else LABEL_DTYPE
        dims = self.meta.dims
        cs = self.meta.chunk_shape
        interior = all(
            origin[a] >= 0 and origin[a] + shape[a] <= dims[a] for a in range(3)
        )
        # fully interior regions are overwritten wholesale; skip the zero fill
        alloc = np.empty if interior else np.zeros
        out = alloc(shape, dtype=dtype, order="F")
        lo = [max(origin[a], 0) for a in range(3)]
        hi = [min(origin[a] + shape[a], dims[a]) for a in range(3)]
        if any(lo[a] >= hi[a] for a in range(3)):
            return np.zeros(shape, dtype=dtype, order="F")
        c_lo = [lo[a] // cs[a] for a in range(3)]
        c_hi = [(hi[a] - 1) // cs[a] for a in range(3)]
        for cz in range(c_lo[2], c_hi[2] + 1):
            for cy in range(c_lo[1], c_hi[1] + 1):
                for cx in range(c_lo[0], c_hi[0] + 1):
                    chunk = self._load_chunk(kind, cx, cy, cz)
                    base = (cx * cs[0], cy * cs[1], cz * cs[2])
                    # overlap of [lo, hi) with this chunk, in global coords
                    g0 = [max(lo[a], base[a]) for a in range(3)]
                    g1 = [min(hi[a], base[a] + cs[a]) for a in range(3)]
                    if any(g0[a] >= g1[a] for a in range(3)):
                        continue
                    src = chunk[
                        g0[0] - base[0]: g1[0] - base[0],
                        g0[1] - base[1]: g1[1] - base[1],
                        g0[2] - base[2]: g1[2] - base[2],
                    ]
                    out[
                        g0[0] - origin[0]: g1[0] - origin[0],
                        g0[1] - origin[1]: g1[1] - origin[1],
                        g0[2] - origin[2]: g1[2] - origin[2],
                    ] = src
        return out

    # -- lookups ------------------------------------------------------------

    def label_at(self, v: VoxelCoord) -> int:
        if not self.meta.contains_voxel(v):
            raise BoundsError(f"voxel {v.as_tuple()} outside dims {self.meta.dims}")
        cs = self.meta.chunk_shape
        cx, cy, cz = (c // s for c, s in zip(v.as_tuple(), cs))
        chunk = self._load_chunk("labels", cx, cy, cz)
        return int(chunk[v.x % cs[0], v.y % cs[1], v.z % cs[2]])

    def label_at_point(self, p: PhysPoint) -> int:
        return self.label_at(phys_to_voxel(p, self.meta))


def open_store(path: str | Path) -> VolumeStore:
    """Open a store directory; raises FormatError when metadata is missing or corrupt."""
    path = Path(path)
    meta = read_meta(path)
    for kind in ("image", "labels"):
        if not (path / kind).is_dir():
            raise FormatError(f"missing {path / kind}")
    return VolumeStore(path, meta)


def create_store(
    path: str | Path,
    image: np.ndarray,
    labels: np.ndarray,
    voxel_size: tuple[float, float, float],
    chunk_shape: tuple[int, int, int] | None = None,
) -> VolumeStore:
    """Write dense arrays out as a chunked store and return a handle."""
    path = Path(path)
    if image.shape != labels.shape:
        raise ValueError(f"image shape {image.shape} != labels shape {labels.shape}")
    dims = tuple(int(s) for s in image.shape)
    if chunk_shape is None:
        chunk_shape = tuple(min(c, d) for c, d in zip(DEFAULT_CHUNK_SHAPE, dims))
    meta = VolumeMeta(dims=dims, voxel_size=tuple(voxel_size), chunk_shape=tuple(chunk_shape))
    path.mkdir(parents=True, exist_ok=True)
    write_meta(path, meta)
    image = np.asfortranarray(image.astype(IMAGE_DTYPE, copy=False))
    labels = np.asfortranarray(labels.astype(LABEL_DTYPE, copy=False))
    cs = meta.chunk_shape
    for kind, arr in (("image", image), ("labels", labels)):
        kdir = path / kind
        kdir.mkdir(exist_ok=True)
        ncx, ncy, ncz = (math.ceil(d / c) for d, c in zip(dims, cs))
        for cz in range(ncz):
            for cy in range(ncy):
                for cx in range(ncx):
                    block = np.zeros(cs, dtype=arr.dtype, order="F")
                    x0, y0, z0 = cx * cs[0], cy * cs[1], cz * cs[2]
                    x1 = min(x0 + cs[0], dims[0])
                    y1 = min(y0 + cs[1], dims[1])
                    z1 = min(z0 + cs[2], dims[2])
                    block[: x1 - x0, : y1 - y0, : z1 - z0] = arr[x0:x1, y0:y1, z0:z1]
                    (kdir / f"{cx}_{cy}_{cz}.raw").write_bytes(block.tobytes(order="F"))
    return VolumeStore(path, meta)


def region_origin(center: VoxelCoord, shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Origin of a region centered on a voxel: center - shape//2, may be negative."""
    return tuple(int(c) - int(s) // 2 for c, s in zip(center.as_tuple(), shape))


def read_region(store: VolumeStore, center: VoxelCoord, shape: tuple[int, int, int]) -> Subvolume:
    """Read a region centered on a voxel; out-of-bounds voxels are image 0 / label 0."""
    if any(s <= 0 for s in shape):
        raise ValueError(f"non-positive region shape {shape}")
    if not store.meta.contains_voxel(center):
        raise BoundsError(f"center {center.as_tuple()} outside dims {store.meta.dims}")
    origin = region_origin(center, shape)
    image = store._read_box("image", origin, tuple(shape))
    labels = store._read_box("labels", origin, tuple(shape))
    return Subvolume(origin, image, labels)
