"""Wire encoding for inspection regions.

A raw 512x512x100 label region is ~210 MB at 64 bits per voxel; run-length
encoding keeps interactive fetches feasible.  Payload layout:

    header   32 bytes: magic ``CPRG``, format version u16, image encoding u8
             (0 = raw), label encoding u8 (1 = RLE pairs), shape 3 x u32,
             origin 3 x i32 (may be negative near volume corners)
    image    shape[0]*shape[1]*shape[2] uint8, x-fastest
    labels   (run length u32, label u64) pairs until the end of the payload

All integers little-endian.  Runs follow x-fastest voxel order and must sum
to the voxel count.
"""

from __future__ import annotations

import struct

import numpy as np

from .model import FormatError
from .store import Subvolume

MAGIC = b"CPRG"
HEADER_VERSION = 1
IMAGE_RAW = 0
LABELS_RLE = 1

_HEADER = struct.Struct("<4sHBB3I3i")
assert _HEADER.size == 32

_PAIR_DTYPE = np.dtype([("run", "<u4"), ("label", "<u8")])
_MAX_RUN = np.uint32(0xFFFFFFFF)


def encode_labels_rle(labels: np.ndarray) -> bytes:
    """Run-length encode a label array in x-fastest order."""
    flat = np.asarray(labels, dtype=np.uint64).reshape(-1, order="F")
    if flat.size == 0:
        return b""
    boundaries = np.flatnonzero(flat[1:] != flat[:-1])
    starts = np.concatenate(([0], boundaries + 1))
    ends = np.concatenate((boundaries + 1, [flat.size]))
    runs = (ends - starts).astype(np.uint64)
    values = flat[starts]
    # split runs longer than u32 max (only reachable on absurdly large regions)
    if runs.max(initial=0) > int(_MAX_RUN):
        out_runs: list[int] = []
        out_vals: list[int] = []
        for r, v in zip(runs.tolist(), values.tolist()):
            while r > int(_MAX_RUN):
                out_runs.append(int(_MAX_RUN))
                out_vals.append(v)
                r -= int(_MAX_RUN)
            out_runs.append(r)
            out_vals.append(v)
        runs = np.asarray(out_runs, dtype=np.uint64)
        values = np.asarray(out_vals, dtype=np.uint64)
    pairs = np.empty(runs.size, dtype=_PAIR_DTYPE)
    pairs["run"] = runs.astype(np.uint32)
    pairs["label"] = values
    return pairs.tobytes()


def decode_labels_rle(data: bytes, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of encode_labels_rle; validates that runs cover the region exactly."""
    count = int(np.prod(shape))
    if len(data) % _PAIR_DTYPE.itemsize != 0:
        raise FormatError(f"RLE payload length {len(data)} is not a whole number of pairs")
    pairs = np.frombuffer(data, dtype=_PAIR_DTYPE)
    total = int(pairs["run"].astype(np.uint64).sum())
    if total != count:
        raise FormatError(f"RLE runs cover {total} voxels, region has {count}")
    flat = np.repeat(pairs["label"], pairs["run"])
    return flat.reshape(shape, order="F")


def encode_region(sub: Subvolume) -> bytes:
    header = _HEADER.pack(
        MAGIC,
        HEADER_VERSION,
        IMAGE_RAW,
        LABELS_RLE,
        *sub.shape,
        *sub.origin,
    )
    image = np.asarray(sub.image, dtype=np.uint8).tobytes(order="F")
    return header + image + encode_labels_rle(sub.labels)


def decode_region(payload: bytes) -> Subvolume:
    if len(payload) < _HEADER.size:
        raise FormatError("region payload shorter than its header")
    magic, version, image_enc, label_enc, sx, sy, sz, ox, oy, oz = _HEADER.unpack(
        payload[: _HEADER.size]
    )
    if magic != MAGIC:
        raise FormatError(f"bad region magic {magic!r}")
    if version != HEADER_VERSION:
        raise FormatError(f"unsupported region format version {version}")
    if image_enc != IMAGE_RAW or label_enc != LABELS_RLE:
        raise FormatError(f"unsupported encodings image={image_enc} labels={label_enc}")
    shape = (sx, sy, sz)
    count = sx * sy * sz
    image_end = _HEADER.size + count
    if len(payload) < image_end:
        raise FormatError("region payload truncated in image section")
    image = np.frombuffer(payload, dtype=np.uint8, count=count, offset=_HEADER.size)
    image = image.reshape(shape, order="F")
    labels = decode_labels_rle(payload[image_end:], shape)
    return Subvolume((ox, oy, oz), image.copy(), labels)
