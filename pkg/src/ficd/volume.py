"""Volume data model, intensity conventions and the FVOL file format.

Voxels are held as a float64 numpy array of shape ``(nx, ny, nz)``.  The
FVOL container stores them x-fastest, i.e. in Fortran order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

RAW, TRAIN, EVAL = "raw", "train", "eval"
RANGE_TAGS = (RAW, TRAIN, EVAL)
TARGET_INTERVALS = {TRAIN: (-1.0, 1.0), EVAL: (0.0, 1.0)}

MAGIC = b"FVOL1"
_HEADER = struct.Struct("<5sIIIBdd")


class VolumeError(ValueError):
    pass


class FormatError(VolumeError):
    pass


@dataclass(frozen=True, eq=False)
class Volume3:
    voxels: np.ndarray
    range_tag: str = RAW
    # extrema of the raw data this volume was normalized from
    stored_min: float = 0.0
    stored_max: float = 0.0

    def __post_init__(self):
        v = np.array(self.voxels, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise VolumeError(f"volume needs three positive dims, got shape {v.shape}")
        if self.range_tag not in RANGE_TAGS:
            raise VolumeError(f"unknown range tag {self.range_tag!r}")
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)

    @property
    def dims(self):
        return self.voxels.shape

    def check_range(self, atol=0.0):
        if self.range_tag in TARGET_INTERVALS:
            lo, hi = TARGET_INTERVALS[self.range_tag]
            if self.voxels.min() < lo - atol or self.voxels.max() > hi + atol:
                raise VolumeError(f"voxels outside the {self.range_tag} interval [{lo}, {hi}]")
        return self

    def __eq__(self, other):
        if not isinstance(other, Volume3):
            return NotImplemented
        return (self.range_tag == other.range_tag and self.dims == other.dims
                and np.array_equal(self.voxels, other.voxels)
                and self.stored_min == other.stored_min and self.stored_max == other.stored_max)

    __hash__ = None


def mask_from(flags) -> Volume3:
    return Volume3((np.asarray(flags) != 0).astype(np.float64), RAW)


def _finite(v):
    if not np.all(np.isfinite(v.voxels)):
        raise VolumeError("volume contains non-finite voxels")


def normalize(v: Volume3, target: str) -> Volume3:
    """Affinely map the volume's [min, max] onto the target interval.

    Already-tagged volumes convert between train and eval through the fixed
    interval map so the raw extrema survive; a raw volume records its own
    extrema.  Constant volumes land on the interval midpoint.
    """
    if target not in TARGET_INTERVALS:
        raise VolumeError(f"normalize target must be train or eval, got {target!r}")
    _finite(v)
    lo, hi = TARGET_INTERVALS[target]
    if v.range_tag == target:
        return v
    if v.range_tag in TARGET_INTERVALS:
        slo, shi = TARGET_INTERVALS[v.range_tag]
        out = lo + (v.voxels - slo) * ((hi - lo) / (shi - slo))
        return Volume3(np.clip(out, lo, hi), target, v.stored_min, v.stored_max)
    vmin, vmax = float(v.voxels.min()), float(v.voxels.max())
    if vmax == vmin:
        out = np.full(v.dims, 0.5 * (lo + hi))
    else:
        out = lo + (v.voxels - vmin) * ((hi - lo) / (vmax - vmin))
        out = np.clip(out, lo, hi)
    return Volume3(out, target, vmin, vmax)


def denormalize(v: Volume3) -> Volume3:
    """Invert :func:`normalize` using the stored extrema."""
    if v.range_tag == RAW:
        return v
    lo, hi = TARGET_INTERVALS[v.range_tag]
    out = v.stored_min + (v.voxels - lo) * ((v.stored_max - v.stored_min) / (hi - lo))
    return Volume3(out, RAW)


def crop_center(v: Volume3, target_dims) -> Volume3:
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or any(t < 1 or t > d for t, d in zip(target_dims, v.dims)):
        raise VolumeError(f"cannot crop {v.dims} to {target_dims}")
    starts = [(d - t) // 2 for d, t in zip(v.dims, target_dims)]
    sl = tuple(slice(s, s + t) for s, t in zip(starts, target_dims))
    return replace(v, voxels=v.voxels[sl])


def pad_to(v: Volume3, target_dims, fill=0.0) -> Volume3:
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or any(t < d for t, d in zip(target_dims, v.dims)):
        raise VolumeError(f"cannot pad {v.dims} to {target_dims}")
    out = np.full(target_dims, float(fill))
    starts = [(t - d) // 2 for d, t in zip(v.dims, target_dims)]
    sl = tuple(slice(s, s + d) for s, d in zip(starts, v.dims))
    out[sl] = v.voxels
    return replace(v, voxels=out)


def gradient_magnitude(v: Volume3) -> Volume3:
    """Euclidean norm of central differences, one-sided at the borders."""
    if min(v.dims) < 3:
        raise VolumeError(f"gradient_magnitude needs at least 3 voxels per axis, got {v.dims}")
    parts = np.gradient(v.voxels, edge_order=1)
    mag = np.sqrt(sum(p * p for p in parts))
    return Volume3(mag, RAW)


# ----------------------------------------------------------------------------
# FVOL

_TAG_CODES = {RAW: 0, TRAIN: 1, EVAL: 2}
_CODE_TAGS = {c: t for t, c in _TAG_CODES.items()}


def to_bytes(v: Volume3) -> bytes:
    nx, ny, nz = v.dims
    header = _HEADER.pack(MAGIC, nx, ny, nz, _TAG_CODES[v.range_tag],
                          float(v.stored_min), float(v.stored_max))
    payload = v.voxels.astype("<f4").tobytes(order="F")
    return header + payload


def from_bytes(buf: bytes) -> Volume3:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise FormatError("bad magic")
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    _, nx, ny, nz, code, smin, smax = _HEADER.unpack_from(buf)
    if code not in _CODE_TAGS:
        raise FormatError(f"unknown range tag code {code}")
    if min(nx, ny, nz) < 1:
        raise FormatError(f"invalid dims {(nx, ny, nz)}")
    expected = nx * ny * nz * 4
    payload = buf[_HEADER.size:]
    if len(payload) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise FormatError(f"dim/payload mismatch: {len(payload)} bytes for dims {(nx, ny, nz)}")
    vox = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape((nx, ny, nz), order="F")
    return Volume3(vox, _CODE_TAGS[code], smin, smax)


def write_volume(path, v: Volume3):
    Path(path).write_bytes(to_bytes(v))


def read_volume(path) -> Volume3:
    return from_bytes(Path(path).read_bytes())
