"""Deterministic paired MRI/PET phantoms.

The "MRI" is a head-like ellipsoid with a few overlapping blobs whose edges
are smoothed with a logistic profile.  The "PET" is a fixed monotone
function of the MRI intensity (a smoothstep plus two band offsets) with
optional Gaussian noise, so a model has to learn a nonlinear intensity map
rather than copy its input.  Pair ``i`` is drawn from the Philox stream
keyed by ``(seed, i)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .rng import philox
from .volume import Volume3, mask_from, write_volume

# (center, radii) as fractions of the volume extent
CEREBELLUM_VOI = ((0.5, 0.5, 0.2), (0.32, 0.28, 0.16))
CTX_VOI = ((0.5, 0.5, 0.66), (0.4, 0.4, 0.26))
SHELL_INNER = 0.55


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (16, 16, 16)
    n_ellipsoids: int = 4
    noise_sigma: float = 0.02
    seed: int = 0
    edge_width: float = 0.08
    band_offsets: tuple = (0.2, 0.15)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "band_offsets", tuple(float(o) for o in self.band_offsets))
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError(f"phantom dims must be three sizes >= 4, got {self.dims}")
        if self.n_ellipsoids < 1 or self.noise_sigma < 0:
            raise ValueError("need n_ellipsoids >= 1 and noise_sigma >= 0")

    def to_text(self):
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{k} = {v}\n")
        return "".join(out)

    @classmethod
    def from_mapping(cls, mapping):
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in mapping.items():
            if k not in types:
                raise KeyError(k)
            if types[k] == "tuple":
                v = tuple(float(x) if k == "band_offsets" else int(x) for x in str(v).split(","))
            elif types[k] == "int":
                v = int(v)
            else:
                v = float(v)
            kw[k] = v
        return cls(**kw)


def _grid(dims):
    axes = [(np.arange(n) + 0.5) / n for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def _radius(grid, center, radii):
    return np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)))


def _soft(r, width):
    return 0.5 * (1.0 + np.tanh((1.0 - r) / (2.0 * width)))


def intensity_map(u, band_offsets=(0.2, 0.15)):
    """Monotone MRI -> PET intensity law."""
    u = np.clip(u, 0.0, 1.0)
    out = u * u * (3.0 - 2.0 * u)
    for offset, (lo, hi) in zip(band_offsets, ((0.45, 0.6), (0.75, 0.9))):
        s = np.clip((u - lo) / (hi - lo), 0.0, 1.0)
        out = out + offset * s * s * (3.0 - 2.0 * s)
    return out


def reference_masks(dims):
    grid = _grid(dims)
    masks = {}
    for name, (center, radii) in (("cerebellum", CEREBELLUM_VOI), ("ctx", CTX_VOI)):
        r = _radius(grid, center, radii)
        masks[name] = mask_from((r <= 1.0) & (r >= SHELL_INNER))
    return masks


def generate_pair(spec: PhantomSpec, index=0):
    """Return ``(mri, pet, masks)`` as raw volumes."""
    rng = philox(spec.seed, index)
    grid = _grid(spec.dims)
    head = _soft(_radius(grid, (0.5, 0.5, 0.45), (0.44, 0.42, 0.42)), spec.edge_width)
    mri = 0.35 * head
    for _ in range(spec.n_ellipsoids):
        center = rng.uniform(0.3, 0.7, size=3)
        radii = rng.uniform(0.12, 0.3, size=3)
        level = rng.uniform(0.15, 0.45)
        mri = mri + level * _soft(_radius(grid, center, radii), spec.edge_width) * head
    mri = np.clip(mri, 0.0, 1.0)
    pet = intensity_map(mri, spec.band_offsets)
    if spec.noise_sigma > 0:
        pet = pet + spec.noise_sigma * rng.standard_normal(spec.dims)
    return Volume3(mri), Volume3(pet), reference_masks(spec.dims)


def generate_dataset(spec: PhantomSpec, n, start=0):
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    return [generate_pair(spec, i) for i in range(start, start + n)]


def write_dataset(spec: PhantomSpec, n, out_dir, masks=False):
    """Write ``<id>_mri.fvol`` / ``<id>_pet.fvol`` pairs and a spec sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (mri, pet, m) in enumerate(generate_dataset(spec, n)):
        stem = f"{i:04d}"
        for suffix, vol in (("mri", mri), ("pet", pet)):
            path = out / f"{stem}_{suffix}.fvol"
            write_volume(path, vol)
            written.append(path)
        if masks:
            write_volume(out / f"{stem}_cereb.fvol", m["cerebellum"])
            write_volume(out / f"{stem}_ctx.fvol", m["ctx"])
    (out / "phantom.spec").write_text(spec.to_text(), encoding="utf-8")
    return written
