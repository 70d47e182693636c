"""3D scalar volumes: container type, header+raw file I/O, masked patch
sampling, and synthetic phantom generation with known lesion ground truth.

File format
-----------
A volume is stored as a UTF-8 text header (``.hdr``) next to one or two raw
payload files.  The header holds one ``key = value`` line per field::

    dims = 128 128 128
    spacing = 1.0 1.0 1.0
    dtype = int16
    data_file = subject01.raw
    mask_file = subject01_mask.raw        (optional)

The payload is little-endian, x-fastest (x varies quickest, then y, then z).
Scan volumes use ``int16``; binary masks use ``uint8`` with values 0/1.
The optional ``mask_file`` payload is always ``uint8`` with the same dims.

All randomness in this module goes through ``numpy.random.Generator`` seeded
with PCG64, so identical seeds give bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lesionmil._gauss import smooth3


class VolumeIOError(Exception):
    """Base class for volume file problems."""


class HeaderError(VolumeIOError):
    """Header file is missing required fields or cannot be parsed."""


class PayloadSizeError(VolumeIOError):
    """Raw payload length does not match dims times element size."""


class UnsupportedDtypeError(VolumeIOError):
    """Header declares an element type this library does not read."""


class SamplingError(ValueError):
    """No valid patch center exists for the requested sampling."""


class PhantomError(ValueError):
    """Phantom specification cannot be realized in the given volume."""


_DTYPES = {"int16": np.dtype("<i2"), "uint8": np.dtype("u1")}


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with physical spacing and an optional binary mask.

    ``data`` has shape (nx, ny, nz); ``spacing`` is mm per voxel along each
    axis.  Arrays are frozen after construction so volumes can be shared
    freely across threads.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    mask: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != data.shape:
                raise ValueError(
                    f"mask shape {mask.shape} differs from data shape {data.shape}"
                )
            mask.flags.writeable = False
            object.__setattr__(self, "mask", mask)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        if self.dims != other.dims or self.spacing != other.spacing:
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        if self.mask is not None and not np.array_equal(self.mask, other.mask):
            return False
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class Patch:
    """A cubic sub-volume cut from one subject's scan."""

    origin: tuple[int, int, int]
    size: int
    values: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != (self.size,) * 3:
            raise ValueError(
                f"patch values shape {values.shape} does not match size {self.size}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters for one synthetic phantom volume.

    Lesions are low-intensity spheres blended into a noisy background, so
    ``lesion_mean`` must lie below ``background_mean``.  The seed fully
    determines the output.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    background_mean: float
    background_std: float
    lesion_count: tuple[int, int]
    lesion_radius_mm: tuple[float, float]
    lesion_mean: float
    lesion_std: float
    smoothing_mm: float
    seed: int

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise ValueError("dims components must be >= 1")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing components must be > 0")
        if not self.lesion_mean < self.background_mean:
            raise ValueError("lesion_mean must be below background_mean")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad lesion_count range {self.lesion_count}")
        rlo, rhi = self.lesion_radius_mm
        if rlo <= 0 or rhi < rlo:
            raise ValueError(f"bad lesion_radius_mm range {self.lesion_radius_mm}")
        if self.smoothing_mm < 0:
            raise ValueError("smoothing_mm must be >= 0")


def _parse_header(path: Path) -> dict[str, str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise HeaderError(f"cannot read header {path}: {exc}") from exc
    fields: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise HeaderError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in fields:
            raise HeaderError(f"{path}:{lineno}: duplicate key {key!r}")
        fields[key] = value.strip()
    missing = {"dims", "spacing", "dtype", "data_file"} - fields.keys()
    if missing:
        raise HeaderError(f"{path}: missing header fields {sorted(missing)}")
    unknown = fields.keys() - {"dims", "spacing", "dtype", "data_file", "mask_file"}
    if unknown:
        raise HeaderError(f"{path}: unknown header fields {sorted(unknown)}")
    return fields


def _read_payload(path: Path, dims: tuple[int, int, int], dtype: np.dtype) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read payload {path}: {exc}") from exc
    n = dims[0] * dims[1] * dims[2]
    expected = n * dtype.itemsize
    if len(raw) != expected:
        raise PayloadSizeError(
            f"{path}: payload is {len(raw)} bytes, dims {dims} require {expected}"
        )
    # x-fastest on disk -> Fortran-order reshape into (nx, ny, nz)
    return np.frombuffer(raw, dtype=dtype).reshape(dims, order="F").copy()


def load_volume(path: str | Path) -> Volume:
    """Read a volume from a header file (see module docstring for the format).

    Raises HeaderError, UnsupportedDtypeError or PayloadSizeError depending
    on what is wrong with the file pair.
    """
    path = Path(path)
    fields = _parse_header(path)
    try:
        dims = tuple(int(t) for t in fields["dims"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
    except ValueError as exc:
        raise HeaderError(f"{path}: malformed dims/spacing: {exc}") from exc
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise HeaderError(f"{path}: dims must be three positive integers, got {dims}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise HeaderError(f"{path}: spacing must be three positive reals, got {spacing}")
    if fields["dtype"] not in _DTYPES:
        raise UnsupportedDtypeError(
            f"{path}: unsupported dtype {fields['dtype']!r} (supported: int16, uint8)"
        )
    dtype = _DTYPES[fields["dtype"]]
    data = _read_payload(path.parent / fields["data_file"], dims, dtype)
    mask = None
    if "mask_file" in fields:
        mask = _read_payload(path.parent / fields["mask_file"], dims, _DTYPES["uint8"])
        mask = mask.astype(bool)
    return Volume(data=data, spacing=spacing, mask=mask)


def save_volume(v: Volume, path: str | Path) -> None:
    """Write ``v`` so that :func:`load_volume` round-trips it exactly.

    ``path`` names the header file; payloads are written next to it as
    ``<stem>.raw`` and, when a mask is present, ``<stem>_mask.raw``.
    """
    path = Path(path)
    if v.data.dtype.kind == "u" and v.data.dtype.itemsize == 1:
        dtype_name, dtype = "uint8", _DTYPES["uint8"]
    else:
        dtype_name, dtype = "int16", _DTYPES["int16"]
    data_name = path.stem + ".raw"
    lines = [
        f"dims = {v.dims[0]} {v.dims[1]} {v.dims[2]}",
        f"spacing = {v.spacing[0]!r} {v.spacing[1]!r} {v.spacing[2]!r}",
        f"dtype = {dtype_name}",
        f"data_file = {data_name}",
    ]
    mask_name = None
    if v.mask is not None:
        mask_name = path.stem + "_mask.raw"
        lines.append(f"mask_file = {mask_name}")
    payload = np.asarray(v.data, dtype=dtype).ravel(order="F").tobytes()
    try:
        (path.parent / data_name).write_bytes(payload)
        if mask_name is not None:
            mask_payload = v.mask.astype("u1").ravel(order="F").tobytes()
            (path.parent / mask_name).write_bytes(mask_payload)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise VolumeIOError(f"cannot write volume {path}: {exc}") from exc


def valid_patch_centers(v: Volume, size: int) -> np.ndarray:
    """Voxel indices that can serve as patch centers: inside the mask, with
    the whole patch within volume bounds.  Shape (n, 3)."""
    if v.mask is None:
        raise SamplingError("volume has no mask; patch sampling is mask-constrained")
    half = size // 2
    lo = [half] * 3
    hi = [d - size + half for d in v.dims]  # inclusive
    if any(h < l for l, h in zip(lo, hi)):
        return np.empty((0, 3), dtype=np.intp)
    region = v.mask[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    centers = np.argwhere(region)
    centers += np.array(lo, dtype=np.intp)
    return centers


def sample_patches(
    v: Volume, n: int, size: int, seed: int, source_id: str = ""
) -> list[Patch]:
    """Draw ``n`` patches of edge length ``size`` with centers sampled
    uniformly, with replacement, from the valid mask voxels.

    Deterministic for a fixed (volume, n, size, seed).
    """
    centers = valid_patch_centers(v, size)
    if len(centers) == 0:
        raise SamplingError(
            f"no valid center: mask empty or volume {v.dims} too small for size {size}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    half = size // 2
    picks = rng.integers(0, len(centers), size=n)
    patches = []
    for c in centers[picks]:
        ox, oy, oz = (int(c[0]) - half, int(c[1]) - half, int(c[2]) - half)
        values = v.data[ox : ox + size, oy : oy + size, oz : oz + size].copy()
        patches.append(Patch(origin=(ox, oy, oz), size=size, values=values, source_id=source_id))
    return patches


def _interior_ellipsoid(dims: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean ellipsoid mask standing in for a lung region, plus its center
    and semi-axes in voxel units.  Semi-axes are 0.42 of each extent."""
    center = np.array([(d - 1) / 2.0 for d in dims])
    semi = np.array([0.42 * d for d in dims])
    grids = np.ogrid[: dims[0], : dims[1], : dims[2]]
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi))
    return r2 <= 1.0, center, semi


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, np.ndarray, float]:
    """Synthesize a phantom volume with spherical low-intensity lesions.

    Returns ``(volume, lesion_mask, lesion_fraction)`` where the volume's
    mask is an interior ellipsoid, ``lesion_mask`` marks lesion voxels and
    ``lesion_fraction`` is the lesion share of the masked region.

    The construction: Gaussian background noise, lesion-intensity noise
    replacing the background inside each sphere, then one global Gaussian
    smoothing pass at ``smoothing_mm``, and finally int16 quantization.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    dims, spacing = spec.dims, np.array(spec.spacing)
    data = rng.normal(spec.background_mean, spec.background_std, size=dims)
    mask, center, semi = _interior_ellipsoid(dims)
    lesion_mask = np.zeros(dims, dtype=bool)

    count = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    grids = np.ogrid[: dims[0], : dims[1], : dims[2]]
    for _ in range(count):
        radius = float(rng.uniform(*spec.lesion_radius_mm))
        shrunk = semi - radius / spacing
        if np.any(shrunk <= 0):
            raise PhantomError(
                f"lesion radius {radius:.1f} mm exceeds the masked extent of dims {dims}"
            )
        # rejection-sample a center inside the shrunken ellipsoid
        while True:
            c = np.array([rng.uniform(ci - ai, ci + ai) for ci, ai in zip(center, shrunk)])
            if np.sum(((c - center) / shrunk) ** 2) <= 1.0:
                break
        d2 = sum(((g - ci) * si) ** 2 for g, ci, si in zip(grids, c, spacing))
        sphere = d2 <= radius**2
        data[sphere] = rng.normal(spec.lesion_mean, spec.lesion_std, size=int(sphere.sum()))
        lesion_mask |= sphere

    if spec.smoothing_mm > 0:
        sigma_vox = spec.smoothing_mm / spacing
        data = smooth3(data, sigma_vox)
    data = np.clip(np.rint(data), -32768, 32767).astype("<i2")

    n_mask = int(mask.sum())
    lesion_fraction = float((lesion_mask & mask).sum()) / n_mask if n_mask else 0.0
    vol = Volume(data=data, spacing=tuple(spec.spacing), mask=mask)
    return vol, lesion_mask, lesion_fraction


def synthetic_expert_masks(
    lesion_mask: np.ndarray,
    keep_prob: tuple[float, float],
    ring_add_prob: tuple[float, float],
    ring_voxels: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Derive two corrupted "expert" annotations from lesion ground truth.

    Expert k keeps each lesion voxel with probability ``keep_prob[k]`` and
    adds each voxel of the surrounding dilation ring (width ``ring_voxels``)
    with probability ``ring_add_prob[k]``, emulating under- and over-drawn
    manual outlines.  Returns ``(mask_a, mask_b, expected_dice)`` where the
    expected Dice follows from the corruption levels and the realized voxel
    counts:

        dice = 2 (pa pb G + aa ab R) / ((pa + pb) G + (aa + ab) R)

    with G lesion voxels and R ring voxels.
    """
    from scipy.ndimage import binary_dilation

    rng = np.random.Generator(np.random.PCG64(seed))
    ring = binary_dilation(lesion_mask, iterations=ring_voxels) & ~lesion_mask
    n_core, n_ring = int(lesion_mask.sum()), int(ring.sum())

    masks = []
    for keep, add in zip(keep_prob, ring_add_prob):
        m = np.zeros(lesion_mask.shape, dtype=bool)
        m[lesion_mask] = rng.random(n_core) < keep
        m[ring] = rng.random(n_ring) < add
        masks.append(m)
    pa, pb = keep_prob
    aa, ab = ring_add_prob
    num = 2.0 * (pa * pb * n_core + aa * ab * n_ring)
    den = (pa + pb) * n_core + (aa + ab) * n_ring
    expected = num / den if den > 0 else 1.0
    return masks[0], masks[1], expected
