"""Dense lesion mapping on selected slices.

Mirrors the slice protocol used for manual review: pick ``count`` slices a
fixed stride apart centered in the masked z-extent, then score every
``step``-th in-mask voxel in x and y with the patch posterior of the patch
centered there.

For filter-bank features the whole volume is filtered once per scale with
mask-weighted (normalized) convolution, response = (mask.I * G)/(mask * G);
derivatives are central differences of that field.  Voxels beyond the
kernel support of the mask get response 0.  Responses are digitized into
the model's histogram bins up front, so each lattice point only needs bin
counts over its neighborhood.  Co-occurrence features are computed per
neighborhood from the raw intensities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lesionmil._gauss import diff1, diff2, gaussian_kernel, smooth3
from lesionmil.mil import MilModel, predict_instance
from lesionmil.texture import (
    BinningScheme,
    COOC_DISTANCES,
    COOC_LEVELS,
    COOC_WINDOW,
    DEFAULT_SCALES,
    FeatureError,
    GAUSS_FILTERS,
    HIST_BINS,
    channel_id,
    channel_ids,
    cooc_features,
    symmetric_eigenvalues_3x3,
)
from lesionmil.volume import Patch, Volume


@dataclass(frozen=True)
class DenseSettings:
    """Knobs of the dense-map protocol and the feature recipe it scores."""

    schema: str = "gauss"
    patch_size: int = 41
    step: int = 10
    slice_count: int = 10
    slice_stride: int = 25
    posterior_threshold: float = 0.5
    scales: tuple[float, ...] = DEFAULT_SCALES
    levels: int = COOC_LEVELS
    distances: tuple[int, ...] = COOC_DISTANCES
    window: tuple[float, float] = COOC_WINDOW


@dataclass(frozen=True)
class SliceMap:
    """Scores over the evaluated lattice of one slice."""

    z: int
    xs: np.ndarray
    ys: np.ndarray
    posteriors: np.ndarray
    labels: np.ndarray
    skipped: int


@dataclass(frozen=True)
class LesionMap:
    subject_id: str
    slices: tuple[SliceMap, ...]
    threshold: float
    slice_fallback: bool = False

    def n_evaluated(self) -> int:
        return sum(s.posteriors.size for s in self.slices)


def select_slices(v: Volume, count: int = 10, stride: int = 25) -> tuple[list[int], bool]:
    """Slice indices for dense mapping: ``count`` slices ``stride`` apart,
    centered in the masked z-extent so the top and bottom margins are equal
    within one slice.  When the extent is too short for the stride, falls
    back to even spacing across the extent and flags it."""
    if v.mask is None or not v.mask.any():
        raise ValueError("slice selection needs a non-empty mask")
    masked_z = np.flatnonzero(v.mask.any(axis=(0, 1)))
    z_min, z_max = int(masked_z[0]), int(masked_z[-1])
    extent = z_max - z_min + 1
    if count > extent:
        raise ValueError(f"mask spans {extent} slices; cannot select {count}")
    span = (count - 1) * stride + 1
    if span <= extent:
        z0 = z_min + (extent - span) // 2
        return [z0 + k * stride for k in range(count)], False
    # round-half-up keeps the indices strictly increasing (step >= 1)
    pts = np.linspace(z_min, z_max, count)
    return [int(math.floor(p + 0.5)) for p in pts], True


class DenseContext:
    """Per-volume precomputation shared by all slices: digitized filter
    responses for the filter-bank channels."""

    def __init__(self, digitized: dict[str, np.ndarray]):
        self.digitized = digitized

    @classmethod
    def build(cls, v: Volume, bins: BinningScheme | None, settings: DenseSettings) -> "DenseContext":
        if settings.schema == "cooc":
            return cls(digitized={})
        if bins is None:
            raise FeatureError("filter-bank dense maps need the model's BinningScheme")
        if v.mask is None:
            raise ValueError("dense mapping needs a masked volume")
        data = np.asarray(v.data, dtype=np.float64)
        weight = v.mask.astype(np.float64)
        weighted = data * weight
        digitized: dict[str, np.ndarray] = {}
        for scale in settings.scales:
            sigma_vox = np.array([scale / s for s in v.spacing])
            num = smooth3(weighted, sigma_vox)
            den = smooth3(weight, sigma_vox)
            L = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
            gx, gy, gz = (diff1(L, a, v.spacing[a]) for a in range(3))
            hxx, hyy, hzz = (diff2(L, a, v.spacing[a]) for a in range(3))
            hxy = diff1(diff1(L, 0, v.spacing[0]), 1, v.spacing[1])
            hxz = diff1(diff1(L, 0, v.spacing[0]), 2, v.spacing[2])
            hyz = diff1(diff1(L, 1, v.spacing[1]), 2, v.spacing[2])
            lam1, lam2, lam3 = symmetric_eigenvalues_3x3(hxx, hyy, hzz, hxy, hxz, hyz)
            responses = {
                channel_id("smoothed", scale): L,
                channel_id("gradient_magnitude", scale): np.sqrt(gx**2 + gy**2 + gz**2),
                channel_id("laplacian", scale): hxx + hyy + hzz,
                channel_id("hessian_eig1", scale): lam1,
                channel_id("hessian_eig2", scale): lam2,
                channel_id("hessian_eig3", scale): lam3,
                channel_id("gauss_curvature", scale): lam1 * lam2 * lam3,
                channel_id("eigen_magnitude", scale): np.sqrt(lam1**2 + lam2**2 + lam3**2),
            }
            for ch, resp in responses.items():
                idx = np.searchsorted(bins.interior(ch), resp.ravel(), side="left")
                digitized[ch] = idx.astype(np.uint8).reshape(resp.shape)
        return cls(digitized=digitized)


def _lattice_points(v: Volume, z: int, step: int, half: int) -> tuple[list, list, int]:
    nx, ny, nz = v.dims
    xs, ys, skipped = [], [], 0
    in_z = half <= z < nz - half
    for x in range(0, nx, step):
        for y in range(0, ny, step):
            if not v.mask[x, y, z]:
                continue
            if not in_z or not (half <= x < nx - half) or not (half <= y < ny - half):
                skipped += 1
                continue
            xs.append(x)
            ys.append(y)
    return xs, ys, skipped


def classify_slice(
    v: Volume,
    z: int,
    model,
    bins: BinningScheme | None,
    settings: DenseSettings = DenseSettings(),
    ctx: DenseContext | None = None,
) -> SliceMap:
    """Score the in-mask lattice of one slice.

    ``model`` is a fitted MilModel, or any callable mapping a feature matrix
    to posteriors (handy for stubs), or a float for a constant-posterior
    stub.  Lattice points whose patch would leave the volume are skipped and
    counted."""
    if v.mask is None:
        raise ValueError("dense mapping needs a masked volume")
    size = settings.patch_size
    half = size // 2
    xs, ys, skipped = _lattice_points(v, z, settings.step, half)
    if not xs:
        post = np.empty(0)
    elif isinstance(model, (int, float)):
        post = np.full(len(xs), float(model))
    else:
        if ctx is None:
            ctx = DenseContext.build(v, bins, settings)
        feats = _lattice_features(v, z, xs, ys, half, bins, settings, ctx)
        post = model(feats) if callable(model) else predict_instance(model, feats)
        post = np.asarray(post, dtype=np.float64)
    labels = post >= settings.posterior_threshold
    return SliceMap(z=z, xs=np.array(xs, dtype=int), ys=np.array(ys, dtype=int),
                    posteriors=post, labels=labels, skipped=skipped)


def _lattice_features(v, z, xs, ys, half, bins, settings, ctx) -> np.ndarray:
    n_vox = settings.patch_size**3
    rows = []
    chans = channel_ids(settings.scales)
    for x, y in zip(xs, ys):
        sl = (slice(x - half, x + half + 1), slice(y - half, y + half + 1),
              slice(z - half, z + half + 1))
        parts = []
        if settings.schema in ("cooc", "both"):
            patch = Patch(origin=(x - half, y - half, z - half), size=settings.patch_size,
                          values=v.data[sl])
            parts.append(cooc_features(patch, settings.levels, settings.distances,
                                       settings.window).values)
        if settings.schema in ("gauss", "both"):
            hist = np.empty((len(chans), HIST_BINS))
            for row, ch in enumerate(chans):
                counts = np.bincount(ctx.digitized[ch][sl].ravel(), minlength=HIST_BINS)
                hist[row] = counts / n_vox
            parts.append(hist.ravel())
        rows.append(np.concatenate(parts))
    return np.vstack(rows)


def dense_map(
    v: Volume,
    subject_id: str,
    model,
    bins: BinningScheme | None,
    settings: DenseSettings = DenseSettings(),
) -> LesionMap:
    """Full slice protocol for one subject: slice selection plus per-slice
    classification, with the volume filtered once."""
    indices, fallback = select_slices(v, settings.slice_count, settings.slice_stride)
    ctx = None
    if not isinstance(model, (int, float)):
        ctx = DenseContext.build(v, bins, settings)
    slices = tuple(
        classify_slice(v, z, model, bins, settings, ctx=ctx) for z in indices
    )
    return LesionMap(subject_id=subject_id, slices=slices,
                     threshold=settings.posterior_threshold, slice_fallback=fallback)


def lesion_percentage(lmap: LesionMap) -> float:
    """Positive share of all evaluated lattice points, pooled over slices."""
    n = lmap.n_evaluated()
    if n == 0:
        raise ValueError("lesion map has no evaluated points")
    pos = sum(int(s.labels.sum()) for s in lmap.slices)
    return 100.0 * pos / n


def mask_percentage_on_slices(mask: np.ndarray, lung: np.ndarray, slices) -> float:
    """Percentage of in-lung voxels covered by ``mask`` on the given slices;
    the annotation-area analogue of the classifier percentage."""
    total = hit = 0
    for z in slices:
        lz = lung[:, :, z]
        total += int(lz.sum())
        hit += int((mask[:, :, z] & lz).sum())
    if total == 0:
        raise ValueError("no in-lung voxels on the selected slices")
    return 100.0 * hit / total


def lesion_map_rows(lmap: LesionMap) -> list[tuple]:
    """CSV rows (subject, z, x, y, posterior, label), slice-major."""
    rows = []
    for s in lmap.slices:
        for x, y, p, l in zip(s.xs, s.ys, s.posteriors, s.labels):
            rows.append((lmap.subject_id, s.z, int(x), int(y), float(p), int(l)))
    return rows


def slice_overlay_pgm(lmap: LesionMap, slice_index: int, dims: tuple[int, int, int]) -> bytes:
    """Binary PGM (P5) for one selected slice: unevaluated pixels are 0,
    evaluated pixels carry 1 + round(254 * posterior), a linear 8-bit
    quantization that never collides with the background."""
    s = lmap.slices[slice_index]
    img = np.zeros((dims[0], dims[1]), dtype=np.uint8)
    vals = 1 + np.floor(s.posteriors * 254.0 + 0.5).astype(np.uint8)
    img[s.xs, s.ys] = vals
    header = f"P5\n{dims[1]} {dims[0]}\n255\n".encode()
    return header + img.tobytes()
