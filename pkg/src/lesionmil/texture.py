"""Texture descriptors for cubic patches.

Two families are computed per patch:

* co-occurrence statistics: gray levels are quantized with a fixed window,
  a symmetric normalized co-occurrence matrix is accumulated for each of 13
  3D directions at 5 displacement multiples, and 12 scalar statistics are
  taken from each matrix (13 * 5 * 12 = 780 values with defaults);
* Gaussian filter-bank histograms: 8 filter responses at 4 physical scales,
  each summarized by an adaptive 10-bin histogram (8 * 4 * 10 = 320 values
  with defaults).

Derivatives are central differences of the Gaussian-smoothed patch (mirror
boundary), with scales converted to per-axis voxel sigmas through the voxel
spacing so they stay physically isotropic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from lesionmil._gauss import diff1, diff2, gaussian_kernel, smooth3
from lesionmil.volume import Patch


class FeatureError(ValueError):
    """A patch or parameter set cannot produce the requested features."""


class DegenerateBinsError(FeatureError):
    """A response sample is too concentrated to define 10 distinct bins."""


# Unique half of the 26-neighborhood, in the documented block order.
COOC_DIRECTIONS: tuple[tuple[int, int, int], ...] = (
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1),
    (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
)
COOC_DISTANCES: tuple[int, ...] = (1, 2, 3, 4, 5)
COOC_WINDOW: tuple[float, float] = (-1024.0, 0.0)
COOC_LEVELS = 32

HARALICK_NAMES = (
    "energy", "entropy", "correlation", "contrast", "homogeneity", "variance",
    "sum_mean", "inverse_difference_moment", "inertia", "cluster_shade",
    "cluster_tendency", "max_probability",
)

GAUSS_FILTERS = (
    "smoothed", "gradient_magnitude", "laplacian",
    "hessian_eig1", "hessian_eig2", "hessian_eig3",
    "gauss_curvature", "eigen_magnitude",
)
DEFAULT_SCALES: tuple[float, ...] = (0.6, 1.2, 2.4, 4.8)
HIST_BINS = 10
MIN_SIGMA_VOX = 0.3

SCHEMAS = ("cooc", "gauss", "both")


@dataclass(frozen=True)
class FeatureVector:
    """A fixed-length descriptor plus the identifier of its recipe."""

    values: np.ndarray
    schema_id: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("feature values must be a flat vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature values must all be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def d(self) -> int:
        return self.values.size


def channel_id(filter_name: str, scale_mm: float) -> str:
    return f"{filter_name}@{scale_mm:g}mm"


def channel_ids(scales: Sequence[float] = DEFAULT_SCALES) -> list[str]:
    """Channel order used everywhere: scales ascending, filters inner."""
    return [channel_id(f, s) for s in scales for f in GAUSS_FILTERS]


@dataclass(frozen=True)
class BinningScheme:
    """Per-channel histogram edges fitted by equal-frequency (decile) binning.

    ``edges[channel]`` holds 11 edges: -inf, the 9 interior deciles of the
    fitting sample, +inf.  Outer bins are open so no response value can fall
    outside.  ``provenance`` records what sample the edges were fitted on.
    """

    edges: dict[str, np.ndarray]
    provenance: str = ""

    def __post_init__(self):
        frozen = {}
        for ch, e in self.edges.items():
            e = np.asarray(e, dtype=np.float64)
            if e.shape != (HIST_BINS + 1,):
                raise ValueError(f"channel {ch}: expected 11 edges, got {e.shape}")
            if not (np.isneginf(e[0]) and np.isposinf(e[-1])):
                raise ValueError(f"channel {ch}: outer edges must be -inf/+inf")
            if not np.all(np.diff(e[1:-1]) > 0):
                raise DegenerateBinsError(f"channel {ch}: interior edges not strictly increasing")
            e.flags.writeable = False
            frozen[ch] = e
        object.__setattr__(self, "edges", frozen)

    def interior(self, channel: str) -> np.ndarray:
        return self.edges[channel][1:-1]

    def histogram(self, channel: str, values: np.ndarray) -> np.ndarray:
        """Normalized 10-bin histogram of ``values`` (bins are left-open,
        right-closed against the interior edges)."""
        if channel not in self.edges:
            raise FeatureError(f"no binning fitted for channel {channel!r}")
        flat = np.asarray(values, dtype=np.float64).ravel()
        idx = np.searchsorted(self.interior(channel), flat, side="left")
        counts = np.bincount(idx, minlength=HIST_BINS)
        return counts / flat.size

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "interior_edges": {ch: self.interior(ch).tolist() for ch in self.edges},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinningScheme":
        edges = {
            ch: np.concatenate(([-np.inf], np.asarray(vals, float), [np.inf]))
            for ch, vals in d["interior_edges"].items()
        }
        return cls(edges=edges, provenance=d.get("provenance", ""))


# ---------------------------------------------------------------------------
# co-occurrence features


def quantize_intensities(
    values: np.ndarray, levels: int = COOC_LEVELS, window: tuple[float, float] = COOC_WINDOW
) -> np.ndarray:
    """Map intensities linearly from ``window`` onto 0..levels-1, clamping
    values outside the window.  The window is fixed (not per-patch) so
    features stay comparable across patches."""
    lo, hi = window
    scaled = (np.asarray(values, dtype=np.float64) - lo) * (levels / (hi - lo))
    return np.clip(np.floor(scaled), 0, levels - 1).astype(np.intp)


def _pair_slices(n: int, d: int) -> tuple[slice, slice]:
    # index ranges such that (v, v + d) both stay inside [0, n)
    return slice(max(0, -d), n - max(0, d)), slice(max(0, d), n - max(0, -d))


def glcm(q: np.ndarray, offset: tuple[int, int, int], levels: int) -> np.ndarray:
    """Symmetric, normalized co-occurrence matrix of quantized volume ``q``
    for one displacement vector.  Raises FeatureError when no voxel pair
    fits inside the patch."""
    slices = [_pair_slices(n, d) for n, d in zip(q.shape, offset)]
    a = q[slices[0][0], slices[1][0], slices[2][0]]
    b = q[slices[0][1], slices[1][1], slices[2][1]]
    if a.size == 0:
        raise FeatureError(
            f"patch of dims {q.shape} has no voxel pairs at displacement {offset}"
        )
    counts = np.bincount(a.ravel() * levels + b.ravel(), minlength=levels * levels)
    counts = counts.reshape(levels, levels).astype(np.float64)
    sym = counts + counts.T
    return sym / sym.sum()


@lru_cache(maxsize=8)
def _level_grids(levels: int):
    i = np.arange(levels, dtype=np.float64)[:, None]
    j = np.arange(levels, dtype=np.float64)[None, :]
    return i, j, (i - j) ** 2, np.abs(i - j), i + j


def haralick_stats(P: np.ndarray) -> np.ndarray:
    """The 12 co-occurrence statistics, in HARALICK_NAMES order.

    With P the symmetric normalized matrix, p_x its row marginal, mu and
    var the marginal mean/variance:

        energy   = sum P^2                 entropy  = -sum P ln P
        corr     = sum (i-mu)(j-mu)P / var contrast = sum (i-j)^2 P
        homog    = sum P / (1+|i-j|)       variance = var
        sum_mean = 0.5 sum (i+j) P         idm      = sum P / (1+(i-j)^2)
        inertia  = sum (i-j)^2 P           shade    = sum (i+j-2mu)^3 P
        tendency = sum (i+j-2mu)^4 P       max_prob = max P

    Correlation is defined as 0 for a degenerate (single-level) matrix.
    Contrast and inertia coincide under these definitions; both slots are
    kept so each named statistic has a fixed position.
    """
    levels = P.shape[0]
    i, j, dij2, dij_abs, sij = _level_grids(levels)
    px = P.sum(axis=1)
    mu = float(np.dot(np.arange(levels, dtype=np.float64), px))
    var = float(np.dot((np.arange(levels) - mu) ** 2, px))

    nz = P[P > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    corr = float(((i - mu) * (j - mu) * P).sum() / var) if var > 1e-24 else 0.0
    contrast = float((dij2 * P).sum())
    s_centered = sij - 2.0 * mu
    return np.array([
        float((P * P).sum()),
        entropy,
        corr,
        contrast,
        float((P / (1.0 + dij_abs)).sum()),
        var,
        float(0.5 * (sij * P).sum()),
        float((P / (1.0 + dij2)).sum()),
        contrast,
        float((s_centered**3 * P).sum()),
        float((s_centered**4 * P).sum()),
        float(P.max()),
    ])


def cooc_features(
    p: Patch,
    levels: int = COOC_LEVELS,
    distances: Sequence[int] = COOC_DISTANCES,
    window: tuple[float, float] = COOC_WINDOW,
) -> FeatureVector:
    """Co-occurrence descriptor: for every direction block (13) and distance
    (5), the 12 statistics of the symmetric normalized GLCM; 780 values with
    the default configuration.  Direction blocks are outermost, distances
    next, statistics innermost."""
    if levels < 2:
        raise FeatureError(f"need at least 2 gray levels, got {levels}")
    q = quantize_intensities(p.values, levels, window)
    out = np.empty(len(COOC_DIRECTIONS) * len(distances) * len(HARALICK_NAMES))
    pos = 0
    for direction in COOC_DIRECTIONS:
        for dist in distances:
            offset = tuple(int(c) * int(dist) for c in direction)
            P = glcm(q, offset, levels)
            out[pos : pos + 12] = haralick_stats(P)
            pos += 12
    return FeatureVector(out, "cooc")


# ---------------------------------------------------------------------------
# Gaussian filter bank


def symmetric_eigenvalues_3x3(a00, a11, a22, a01, a02, a12):
    """Eigenvalues of symmetric 3x3 matrices, vectorized over voxel arrays,
    returned sorted by signed value descending.

    Uses the trigonometric closed form; when the deviatoric part vanishes
    all three eigenvalues equal the mean diagonal.
    """
    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p2 = b00**2 + b11**2 + b22**2 + 2.0 * (a01**2 + a02**2 + a12**2)
    p = np.sqrt(p2 / 6.0)
    det_b = (
        b00 * (b11 * b22 - a12**2)
        - a01 * (a01 * b22 - a12 * a02)
        + a02 * (a01 * a12 - b11 * a02)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        r = det_b / (2.0 * p**3)
    r = np.clip(np.nan_to_num(r, nan=0.0, posinf=1.0, neginf=-1.0), -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    lam1 = q + 2.0 * p * np.cos(phi)
    lam3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    lam2 = 3.0 * q - lam1 - lam3
    return lam1, lam2, lam3


def gauss_filter_bank(
    p: Patch,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    scales: Sequence[float] = DEFAULT_SCALES,
) -> dict[str, np.ndarray]:
    """Filter responses over the patch, keyed by channel id in the order of
    :func:`channel_ids`.

    Per scale: smoothed patch, gradient magnitude, Laplacian, the three
    Hessian eigenvalues (signed, descending), Gaussian curvature (their
    product) and eigen magnitude (root sum of squares).  Derivatives are in
    physical (per-mm) units.
    """
    values = np.asarray(p.values, dtype=np.float64)
    spacing = tuple(float(s) for s in spacing)
    responses: dict[str, np.ndarray] = {}
    for scale in scales:
        sigma_vox = np.array([scale / s for s in spacing])
        if np.any(sigma_vox < MIN_SIGMA_VOX):
            raise FeatureError(
                f"scale {scale} mm gives sigma {sigma_vox.min():.3f} voxels; "
                f"minimum is {MIN_SIGMA_VOX}"
            )
        radius = max(1, math.ceil(4.0 * sigma_vox.max()))
        if radius > min(values.shape) - 1:
            raise FeatureError(
                f"patch dims {values.shape} too small for kernel radius {radius} "
                f"at scale {scale} mm"
            )
        L = smooth3(values, sigma_vox)
        gx, gy, gz = (diff1(L, a, spacing[a]) for a in range(3))
        hxx, hyy, hzz = (diff2(L, a, spacing[a]) for a in range(3))
        hxy = diff1(diff1(L, 0, spacing[0]), 1, spacing[1])
        hxz = diff1(diff1(L, 0, spacing[0]), 2, spacing[2])
        hyz = diff1(diff1(L, 1, spacing[1]), 2, spacing[2])
        lam1, lam2, lam3 = symmetric_eigenvalues_3x3(hxx, hyy, hzz, hxy, hxz, hyz)

        responses[channel_id("smoothed", scale)] = L
        responses[channel_id("gradient_magnitude", scale)] = np.sqrt(gx**2 + gy**2 + gz**2)
        responses[channel_id("laplacian", scale)] = hxx + hyy + hzz
        responses[channel_id("hessian_eig1", scale)] = lam1
        responses[channel_id("hessian_eig2", scale)] = lam2
        responses[channel_id("hessian_eig3", scale)] = lam3
        responses[channel_id("gauss_curvature", scale)] = lam1 * lam2 * lam3
        responses[channel_id("eigen_magnitude", scale)] = np.sqrt(lam1**2 + lam2**2 + lam3**2)
    return responses


def fit_adaptive_bins(
    samples: Mapping[str, np.ndarray], provenance: str = ""
) -> BinningScheme:
    """Equal-frequency decile edges per channel, with open outer bins.

    Each channel needs at least 100 sample values and enough spread that
    the nine interior deciles are strictly increasing; otherwise a
    DegenerateBinsError is raised.
    """
    deciles = np.arange(1, HIST_BINS) / HIST_BINS
    edges = {}
    for ch, sample in samples.items():
        arr = np.asarray(sample, dtype=np.float64).ravel()
        if arr.size < 100:
            raise FeatureError(f"channel {ch}: need >= 100 sample values, got {arr.size}")
        if np.unique(arr).size < HIST_BINS:
            raise DegenerateBinsError(
                f"channel {ch}: fewer than {HIST_BINS} distinct sample values"
            )
        interior = np.quantile(arr, deciles)
        if not np.all(np.diff(interior) > 0):
            raise DegenerateBinsError(f"channel {ch}: tied decile edges")
        edges[ch] = np.concatenate(([-np.inf], interior, [np.inf]))
    return BinningScheme(edges=edges, provenance=provenance)


def gauss_features(
    p: Patch,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    scales: Sequence[float] = DEFAULT_SCALES,
    bins: BinningScheme | None = None,
) -> FeatureVector:
    """Filter-bank descriptor: one normalized 10-bin histogram per channel,
    concatenated in channel order; 320 values with the default scales."""
    if bins is None:
        raise FeatureError("gauss features require a fitted BinningScheme")
    responses = gauss_filter_bank(p, spacing, scales)
    parts = [bins.histogram(ch, resp) for ch, resp in responses.items()]
    return FeatureVector(np.concatenate(parts), "gauss")


def extract(
    p: Patch,
    schema: str,
    bins: BinningScheme | None = None,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    scales: Sequence[float] = DEFAULT_SCALES,
    levels: int = COOC_LEVELS,
    distances: Sequence[int] = COOC_DISTANCES,
    window: tuple[float, float] = COOC_WINDOW,
) -> FeatureVector:
    """Dispatch to one or both feature families; ``both`` concatenates the
    co-occurrence descriptor followed by the filter-bank descriptor."""
    if schema not in SCHEMAS:
        raise FeatureError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")
    if schema == "cooc":
        return cooc_features(p, levels, distances, window)
    if schema == "gauss":
        return gauss_features(p, spacing, scales, bins)
    c = cooc_features(p, levels, distances, window)
    g = gauss_features(p, spacing, scales, bins)
    return FeatureVector(np.concatenate([c.values, g.values]), "both")


# ---------------------------------------------------------------------------
# response sketches: compact per-patch summaries that let histograms be
# re-binned under fold-specific edges without re-filtering the patch


def response_sketch(responses: Mapping[str, np.ndarray], size: int = 1024) -> np.ndarray:
    """Mid-quantile sample of each channel's response distribution.

    Returns (n_channels, size) float32, each row ascending.  Row order
    follows the mapping's iteration order (channel order for filter banks).
    """
    out = np.empty((len(responses), size), dtype=np.float32)
    for row, arr in enumerate(responses.values()):
        v = np.sort(np.asarray(arr, dtype=np.float32), axis=None)
        pos = np.minimum(((np.arange(size) + 0.5) * v.size / size).astype(np.intp), v.size - 1)
        out[row] = v[pos]
    return out


def sketch_features(sketch: np.ndarray, bins: BinningScheme, channels: Sequence[str]) -> np.ndarray:
    """Histogram features recovered from a response sketch.

    Bin mass is the sketch's empirical CDF differenced at the edges, so it
    approximates the exact per-patch histogram to within 1/size per bin.
    """
    size = sketch.shape[1]
    parts = np.empty((len(channels), HIST_BINS))
    for row, ch in enumerate(channels):
        if ch not in bins.edges:
            raise FeatureError(f"no binning fitted for channel {ch!r}")
        cum = np.searchsorted(sketch[row].astype(np.float64), bins.interior(ch), side="right")
        full = np.concatenate(([0], cum, [size]))
        parts[row] = np.diff(full) / size
    return parts.ravel()
