import math

import numpy as np
import pytest

from lesionmil import texture
from lesionmil._gauss import conv1d, gaussian_kernel, smooth3
from lesionmil.texture import (
    COOC_DIRECTIONS,
    BinningScheme,
    DegenerateBinsError,
    FeatureError,
    channel_id,
    channel_ids,
    cooc_features,
    extract,
    fit_adaptive_bins,
    gauss_features,
    gauss_filter_bank,
    glcm,
    quantize_intensities,
    response_sketch,
    sketch_features,
    symmetric_eigenvalues_3x3,
)
from lesionmil.volume import Patch


def make_patch(values, source_id="t"):
    values = np.asarray(values)
    return Patch(origin=(0, 0, 0), size=values.shape[0], values=values, source_id=source_id)


def random_patch(rng, size, lo=-1000, hi=-50):
    vals = rng.integers(lo, hi, size=(size, size, size)).astype(np.int16)
    return make_patch(vals)


# ---------------------------------------------------------------------------
# brute-force oracle: voxel-pair enumeration and plain-python statistics


def brute_glcm(q, offset, levels):
    counts = np.zeros((levels, levels))
    nx, ny, nz = q.shape
    dx, dy, dz = offset
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                X, Y, Z = x + dx, y + dy, z + dz
                if 0 <= X < nx and 0 <= Y < ny and 0 <= Z < nz:
                    counts[q[x, y, z], q[X, Y, Z]] += 1
    sym = counts + counts.T
    return sym / sym.sum()


def brute_haralick(P):
    levels = P.shape[0]
    px = [sum(P[i][j] for j in range(levels)) for i in range(levels)]
    mu = sum(i * px[i] for i in range(levels))
    var = sum((i - mu) ** 2 * px[i] for i in range(levels))
    energy = entropy = contrast = homog = sum_mean = idm = shade = tend = 0.0
    corr_num = 0.0
    maxp = 0.0
    for i in range(levels):
        for j in range(levels):
            p = P[i][j]
            energy += p * p
            if p > 0:
                entropy -= p * math.log(p)
            corr_num += (i - mu) * (j - mu) * p
            contrast += (i - j) ** 2 * p
            homog += p / (1 + abs(i - j))
            sum_mean += 0.5 * (i + j) * p
            idm += p / (1 + (i - j) ** 2)
            shade += (i + j - 2 * mu) ** 3 * p
            tend += (i + j - 2 * mu) ** 4 * p
            maxp = max(maxp, p)
    corr = corr_num / var if var > 1e-24 else 0.0
    return [energy, entropy, corr, contrast, homog, var, sum_mean, idm,
            contrast, shade, tend, maxp]


def brute_cooc_features(patch, levels=32, distances=(1, 2, 3, 4, 5)):
    q = quantize_intensities(patch.values, levels)
    out = []
    for direction in COOC_DIRECTIONS:
        for dist in distances:
            offset = tuple(c * dist for c in direction)
            out.extend(brute_haralick(brute_glcm(q, offset, levels)))
    return np.array(out)


class TestCooc:
    def test_output_length(self, rng):
        fv = cooc_features(random_patch(rng, 7))
        assert fv.d == 780
        assert fv.schema_id == "cooc"

    def test_constant_patch_trivials(self):
        fv = cooc_features(make_patch(np.full((7, 7, 7), -500, dtype=np.int16)))
        stats = fv.values.reshape(65, 12)
        names = texture.HARALICK_NAMES
        assert np.all(stats[:, names.index("energy")] == 1.0)
        assert np.all(stats[:, names.index("entropy")] == 0.0)
        assert np.all(stats[:, names.index("contrast")] == 0.0)
        assert np.all(stats[:, names.index("max_probability")] == 1.0)

    def test_brute_force_oracle(self, rng):
        for trial in range(20):
            size = int(rng.integers(6, 10))
            patch = random_patch(rng, size)
            got = cooc_features(patch).values
            want = brute_cooc_features(patch)
            scale = np.maximum(np.abs(want), 1.0)
            assert np.max(np.abs(got - want) / scale) < 1e-10

    def test_checker_pattern_hand_counts(self):
        # 3x3x3 checkerboard of two intensities; along +x at distance 1 each
        # of the 9 rows contributes 2 alternating pairs, so the symmetric
        # GLCM is fully off-diagonal and uniform
        a, b = -1000, -10
        vals = np.fromfunction(lambda x, y, z: (x + y + z) % 2, (3, 3, 3))
        vals = np.where(vals > 0, b, a).astype(np.int16)
        q = quantize_intensities(vals, 32)
        qa, qb = int(q.min()), int(q.max())
        P = glcm(q, (1, 0, 0), 32)
        assert P[qa, qb] == pytest.approx(0.5)
        assert P[qb, qa] == pytest.approx(0.5)
        assert P.sum() == pytest.approx(1.0)
        assert P[qa, qa] == 0.0 and P[qb, qb] == 0.0

    def test_small_patch_errors(self, rng):
        with pytest.raises(FeatureError):
            cooc_features(random_patch(rng, 5))  # distance-5 diagonal has no pairs

    def test_glcm_symmetry(self, rng):
        q = quantize_intensities(random_patch(rng, 8).values, 32)
        for direction in COOC_DIRECTIONS:
            P = glcm(q, direction, 32)
            assert np.array_equal(P, P.T)

    def test_rotation_permutes_direction_blocks(self, rng):
        patch = random_patch(rng, 8)
        rotated = make_patch(np.rot90(patch.values, k=1, axes=(0, 1)))
        base = cooc_features(patch).values.reshape(13, 5, 12)
        rot = cooc_features(rotated).values.reshape(13, 5, 12)
        # rot90 in (x, y): original direction (dx, dy, dz) appears in the
        # rotated patch as (-dy, dx, dz), canonicalized into the half-set
        perm = []
        dirs = list(COOC_DIRECTIONS)
        for d in dirs:
            mapped = (-d[1], d[0], d[2])
            if mapped not in dirs:
                mapped = tuple(-c for c in mapped)
            perm.append(dirs.index(mapped))
        for src, dst in enumerate(perm):
            assert np.array_equal(base[src], rot[dst])


# ---------------------------------------------------------------------------
# separable convolution vs dense oracle


def dense_conv3(arr, kernels):
    """Direct dense 3D convolution with mirror (numpy 'reflect') padding."""
    k3 = kernels[0][:, None, None] * kernels[1][None, :, None] * kernels[2][None, None, :]
    rx, ry, rz = (len(k) // 2 for k in kernels)
    padded = np.pad(arr, ((rx, rx), (ry, ry), (rz, rz)), mode="reflect")
    out = np.zeros_like(arr, dtype=np.float64)
    flipped = k3[::-1, ::-1, ::-1]
    nx, ny, nz = arr.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                region = padded[x : x + 2 * rx + 1, y : y + 2 * ry + 1, z : z + 2 * rz + 1]
                out[x, y, z] = float((region * flipped).sum())
    return out


class TestSeparable:
    def test_separable_equals_dense(self, rng):
        for trial in range(5):
            arr = rng.normal(0, 1, (10, 9, 11))
            sigma = 0.5 + 0.3 * trial
            ks = [gaussian_kernel(sigma)] * 3
            got = smooth3(arr, np.full(3, sigma))
            want = dense_conv3(arr, ks)
            assert np.max(np.abs(got - want)) < 1e-10 * max(1.0, np.abs(want).max())

    def test_derivative_separable_equals_dense(self, rng):
        arr = rng.normal(0, 1, (9, 9, 9))
        g = gaussian_kernel(0.8)
        d1 = np.array([0.5, 0.0, -0.5])
        got = conv1d(smooth3(arr, np.full(3, 0.8)), d1, axis=0)
        want = dense_conv3(arr, [np.convolve(g, d1), g, g])
        assert np.max(np.abs(got - want)) < 1e-10


class TestFilterBank:
    def test_constant_patch(self):
        patch = make_patch(np.full((15, 15, 15), -700, dtype=np.int16))
        resp = gauss_filter_bank(patch, (1.0, 1.0, 1.0), scales=(0.6, 1.2))
        assert len(resp) == 16
        for ch, arr in resp.items():
            if ch.startswith("smoothed"):
                assert np.allclose(arr, -700.0, rtol=1e-12)
            else:
                assert np.all(arr == 0.0), ch

    def test_channel_count(self, rng):
        resp = gauss_filter_bank(random_patch(rng, 21), (1.0, 1.0, 1.0))
        assert len(resp) == 32
        assert list(resp) == channel_ids()

    def test_quadratic_field_hessian(self):
        # I(x, y, z) = (x - c)^2 has an exact discrete second difference of 2
        # after smoothing; eigenvalues sorted descending are (2, 0, 0)
        n = 21
        x = np.arange(n, dtype=float) - n // 2
        vals = np.broadcast_to((x**2)[:, None, None], (n, n, n))
        patch = make_patch(vals.astype(np.int16))
        resp = gauss_filter_bank(patch, (1.0, 1.0, 1.0), scales=(2.0,))
        c = n // 2
        lam1 = resp[channel_id("hessian_eig1", 2.0)][c, c, c]
        lam2 = resp[channel_id("hessian_eig2", 2.0)][c, c, c]
        lam3 = resp[channel_id("hessian_eig3", 2.0)][c, c, c]
        assert lam1 == pytest.approx(2.0, rel=1e-3)
        assert abs(lam2) < 1e-6 and abs(lam3) < 1e-6

    def test_fd_oracle_on_smooth_field(self, rng):
        # derivative channels must match central differences of the smoothed
        # patch (independent finite-difference route)
        n = 17
        g = np.ogrid[:n, :n, :n]
        vals = (np.sin(0.4 * g[0]) * np.cos(0.3 * g[1]) + 0.1 * g[2] ** 2).astype(float)
        patch = make_patch(vals)
        scale = 1.5
        resp = gauss_filter_bank(patch, (1.0, 1.0, 1.0), scales=(scale,))
        L = smooth3(vals, np.full(3, scale))
        interior = (slice(2, -2),) * 3

        def fd1(a, axis):
            return (np.roll(a, -1, axis) - np.roll(a, 1, axis)) / 2.0

        def fd2(a, axis):
            return np.roll(a, -1, axis) - 2 * a + np.roll(a, 1, axis)

        grad = np.sqrt(sum(fd1(L, a) ** 2 for a in range(3)))
        lap = sum(fd2(L, a) for a in range(3))
        got_g = resp[channel_id("gradient_magnitude", scale)]
        got_l = resp[channel_id("laplacian", scale)]
        ref = max(1.0, np.abs(grad[interior]).max())
        assert np.max(np.abs(got_g[interior] - grad[interior])) < 1e-3 * ref
        assert np.max(np.abs(got_l[interior] - lap[interior])) < 1e-3 * max(1.0, np.abs(lap[interior]).max())

    def test_anisotropic_spacing_units(self):
        # same physical field sampled anisotropically: second derivative in
        # per-mm units must not depend on the grid
        n = 31
        x = (np.arange(n, dtype=float) - n // 2) * 0.5  # physical coordinate, 0.5 mm voxels
        vals = np.broadcast_to((x**2)[:, None, None], (n, n, n))
        patch = make_patch(vals)
        # scale 1.0 mm keeps the kernel interior at the center (radius 8 < 15)
        resp = gauss_filter_bank(patch, (0.5, 1.0, 1.0), scales=(1.0,))
        c = n // 2
        assert resp[channel_id("hessian_eig1", 1.0)][c, c, c] == pytest.approx(2.0, rel=1e-3)

    def test_sigma_floor(self):
        patch = make_patch(np.zeros((15, 15, 15), dtype=np.int16))
        with pytest.raises(FeatureError):
            gauss_filter_bank(patch, (4.0, 4.0, 4.0), scales=(0.6,))  # sigma 0.15 vox

    def test_patch_too_small_for_kernel(self):
        patch = make_patch(np.zeros((9, 9, 9), dtype=np.int16))
        with pytest.raises(FeatureError):
            gauss_filter_bank(patch, (1.0, 1.0, 1.0), scales=(4.8,))  # radius 20 > 8

    def test_rotation_invariant_channels(self, rng):
        vals = rng.integers(-1000, -50, (13, 13, 13)).astype(np.int16)
        patch = make_patch(vals)
        rot = make_patch(np.rot90(vals, k=1, axes=(0, 1)))
        a = gauss_filter_bank(patch, (1.0, 1.0, 1.0), scales=(1.2,))
        b = gauss_filter_bank(rot, (1.0, 1.0, 1.0), scales=(1.2,))
        # the rotated patch runs its separable passes in a different axis
        # order, so agreement is exact only up to accumulated roundoff
        for name in ("gradient_magnitude", "laplacian", "eigen_magnitude",
                     "gauss_curvature", "hessian_eig1"):
            ch = channel_id(name, 1.2)
            ref = np.abs(a[ch]).max() + 1e-30
            assert np.allclose(np.rot90(a[ch], k=1, axes=(0, 1)), b[ch],
                               rtol=1e-9, atol=1e-9 * ref), name


def test_eigenvalues_match_lapack(rng):
    mats = rng.normal(0, 1, (500, 3, 3))
    mats = (mats + mats.transpose(0, 2, 1)) / 2
    lam1, lam2, lam3 = symmetric_eigenvalues_3x3(
        mats[:, 0, 0], mats[:, 1, 1], mats[:, 2, 2],
        mats[:, 0, 1], mats[:, 0, 2], mats[:, 1, 2],
    )
    want = np.linalg.eigvalsh(mats)[:, ::-1]
    got = np.stack([lam1, lam2, lam3], axis=1)
    assert np.allclose(got, want, atol=1e-8)
    assert np.all(lam1 >= lam2 - 1e-12) and np.all(lam2 >= lam3 - 1e-12)


class TestBinning:
    def test_uniform_deciles(self, rng):
        sample = rng.uniform(0, 1, 1000)
        bins = fit_adaptive_bins({"u": sample})
        interior = bins.interior("u")
        assert np.max(np.abs(interior - np.arange(0.1, 0.95, 0.1))) < 0.03

    def test_identical_values_degenerate(self):
        with pytest.raises(DegenerateBinsError):
            fit_adaptive_bins({"c": np.full(500, 3.0)})

    def test_too_few_samples(self):
        with pytest.raises(FeatureError):
            fit_adaptive_bins({"s": np.arange(50)})

    def test_equal_frequency_on_fitting_sample(self, rng):
        sample = rng.normal(0, 1, 2000)
        bins = fit_adaptive_bins({"g": sample})
        hist = bins.histogram("g", sample)
        assert np.all(np.abs(hist - 0.1) <= 1.0 / 2000 + 1e-12)

    def test_edges_roundtrip(self, rng):
        bins = fit_adaptive_bins({"a": rng.normal(0, 1, 500)}, provenance="x")
        back = BinningScheme.from_dict(bins.to_dict())
        assert np.array_equal(back.edges["a"], bins.edges["a"])
        assert back.provenance == "x"


class TestGaussFeatures:
    @pytest.fixture()
    def fitted(self, rng):
        patch = random_patch(rng, 15)
        resp = gauss_filter_bank(patch, (1, 1, 1), scales=(0.6, 1.2))
        bins = fit_adaptive_bins({ch: r.ravel() for ch, r in resp.items()})
        return patch, bins

    def test_length_and_normalization(self, rng):
        patch = random_patch(rng, 21)
        resp = gauss_filter_bank(patch, (1, 1, 1))
        bins = fit_adaptive_bins({ch: r.ravel() for ch, r in resp.items()})
        fv = gauss_features(patch, (1, 1, 1), bins=bins)
        assert fv.d == 320
        sums = fv.values.reshape(32, 10).sum(axis=1)
        assert np.all(np.abs(sums - 1.0) < 1e-9)

    def test_constant_patch_mass_at_zero(self, rng):
        noisy = random_patch(rng, 15)
        resp = gauss_filter_bank(noisy, (1, 1, 1), scales=(0.6, 1.2))
        bins = fit_adaptive_bins({ch: r.ravel() for ch, r in resp.items()})
        const = make_patch(np.full((15, 15, 15), -600, dtype=np.int16))
        fv = gauss_features(const, (1, 1, 1), scales=(0.6, 1.2), bins=bins)
        hists = fv.values.reshape(16, 10)
        for row, ch in enumerate(channel_ids((0.6, 1.2))):
            if ch.startswith("smoothed"):
                continue
            zero_bin = int(np.searchsorted(bins.interior(ch), 0.0, side="left"))
            assert hists[row, zero_bin] == 1.0, ch

    def test_missing_channel_errors(self, fitted, rng):
        patch, bins = fitted
        with pytest.raises(FeatureError):
            gauss_features(patch, (1, 1, 1), scales=(0.6, 1.2, 2.4), bins=bins)

    def test_requires_bins(self, fitted):
        patch, _ = fitted
        with pytest.raises(FeatureError):
            gauss_features(patch, (1, 1, 1), bins=None)


class TestExtract:
    def test_both_dimensionality(self, rng):
        patch = random_patch(rng, 21)
        resp = gauss_filter_bank(patch, (1, 1, 1))
        bins = fit_adaptive_bins({ch: r.ravel() for ch, r in resp.items()})
        fv = extract(patch, "both", bins=bins)
        assert fv.d == 1100
        assert fv.schema_id == "both"

    def test_cooc_matches(self, rng):
        patch = random_patch(rng, 7)
        assert np.array_equal(extract(patch, "cooc").values, cooc_features(patch).values)

    def test_deterministic(self, rng):
        patch = random_patch(rng, 7)
        assert np.array_equal(extract(patch, "cooc").values, extract(patch, "cooc").values)

    def test_unknown_schema(self, rng):
        with pytest.raises(FeatureError):
            extract(random_patch(rng, 7), "wavelet")


class TestSketch:
    def test_sketch_histograms_close_to_exact(self, rng):
        patch = random_patch(rng, 15)
        resp = gauss_filter_bank(patch, (1, 1, 1), scales=(0.6, 1.2))
        bins = fit_adaptive_bins({ch: r.ravel() for ch, r in resp.items()})
        exact = gauss_features(patch, (1, 1, 1), scales=(0.6, 1.2), bins=bins).values
        sk = response_sketch(resp, size=1024)
        approx = sketch_features(sk, bins, channel_ids((0.6, 1.2)))
        assert np.max(np.abs(exact - approx)) < 4.0 / 1024

    def test_sketch_rows_sorted(self, rng):
        resp = gauss_filter_bank(random_patch(rng, 15), (1, 1, 1), scales=(0.6,))
        sk = response_sketch(resp, size=256)
        assert np.all(np.diff(sk, axis=1) >= 0)
