import math

import numpy as np
import pytest

from lesionmil.volume import (
    HeaderError,
    PayloadSizeError,
    PhantomError,
    PhantomSpec,
    SamplingError,
    UnsupportedDtypeError,
    Volume,
    generate_phantom,
    load_volume,
    sample_patches,
    save_volume,
    synthetic_expert_masks,
    valid_patch_centers,
)


def write_pair(tmp_path, header_lines, payload, name="vol"):
    (tmp_path / f"{name}.raw").write_bytes(payload)
    hdr = tmp_path / f"{name}.hdr"
    hdr.write_text("\n".join(header_lines) + "\n", encoding="utf-8")
    return hdr


def test_load_zero_volume(tmp_path):
    hdr = write_pair(
        tmp_path,
        ["dims = 4 4 4", "spacing = 1.0 1.0 1.0", "dtype = int16", "data_file = vol.raw"],
        bytes(128),
    )
    v = load_volume(hdr)
    assert v.dims == (4, 4, 4)
    assert v.spacing == (1.0, 1.0, 1.0)
    assert not v.data.any()
    assert v.mask is None


def test_payload_size_mismatch(tmp_path):
    hdr = write_pair(
        tmp_path,
        ["dims = 2 2 2", "spacing = 1 1 1", "dtype = int16", "data_file = vol.raw"],
        bytes(14),
    )
    with pytest.raises(PayloadSizeError):
        load_volume(hdr)


def test_unsupported_dtype(tmp_path):
    hdr = write_pair(
        tmp_path,
        ["dims = 2 2 2", "spacing = 1 1 1", "dtype = float32", "data_file = vol.raw"],
        bytes(32),
    )
    with pytest.raises(UnsupportedDtypeError):
        load_volume(hdr)


@pytest.mark.parametrize("lines", [
    ["spacing = 1 1 1", "dtype = int16", "data_file = vol.raw"],          # dims missing
    ["dims = 2 2", "spacing = 1 1 1", "dtype = int16", "data_file = vol.raw"],
    ["dims = 2 2 2", "spacing = 1 1", "dtype = int16", "data_file = vol.raw"],
    ["dims = 2 2 2", "spacing = 1 1 1", "dtype = int16", "data_file = vol.raw", "bogus = 1"],
    ["dims two two two", "spacing = 1 1 1", "dtype = int16", "data_file = vol.raw"],
])
def test_malformed_headers(tmp_path, lines):
    hdr = write_pair(tmp_path, lines, bytes(16))
    with pytest.raises(HeaderError):
        load_volume(hdr)


def test_payload_is_x_fastest(tmp_path):
    data = np.zeros((2, 3, 2), dtype=np.int16)
    for x in range(2):
        for y in range(3):
            for z in range(2):
                data[x, y, z] = x + 10 * y + 100 * z
    v = Volume(data=data, spacing=(1, 1, 1))
    save_volume(v, tmp_path / "v.hdr")
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<i2")
    expected = [x + 10 * y + 100 * z for z in range(2) for y in range(3) for x in range(2)]
    assert raw.tolist() == expected


def test_round_trip_exact(tmp_path, demo_phantom):
    vol, _, _ = demo_phantom
    save_volume(vol, tmp_path / "p.hdr")
    back = load_volume(tmp_path / "p.hdr")
    assert back == vol
    assert back.spacing == vol.spacing  # full precision
    # save(load(p)) writes byte-identical files
    save_volume(back, tmp_path / "q.hdr")
    assert (tmp_path / "q.raw").read_bytes() == (tmp_path / "p.raw").read_bytes()
    assert (tmp_path / "q_mask.raw").read_bytes() == (tmp_path / "p_mask.raw").read_bytes()
    q_hdr = (tmp_path / "q.hdr").read_text().replace("q.raw", "p.raw").replace("q_mask", "p_mask")
    assert q_hdr == (tmp_path / "p.hdr").read_text()


def test_save_deterministic(tmp_path):
    spec = PhantomSpec(dims=(32, 32, 32), spacing=(1, 1, 1), background_mean=-800,
                       background_std=50, lesion_count=(1, 2), lesion_radius_mm=(3, 5),
                       lesion_mean=-950, lesion_std=30, smoothing_mm=1.0, seed=1)
    for name in ("a", "b"):
        vol, _, _ = generate_phantom(spec)
        save_volume(vol, tmp_path / f"{name}.hdr")
    assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()


def test_spacing_precision_roundtrip(tmp_path):
    v = Volume(data=np.zeros((2, 2, 2), dtype=np.int16), spacing=(0.58, 0.588, 0.6))
    save_volume(v, tmp_path / "s.hdr")
    assert load_volume(tmp_path / "s.hdr").spacing == (0.58, 0.588, 0.6)


class TestSampling:
    def test_50_patches_inside_mask(self, demo_phantom):
        vol, _, _ = demo_phantom
        patches = sample_patches(vol, 50, 41, seed=11)
        assert len(patches) == 50
        for p in patches:
            ox, oy, oz = p.origin
            assert all(0 <= o and o + 41 <= d for o, d in zip(p.origin, vol.dims))
            assert vol.mask[ox + 20, oy + 20, oz + 20]
            assert p.values.shape == (41, 41, 41)

    def test_determinism(self, demo_phantom):
        vol, _, _ = demo_phantom
        a = sample_patches(vol, 20, 41, seed=5)
        b = sample_patches(vol, 20, 41, seed=5)
        assert [p.origin for p in a] == [p.origin for p in b]

    def test_single_possible_placement(self):
        v = Volume(data=np.zeros((41, 41, 41), dtype=np.int16), spacing=(1, 1, 1),
                   mask=np.ones((41, 41, 41), dtype=bool))
        (p,) = sample_patches(v, 1, 41, seed=0)
        assert p.origin == (0, 0, 0)

    def test_all_false_mask_errors(self):
        v = Volume(data=np.zeros((50, 50, 50), dtype=np.int16), spacing=(1, 1, 1),
                   mask=np.zeros((50, 50, 50), dtype=bool))
        with pytest.raises(SamplingError):
            sample_patches(v, 1, 41, seed=0)

    def test_no_mask_errors(self):
        v = Volume(data=np.zeros((50, 50, 50), dtype=np.int16), spacing=(1, 1, 1))
        with pytest.raises(SamplingError):
            sample_patches(v, 1, 41, seed=0)

    def test_volume_smaller_than_patch(self):
        v = Volume(data=np.zeros((20, 20, 20), dtype=np.int16), spacing=(1, 1, 1),
                   mask=np.ones((20, 20, 20), dtype=bool))
        assert len(valid_patch_centers(v, 41)) == 0
        with pytest.raises(SamplingError):
            sample_patches(v, 1, 41, seed=0)


class TestPhantom:
    def test_no_lesions(self):
        spec = PhantomSpec(dims=(40, 40, 40), spacing=(1, 1, 1), background_mean=-800,
                           background_std=50, lesion_count=(0, 0), lesion_radius_mm=(3, 4),
                           lesion_mean=-950, lesion_std=30, smoothing_mm=1.0, seed=3)
        _, lesion_mask, fraction = generate_phantom(spec)
        assert fraction == 0.0
        assert not lesion_mask.any()

    def test_determinism(self):
        spec = PhantomSpec(dims=(48, 48, 48), spacing=(1, 1, 1), background_mean=-800,
                           background_std=50, lesion_count=(2, 4), lesion_radius_mm=(4, 8),
                           lesion_mean=-950, lesion_std=30, smoothing_mm=1.2, seed=9)
        va, ma, fa = generate_phantom(spec)
        vb, mb, fb = generate_phantom(spec)
        assert va == vb
        assert np.array_equal(ma, mb)
        assert fa == fb

    def test_label_consistency(self):
        for seed in range(6):
            spec = PhantomSpec(dims=(40, 40, 40), spacing=(1, 1, 1), background_mean=-800,
                               background_std=50, lesion_count=(0, 1), lesion_radius_mm=(3, 5),
                               lesion_mean=-950, lesion_std=30, smoothing_mm=0.8, seed=seed)
            _, lesion_mask, fraction = generate_phantom(spec)
            assert (fraction == 0.0) == (not lesion_mask.any())

    def test_sphere_volume_oracle(self):
        # single lesion of fixed radius: brute-force voxel count within the
        # radius matches the analytic ball volume within discretization, and
        # the reported fraction is exactly count / mask size
        r = 8.0
        spec = PhantomSpec(dims=(64, 64, 64), spacing=(1, 1, 1), background_mean=-800,
                           background_std=50, lesion_count=(1, 1), lesion_radius_mm=(r, r),
                           lesion_mean=-950, lesion_std=30, smoothing_mm=0.0, seed=21)
        vol, lesion_mask, fraction = generate_phantom(spec)
        xs, ys, zs = np.nonzero(lesion_mask)
        center = (xs.mean(), ys.mean(), zs.mean())  # sphere centroid
        n_brute = 0
        for x in range(int(xs.min()) - 2, int(xs.max()) + 3):
            for y in range(int(ys.min()) - 2, int(ys.max()) + 3):
                for z in range(int(zs.min()) - 2, int(zs.max()) + 3):
                    d2 = ((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2)
                    if d2 <= r**2:
                        n_brute += 1
        ball = (4.0 / 3.0) * math.pi * r**3
        assert abs(n_brute - ball) / ball < 0.10
        assert abs(int(lesion_mask.sum()) - n_brute) / ball < 0.05
        assert fraction == pytest.approx(lesion_mask[vol.mask].sum() / vol.mask.sum())

    def test_radius_exceeding_extent(self):
        spec = PhantomSpec(dims=(20, 20, 20), spacing=(1, 1, 1), background_mean=-800,
                           background_std=50, lesion_count=(1, 1), lesion_radius_mm=(30, 30),
                           lesion_mean=-950, lesion_std=30, smoothing_mm=0.0, seed=2)
        with pytest.raises(PhantomError):
            generate_phantom(spec)

    def test_lesion_intensity_validation(self):
        with pytest.raises(ValueError):
            PhantomSpec(dims=(20, 20, 20), spacing=(1, 1, 1), background_mean=-900,
                        background_std=50, lesion_count=(1, 1), lesion_radius_mm=(3, 3),
                        lesion_mean=-800, lesion_std=30, smoothing_mm=0.0, seed=2)


def test_expert_masks_dice_prediction(demo_phantom):
    from lesionmil.evaluation import dice

    _, lesion_mask, _ = demo_phantom
    a, b, expected = synthetic_expert_masks(lesion_mask, (0.85, 0.70), (0.15, 0.08), 2, seed=5)
    assert abs(dice(a, b) - expected) < 0.05
