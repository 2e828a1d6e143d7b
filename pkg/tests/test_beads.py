"""Wiener denoising, connected-component bead extraction, model averaging."""

import numpy as np
import pytest

from mpmrestore.beads import (
    average_psf_models,
    extract_regions,
    local_centroid_um,
    wiener_denoise,
)
from mpmrestore.psf import BeadSpec, sphere_bead
from mpmrestore.simulate import gaussian_noise_for_snr, rng_for_seed
from mpmrestore.volume import Grid, Volume3D, snr_db

VS = (0.1, 0.1, 0.1)


def sphere_scene(centers, dims=(32, 32, 32), diameter=0.6):
    grid = Grid(dims, VS)
    data = np.zeros(dims)
    for c in centers:
        data += sphere_bead(BeadSpec(diameter), grid, center_um=c).data
    return Volume3D(np.minimum(data, 1.0), VS)


class TestWiener:
    def test_zero_nsr_is_identity(self):
        rng = rng_for_seed(0)
        vol = Volume3D(rng.random((8, 8, 8)), VS)
        out = wiener_denoise(vol, 0.0)
        assert np.array_equal(out.data, vol.data)

    def test_huge_nsr_suppresses_everything(self):
        rng = rng_for_seed(1)
        vol = Volume3D(rng.random((8, 8, 8)), VS)
        out = wiener_denoise(vol, 1e12)
        assert np.abs(out.data).max() < 1e-6 * np.abs(vol.data).max()

    def test_improves_snr_on_noisy_sphere(self):
        clean = sphere_scene([(0.0, 0.0, 0.0)], diameter=1.2)
        noise = gaussian_noise_for_snr(clean.data, 5.0, rng_for_seed(2))
        noisy = clean.with_data(clean.data + noise)
        denoised = wiener_denoise(noisy, 1.0)
        assert snr_db(clean, denoised) > snr_db(clean, noisy)

    def test_rejects_negative_nsr(self):
        with pytest.raises(ValueError):
            wiener_denoise(Volume3D(np.zeros((4, 4, 4)), VS), -0.5)


class TestExtractRegions:
    def test_single_sphere_single_region(self):
        vol = sphere_scene([(0.0, 0.0, 0.0)])
        regions = extract_regions(vol, 0.3)
        assert len(regions) == 1
        (x0, x1), (y0, y1), (z0, z1) = regions[0].box
        assert x0 <= 15 <= x1 and y0 <= 15 <= y1 and z0 <= 15 <= z1
        assert np.allclose(regions[0].centroid_um, 0.0, atol=0.05)

    def test_two_spheres_two_disjoint_regions(self):
        vol = sphere_scene([(-0.8, -0.8, -0.8), (0.8, 0.8, 0.8)])
        regions = extract_regions(vol, 0.3, margin_voxels=1)
        assert len(regions) == 2
        (a0, a1) = regions[0].box[0]
        (b0, b1) = regions[1].box[0]
        assert a1 < b0

    def test_touching_spheres_merge(self):
        # overlapping supra-threshold masks form one 26-connected component
        vol = sphere_scene([(-0.25, 0.0, 0.0), (0.25, 0.0, 0.0)], diameter=0.7)
        regions = extract_regions(vol, 0.3)
        assert len(regions) == 1

    def test_empty_volume_gives_no_regions(self):
        vol = Volume3D(np.zeros((8, 8, 8)), VS)
        assert extract_regions(vol, 0.3) == []

    def test_size_filters(self):
        vol = sphere_scene([(0.0, 0.0, 0.0)])
        count = extract_regions(vol, 0.3)[0].voxel_count
        assert extract_regions(vol, 0.3, min_voxels=count + 1) == []
        assert extract_regions(vol, 0.3, max_voxels=count - 1) == []
        assert len(extract_regions(vol, 0.3, min_voxels=count, max_voxels=count)) == 1

    def test_margin_clipped_to_volume(self):
        vol = sphere_scene([(0.0, 0.0, 0.0)])
        regions = extract_regions(vol, 0.3, margin_voxels=100)
        (x0, x1), (y0, y1), (z0, z1) = regions[0].box
        assert (x0, y0, z0) == (0, 0, 0)
        assert (x1, y1, z1) == (31, 31, 31)

    def test_traversal_order_invariance(self):
        vol = sphere_scene([(-0.8, 0.4, -0.2), (0.9, -0.6, 0.8)])
        regions = extract_regions(vol, 0.3)
        t = Volume3D(vol.data.transpose(2, 0, 1), VS)
        regions_t = extract_regions(t, 0.3)
        boxes = sorted(r.box for r in regions)
        # permute the transposed boxes back: axis k of t is axis (k+2)%3 of vol
        boxes_t = sorted((r.box[1], r.box[2], r.box[0]) for r in regions_t)
        assert boxes == boxes_t

    def test_threshold_validation(self):
        vol = Volume3D(np.ones((4, 4, 4)), VS)
        with pytest.raises(ValueError):
            extract_regions(vol, 0.0)
        with pytest.raises(ValueError):
            extract_regions(vol, 1.0)

    def test_crop_and_local_centroid(self):
        vol = sphere_scene([(0.3, -0.2, 0.4)], dims=(24, 24, 24), diameter=0.8)
        region = extract_regions(vol, 0.3, margin_voxels=3)[0]
        crop = region.crop(vol)
        cx, cy, cz = local_centroid_um(crop)
        # crop is asymmetric, so the local centroid compensates the offset
        grid = Grid.for_volume(vol)
        (x0, x1), (y0, y1), (z0, z1) = region.box
        center_of_crop = (
            (grid.axes[0][x0] + grid.axes[0][x1]) / 2,
            (grid.axes[1][y0] + grid.axes[1][y1]) / 2,
            (grid.axes[2][z0] + grid.axes[2][z1]) / 2,
        )
        assert cx + center_of_crop[0] == pytest.approx(0.3, abs=0.06)
        assert cy + center_of_crop[1] == pytest.approx(-0.2, abs=0.06)
        assert cz + center_of_crop[2] == pytest.approx(0.4, abs=0.06)


class TestAveragePsfModels:
    def test_identical_inputs(self):
        D = np.diag([1.0, 2.0, 3.0])
        out = average_psf_models([(0.1, 1.5, D)] * 3)
        assert out[0] == pytest.approx(0.1, rel=1e-15)
        assert out[1] == pytest.approx(1.5, rel=1e-15)
        assert np.array_equal(out[2], D)

    def test_diagonal_mean(self):
        d1, d2 = np.diag([1.0, 2.0, 3.0]), np.diag([3.0, 4.0, 5.0])
        _, _, mean = average_psf_models([(0.0, 1.0, d1), (0.2, 2.0, d2)])
        assert np.allclose(mean, np.diag([2.0, 3.0, 4.0]))

    def test_mean_of_psd_is_psd(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            A = rng.standard_normal((3, 3))
            B = rng.standard_normal((3, 3))
            _, _, mean = average_psf_models([(0, 1, A @ A.T), (0, 1, B @ B.T)])
            assert np.linalg.eigvalsh(mean).min() >= -1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            average_psf_models([])
