"""Volume container, convolution (vs direct-summation oracles), metrics, I/O."""

import numpy as np
import pytest

from mpmrestore.errors import ShapeError, VolumeDataError
from mpmrestore.volume import (
    Grid,
    Kernel3D,
    Volume3D,
    convolve_circular,
    convolve_zeropad,
    dft_max_power,
    dirac_kernel,
    prd_percent,
    read_volume,
    snr_db,
    write_volume,
)
from mpmrestore.psf import BeadSpec, sphere_bead

VS = (1.0, 1.0, 1.0)


def circular_conv_oracle(vol, ker):
    """Direct spatial-domain circular sum with the center-voxel convention."""
    n = vol.shape
    c = (n[0] // 2, n[1] // 2, n[2] // 2)
    out = np.zeros(n)
    for i0 in range(n[0]):
        for i1 in range(n[1]):
            for i2 in range(n[2]):
                acc = 0.0
                for j0 in range(n[0]):
                    for j1 in range(n[1]):
                        for j2 in range(n[2]):
                            k0 = (i0 - j0 + c[0]) % n[0]
                            k1 = (i1 - j1 + c[1]) % n[1]
                            k2 = (i2 - j2 + c[2]) % n[2]
                            acc += vol[j0, j1, j2] * ker[k0, k1, k2]
                out[i0, i1, i2] = acc
    return out


def zeropad_conv_oracle(vol, ker):
    """Direct zero-padded summation with the center-voxel convention."""
    n = vol.shape
    c = (n[0] // 2, n[1] // 2, n[2] // 2)
    out = np.zeros(n)
    for i0 in range(n[0]):
        for i1 in range(n[1]):
            for i2 in range(n[2]):
                acc = 0.0
                for j0 in range(n[0]):
                    for j1 in range(n[1]):
                        for j2 in range(n[2]):
                            k0 = i0 - j0 + c[0]
                            k1 = i1 - j1 + c[1]
                            k2 = i2 - j2 + c[2]
                            if 0 <= k0 < n[0] and 0 <= k1 < n[1] and 0 <= k2 < n[2]:
                                acc += vol[j0, j1, j2] * ker[k0, k1, k2]
                out[i0, i1, i2] = acc
    return out


def naive_dft_max_power(data):
    """O(N^2) DFT via explicit per-axis transform matrices (no FFT)."""
    out = data.astype(complex)
    for axis, n in enumerate(data.shape):
        k = np.arange(n)
        F = np.exp(-2j * np.pi * np.outer(k, k) / n)
        out = np.moveaxis(np.tensordot(F, np.moveaxis(out, axis, 0), axes=(1, 0)), 0, axis)
    return float(np.max(np.abs(out) ** 2))


class TestVolume3D:
    def test_dims_and_flat_order(self):
        data = np.arange(24, dtype=float).reshape(2, 3, 4)
        vol = Volume3D(data, VS)
        assert vol.dims == (2, 3, 4)
        flat = vol.flat()
        # x-fastest: the second entry advances ix
        assert flat[0] == data[0, 0, 0]
        assert flat[1] == data[1, 0, 0]
        assert flat[2] == data[0, 1, 0]

    def test_rejects_bad_voxel_size(self):
        with pytest.raises(ValueError):
            Volume3D(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))

    def test_rejects_non_3d(self):
        with pytest.raises(ShapeError):
            Volume3D(np.zeros((2, 2)), VS)


class TestGrid:
    def test_centroid_is_origin(self):
        grid = Grid((4, 5, 6), (0.5, 0.25, 2.0))
        assert np.allclose(grid.coords().sum(axis=0), 0.0, atol=1e-12)

    def test_spacing_matches_voxel_size(self):
        grid = Grid((4, 5, 6), (0.5, 0.25, 2.0))
        for ax, r in zip(grid.axes, (0.5, 0.25, 2.0)):
            assert np.allclose(np.diff(ax), r)

    def test_quad_form_matches_coords(self):
        rng = np.random.default_rng(0)
        grid = Grid((3, 4, 5), (0.7, 1.1, 0.3))
        A = rng.standard_normal((3, 3))
        S = A @ A.T + np.eye(3)
        q_field = grid.quad_form(S).ravel(order="F")
        coords = grid.coords()
        q_direct = np.einsum("ni,ij,nj->n", coords, S, coords)
        assert np.allclose(q_field, q_direct, atol=1e-12)

    def test_second_moment_matches_direct(self):
        rng = np.random.default_rng(1)
        grid = Grid((3, 4, 5), (0.7, 1.1, 0.3))
        w = rng.random((3, 4, 5))
        m = grid.second_moment(w)
        coords = grid.coords()
        direct = np.einsum("n,ni,nj->ij", w.ravel(order="F"), coords, coords)
        assert np.allclose(m, direct, atol=1e-10)


class TestConvolveCircular:
    def test_dirac_identity(self):
        rng = np.random.default_rng(2)
        vol = Volume3D(rng.standard_normal((4, 5, 6)), VS)
        out = convolve_circular(vol, dirac_kernel(vol.dims, VS))
        assert np.allclose(out.data, vol.data, atol=1e-12)

    def test_constant_with_simplex_kernel(self):
        rng = np.random.default_rng(3)
        k = rng.random((4, 4, 4))
        k /= k.sum()
        vol = Volume3D(np.full((4, 4, 4), 2.5), VS)
        out = convolve_circular(vol, Kernel3D(k, VS))
        assert np.allclose(out.data, 2.5, atol=1e-12)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(4)
        vol = rng.standard_normal((4, 4, 4))
        ker = rng.standard_normal((4, 4, 4))
        out = convolve_circular(Volume3D(vol, VS), Kernel3D(ker, VS))
        assert np.abs(out.data - circular_conv_oracle(vol, ker)).max() < 1e-10

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            convolve_circular(Volume3D(np.zeros((4, 4, 4)), VS), dirac_kernel((4, 4, 5), VS))

    def test_linearity(self):
        rng = np.random.default_rng(5)
        u = Volume3D(rng.standard_normal((8, 8, 8)), VS)
        v = Volume3D(rng.standard_normal((8, 8, 8)), VS)
        k = Kernel3D(rng.standard_normal((8, 8, 8)), VS)
        a, b = 2.3, -0.7
        lhs = convolve_circular(Volume3D(a * u.data + b * v.data, VS), k).data
        rhs = a * convolve_circular(u, k).data + b * convolve_circular(v, k).data
        assert np.abs(lhs - rhs).max() < 1e-9

    def test_total_mass_product(self):
        rng = np.random.default_rng(6)
        u = Volume3D(rng.random((6, 5, 4)) + 0.5, VS)
        k = Kernel3D(rng.random((6, 5, 4)), VS)
        total = convolve_circular(u, k).data.sum()
        expected = u.data.sum() * k.data.sum()
        assert abs(total - expected) < 1e-9 * abs(expected)

    def test_property_fft_equals_direct(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            dims = tuple(rng.integers(2, 7, size=3))
            vol = rng.standard_normal(dims)
            ker = rng.standard_normal(dims)
            out = convolve_circular(Volume3D(vol, VS), Kernel3D(ker, VS))
            assert np.abs(out.data - circular_conv_oracle(vol, ker)).max() < 1e-10


class TestConvolveZeropad:
    def test_dirac_identity(self):
        rng = np.random.default_rng(8)
        vol = Volume3D(rng.standard_normal((4, 5, 6)), VS)
        out = convolve_zeropad(vol, dirac_kernel(vol.dims, VS))
        assert np.allclose(out.data, vol.data, atol=1e-12)

    def test_impulse_no_boundary_leakage(self):
        # a bright voxel near one face must not leak across to the opposite face
        dims = (16, 16, 16)
        grid = Grid(dims, (0.2, 0.2, 0.2))
        from mpmrestore.psf import GaussianPSFParams, gaussian_kernel

        ker = gaussian_kernel(GaussianPSFParams(4.0 * np.eye(3)), grid, normalize=True)
        vol = np.zeros(dims)
        vol[2, 8, 8] = 1.0
        out = convolve_zeropad(Volume3D(vol, (0.2, 0.2, 0.2)), ker)
        shifted = np.roll(ker.data, (2 - 8, 0, 0), axis=(0, 1, 2))
        # away from the clipped region the output is the translated kernel
        assert np.abs(out.data[:10] - shifted[:10]).max() < 1e-12
        assert np.abs(out.data[-3:]).max() < np.abs(out.data).max() * 1e-6

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(9)
        vol = rng.standard_normal((4, 4, 4))
        ker = rng.standard_normal((4, 4, 4))
        out = convolve_zeropad(Volume3D(vol, VS), Kernel3D(ker, VS))
        assert np.abs(out.data - zeropad_conv_oracle(vol, ker)).max() < 1e-10

    def test_property_fft_equals_direct(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            dims = tuple(rng.integers(2, 7, size=3))
            vol = rng.standard_normal(dims)
            ker = rng.standard_normal(dims)
            out = convolve_zeropad(Volume3D(vol, VS), Kernel3D(ker, VS))
            assert np.abs(out.data - zeropad_conv_oracle(vol, ker)).max() < 1e-10


class TestDftMaxPower:
    def test_dirac_flat_spectrum(self):
        vol = np.zeros((4, 4, 4))
        vol[1, 2, 3] = 1.0
        assert dft_max_power(Volume3D(vol, VS)) == pytest.approx(1.0, abs=1e-12)

    def test_constant_dc_bin(self):
        vol = Volume3D(np.ones((4, 5, 6)), VS)
        assert dft_max_power(vol) == pytest.approx((4 * 5 * 6) ** 2, rel=1e-12)

    def test_sphere_phantom_matches_naive_oracle(self):
        grid = Grid((40, 40, 80), (0.05, 0.05, 0.1))
        bead = sphere_bead(BeadSpec(1.0), grid)
        crop = bead.data[16:24, 16:24, 36:44]
        fast = dft_max_power(Volume3D(crop, (0.05, 0.05, 0.1)))
        slow = naive_dft_max_power(crop)
        assert abs(fast - slow) < 1e-8 * abs(slow)


class TestSnr:
    def test_identical_is_capped(self):
        vol = Volume3D(np.ones((3, 3, 3)), VS)
        assert snr_db(vol, vol) == 300.0

    def test_zero_test_gives_zero_db(self):
        data = np.zeros((3, 3, 3))
        data[0, 0, 0] = 1.0
        ref = Volume3D(data, VS)
        assert snr_db(ref, ref.with_data(np.zeros_like(data))) == pytest.approx(0.0, abs=1e-12)

    def test_ten_db_construction(self):
        rng = np.random.default_rng(11)
        ref = rng.standard_normal((5, 5, 5))
        e = rng.standard_normal((5, 5, 5))
        e *= np.sqrt(0.1) * np.linalg.norm(ref) / np.linalg.norm(e)
        out = snr_db(Volume3D(ref, VS), Volume3D(ref + e, VS))
        assert out == pytest.approx(10.0, abs=1e-9)

    def test_strictly_decreasing_in_error_norm(self):
        rng = np.random.default_rng(12)
        ref = rng.standard_normal((4, 4, 4))
        e = rng.standard_normal((4, 4, 4))
        vals = [
            snr_db(Volume3D(ref, VS), Volume3D(ref + t * e, VS))
            for t in (0.1, 0.2, 0.5, 1.0, 2.0)
        ]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            snr_db(Volume3D(np.zeros((2, 2, 2)), VS), Volume3D(np.zeros((2, 2, 3)), VS))


class TestPrd:
    def _setup(self):
        grid = Grid((16, 16, 16), (0.1, 0.1, 0.1))
        bead = sphere_bead(BeadSpec(0.6), grid)
        rng = np.random.default_rng(13)
        k = rng.random((16, 16, 16))
        k /= k.sum()
        return bead, Kernel3D(k, (0.1, 0.1, 0.1))

    def test_exact_match_is_zero(self):
        bead, ker = self._setup()
        assert prd_percent((0.2, 1.5, ker), (0.2, 1.5, ker), bead) == 0.0

    def test_pure_scaling_gives_ten(self):
        bead, ker = self._setup()
        out = prd_percent((0.0, 1.1, ker), (0.0, 1.0, ker), bead)
        assert out == pytest.approx(10.0, abs=1e-10)

    def test_matches_direct_formula(self):
        bead, ker = self._setup()
        rng = np.random.default_rng(14)
        pert = ker.data + 0.01 * rng.random(ker.dims)
        pert /= pert.sum()
        ker2 = Kernel3D(pert, ker.voxel_size_um)
        out = prd_percent((0.1, 1.2, ker2), (0.15, 1.0, ker), bead)
        from mpmrestore.volume import convolve_circular as cc

        num = np.linalg.norm(
            0.1 + 1.2 * cc(bead, ker2).data - 0.15 - 1.0 * cc(bead, ker).data
        )
        den = np.linalg.norm(0.15 + 1.0 * cc(bead, ker).data)
        assert out == pytest.approx(100.0 * num / den, abs=1e-10)

    def test_zero_reference_errors(self):
        bead, ker = self._setup()
        zero = Kernel3D(np.zeros(ker.dims), ker.voxel_size_um)
        with pytest.raises(ZeroDivisionError):
            prd_percent((0.0, 1.0, ker), (0.0, 0.0, zero), bead)


class TestIO:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(15)
        data = rng.standard_normal((5, 6, 7)).astype(np.float32).astype(np.float64)
        vol = Volume3D(data, (0.05, 0.06, 0.07))
        base = str(tmp_path / "vol")
        write_volume(vol, base)
        back = read_volume(base + ".f32raw")
        assert back.dims == vol.dims
        assert back.voxel_size_um == vol.voxel_size_um
        assert np.array_equal(back.data, vol.data)

    def test_length_mismatch_rejected(self, tmp_path):
        base = str(tmp_path / "bad")
        write_volume(Volume3D(np.zeros((2, 2, 2)), VS), base)
        with open(base + ".f32raw", "wb") as fh:
            fh.write(np.zeros(7, dtype="<f4").tobytes())
        with pytest.raises(VolumeDataError, match="length"):
            read_volume(base)

    def test_nan_rejected_with_index(self, tmp_path):
        base = str(tmp_path / "nan")
        data = np.zeros((2, 2, 2), dtype="<f4")
        write_volume(Volume3D(data.astype(float), VS), base)
        raw = np.zeros(8, dtype="<f4")
        raw[5] = np.nan
        with open(base + ".f32raw", "wb") as fh:
            fh.write(raw.tobytes())
        with pytest.raises(VolumeDataError, match="flat index 5"):
            read_volume(base)
        vol = read_volume(base, allow_non_finite=True)
        assert np.isnan(vol.flat()[5])

    def test_missing_sidecar(self, tmp_path):
        base = str(tmp_path / "nosidecar")
        with open(base + ".f32raw", "wb") as fh:
            fh.write(np.zeros(8, dtype="<f4").tobytes())
        with pytest.raises(VolumeDataError, match="sidecar"):
            read_volume(base)
