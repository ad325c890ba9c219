import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from waveformer import wavelet as W


@pytest.fixture
def rng():
    return np.random.default_rng(1)


@pytest.mark.parametrize("filt", [W.HAAR, W.DB2], ids=lambda f: f.name)
class TestFilters:
    def test_orthonormal_bank(self, filt):
        lo, hi = np.array(filt.analysis_lo), np.array(filt.analysis_hi)
        assert np.isclose(lo @ lo, 1) and np.isclose(hi @ hi, 1) and np.isclose(lo @ hi, 0)
        assert np.isclose(lo.sum(), math.sqrt(2)) and np.isclose(hi.sum(), 0)

    def test_matches_loop_oracle(self, rng, filt):
        x = rng.standard_normal((2, 8, 8, 8))
        want = oracles.dwt3d(x, filt.analysis_lo, filt.analysis_hi)
        np.testing.assert_allclose(W.dwt3d_stacked(x, filt), want, atol=1e-12)

    def test_roundtrip_one_level(self, rng, filt):
        x = rng.standard_normal((3, 8, 4, 6))
        np.testing.assert_allclose(W.idwt3d(W.dwt3d(x, filt), filt), x, atol=1e-12)

    def test_parseval(self, rng, filt):
        x = rng.standard_normal((2, 8, 8, 8))
        bands = W.dwt3d_stacked(x, filt)
        assert np.isclose((bands ** 2).sum(), (x ** 2).sum(), rtol=1e-12)

    def test_adjoints(self, rng, filt):
        x = rng.standard_normal((2, 4, 4, 4))
        b = rng.standard_normal((8, 2, 2, 2, 2))
        assert np.isclose(np.sum(W.dwt3d_stacked(x, filt) * b), np.sum(x * W.dwt3d_adjoint(b, filt)))
        assert np.isclose(np.sum(W.idwt3d_stacked(b, filt) * x), np.sum(b * W.idwt3d_adjoint(x, filt)))


class TestHaar3D:
    def test_lll_is_scaled_block_sum(self, rng):
        x = rng.standard_normal((2, 8, 8, 8))
        np.testing.assert_allclose(W.dwt3d(x).lll, oracles.haar_lll(x), atol=1e-12)

    def test_constant_volume(self):
        s = W.dwt3d(np.full((1, 4, 4, 4), 1.0))
        np.testing.assert_allclose(s["LLL"], 2 * math.sqrt(2))
        for band in s.details:
            np.testing.assert_allclose(band, 0, atol=1e-15)

    def test_band_names(self, rng):
        x = rng.standard_normal((1, 4, 4, 4))
        s = W.dwt3d(x)
        assert s["HHH"] is s.bands[7] and s["LLH"] is s.bands[1]
        # W-only ramp puts energy in LLH, never in the H-axis bands
        ramp = np.broadcast_to(np.tile([0.0, 1.0], 2), (1, 4, 4, 4)).copy()
        r = W.dwt3d(ramp)
        assert np.abs(r["LLH"]).max() > 0 and np.abs(r["LHL"]).max() == 0 and np.abs(r["HLL"]).max() == 0

    def test_separability_any_axis_order(self, rng):
        x = rng.standard_normal((1, 4, 4, 4))
        lo, hi = W.HAAR.analysis_lo, W.HAAR.analysis_hi
        a = x
        for axis in (1, 3, 2):
            a = W.analysis_1d(a, lo, hi, axis)[0]
        np.testing.assert_allclose(a, W.dwt3d(x).lll, atol=1e-12)

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 1, 4, 4, 4))
        np.testing.assert_allclose(W.dwt3d_stacked(2 * x - y), 2 * W.dwt3d_stacked(x) - W.dwt3d_stacked(y),
                                   atol=1e-12)

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError, match="odd extent"):
            W.dwt3d(np.zeros((1, 4, 5, 4)))


class TestMultiLevel:
    @pytest.mark.parametrize("m", [1, 2, 3])
    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
    def test_roundtrip(self, rng, m, dtype, tol):
        x = rng.standard_normal((4, 32, 32, 32)).astype(dtype)
        dec = W.dwt3d_multi(x, m)
        assert dec.lf.shape == (4,) + (32 // 2 ** m,) * 3
        assert [d.shape[0] for d in dec.details] == [7] * m
        assert dec.lf.dtype == dtype
        assert np.max(np.abs(W.idwt3d_multi(dec) - x)) <= tol

    def test_energy_partition(self, rng):
        x = rng.standard_normal((2, 16, 16, 16))
        lf, det = W.level_energies(W.dwt3d_multi(x, 3))
        assert abs(lf + sum(det) - (x ** 2).sum()) <= 1e-10 * (x ** 2).sum()

    def test_constant_energy_all_lf(self):
        lf, det = W.level_energies(W.dwt3d_multi(np.full((1, 8, 8, 8), 3.0), 3))
        assert lf > 0 and max(det) < 1e-20

    def test_lf_upsample_projection(self, rng):
        x = rng.standard_normal((1, 16, 16, 16))
        dec = W.dwt3d_multi(x, 2)
        up = W.lf_upsample(dec.lf, 2)
        assert up.shape == x.shape
        np.testing.assert_allclose(W.dwt3d_multi(up, 2).lf, dec.lf, atol=1e-12)
        # Haar LF reconstruction is the block mean
        np.testing.assert_allclose(up[0, :4, :4, :4], x[0, :4, :4, :4].mean(), atol=1e-12)

    def test_lf_upsample_adjoint(self, rng):
        a = rng.standard_normal((1, 2, 2, 2))
        g = rng.standard_normal((1, 8, 8, 8))
        assert np.isclose(np.sum(W.lf_upsample(a, 2) * g), np.sum(a * W.lf_upsample_adjoint(g, 2)))

    def test_nearest_upsample_adjoint(self, rng):
        a = rng.standard_normal((2, 2, 2, 2))
        g = rng.standard_normal((2, 4, 4, 4))
        assert np.isclose(np.sum(W.nearest_upsample(a, 1) * g), np.sum(a * W.nearest_upsample_adjoint(g, 1)))

    def test_divisibility_error_names_constraint(self):
        with pytest.raises(ValueError, match="divisible by 2\\^3"):
            W.dwt3d_multi(np.zeros((1, 12, 12, 12)), 3)

    def test_unknown_wavelet(self):
        with pytest.raises(ValueError, match="unknown wavelet"):
            W.get_filter("sym9")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 31 - 1), st.sampled_from(["haar", "db2"]))
def test_roundtrip_property(m, c, seed, name):
    x = np.random.default_rng(seed).standard_normal((c,) + (2 ** m * 2,) * 3)
    dec = W.dwt3d_multi(x, m, name)
    assert np.max(np.abs(W.idwt3d_multi(dec, name) - x)) <= 1e-12
    lf, det = W.level_energies(dec)
    assert math.isclose(lf + sum(det), float((x ** 2).sum()), rel_tol=1e-10)
