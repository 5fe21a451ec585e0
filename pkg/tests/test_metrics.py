import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexipatch.metrics import (
    SpectralReport,
    band_errors,
    bsnmse,
    harmonic_bins,
    harmonic_spike_score,
    log_bands,
    radial_power,
    residual_spectrum,
    vrmse,
    write_csv,
    write_json,
    write_spectrum_csv,
)
from oracles import band_index_loop, patch_tiling

seeds = st.integers(0, 2**31 - 1)


class TestVRMSE:
    def test_perfect_is_zero(self, rng):
        t = rng.standard_normal((2, 8, 8, 3))
        assert np.all(vrmse(t, t) == 0)

    def test_mean_predictor_is_one(self, rng):
        t = rng.standard_normal((8, 8, 1)) * 3 + 2
        v = vrmse(np.full_like(t, t.mean()), t)
        assert v.shape == (1,)
        assert v[0] == pytest.approx(1.0, rel=1e-6)

    def test_per_channel_and_leading_axes(self, rng):
        p, t = rng.standard_normal((2, 3, 8, 8, 2))
        v = vrmse(p, t)
        assert v.shape == (3, 2)
        ref = np.sqrt(np.mean((p[..., 0] - t[..., 0]) ** 2, axis=(1, 2)) / (t[..., 0].var(axis=(1, 2)) + 1e-7))
        np.testing.assert_allclose(v[:, 0], ref, rtol=1e-12)

    def test_constant_truth_is_finite(self):
        t = np.ones((4, 4, 1))
        assert np.isfinite(vrmse(t + 0.1, t)).all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            vrmse(np.zeros((4, 4, 1)), np.zeros((4, 4, 2)))

    @settings(max_examples=100, deadline=None)
    @given(seed=seeds, a=st.floats(0.1, 10.0), b=st.floats(-10.0, 10.0), neg=st.booleans())
    def test_affine_invariance_exact_without_eps(self, seed, a, b, neg):
        r = np.random.default_rng(seed)
        p, t = r.standard_normal((2, 8, 8, 2))
        a = -a if neg else a
        base = vrmse(p, t, eps=0.0)
        np.testing.assert_allclose(vrmse(a * p + b, a * t + b, eps=0.0), base, rtol=1e-10, atol=0)

    @settings(max_examples=100, deadline=None)
    @given(seed=seeds, a=st.floats(0.1, 10.0), b=st.floats(-10.0, 10.0))
    def test_affine_deviation_bounded_by_eps(self, seed, a, b):
        # with the stabilizer the deviation is at most eps / (2 var) * |1 - a^-2| relative
        r = np.random.default_rng(seed)
        p, t = r.standard_normal((2, 8, 8, 2))
        var = t.var(axis=(0, 1))
        bound = 1e-7 / (2 * var) * abs(1 - a**-2) * 1.01 + 1e-12
        base = vrmse(p, t)
        rel = np.abs(vrmse(a * p + b, a * t + b) - base) / base
        assert np.all(rel <= bound)


class TestBands:
    @pytest.mark.parametrize("H,W", [(64, 64), (32, 48), (16, 16), (12, 20)])
    def test_masks_match_loop_oracle(self, H, W):
        masks = log_bands(H, W).masks()
        ref = band_index_loop(H, W)
        got = np.full((H, W), -1)
        for b, m in enumerate(masks):
            assert np.all(got[m] == -1), "bands overlap"
            got[m] = b
        assert np.array_equal(got, ref)

    def test_edges(self):
        e = log_bands(64, 64).edges
        kmax = np.hypot(32, 32)
        np.testing.assert_allclose(e, [1.0, kmax ** (1 / 3), kmax ** (2 / 3), kmax])

    def test_band_of(self):
        b = log_bands(64, 64)
        assert b.band_of(0.0) is None
        assert b.band_of(1.0) == 0
        assert b.band_of(b.edges[1]) == 1
        assert b.band_of(b.edges[3]) == 2

    def test_too_small(self):
        with pytest.raises(ValueError):
            log_bands(2, 8)

    def test_half_masks_match_full(self):
        b = log_bands(16, 12)
        for full, half in zip(b.masks(), b.masks(half=True)):
            assert np.array_equal(full[:, :7], half)


class TestBSNMSE:
    def test_zero_prediction_is_one(self, rng):
        t = rng.standard_normal((2, 32, 32, 1))
        np.testing.assert_allclose(bsnmse(np.zeros_like(t), t), 1.0, rtol=1e-12)

    def test_perfect_is_zero(self, rng):
        t = rng.standard_normal((32, 32, 1))
        assert np.all(bsnmse(t, t) == 0)

    def test_empty_band_is_nan(self):
        i = np.arange(64)
        t = np.cos(2 * np.pi * 2 * i / 64)[:, None, None] * np.ones((1, 64, 1))
        out = bsnmse(np.zeros_like(t), t)
        assert out[0] == pytest.approx(1.0)
        assert np.isnan(out[1]) and np.isnan(out[2])

    def test_error_confined_to_its_band(self, rng):
        t = rng.standard_normal((32, 32, 1))
        i = np.arange(32)
        bump = 0.1 * np.cos(2 * np.pi * 12 * i / 32)[:, None, None] * np.ones((1, 32, 1))
        out = bsnmse(t + bump, t)
        assert out[0] < 1e-25 and out[1] < 1e-25 and out[2] > 0

    def test_constructed_case_against_loop_bands(self, rng):
        # truth: one mode in the middle band; prediction exact there, plus noise in the top band only
        H = 64
        idx = band_index_loop(H, H)
        i, j = np.meshgrid(np.arange(H), np.arange(H), indexing="ij")
        truth = np.cos(2 * np.pi * (5 * i + 2 * j) / H)
        assert idx[5, 2] == 1
        X = np.fft.fft2(rng.standard_normal((H, H)))
        X[idx != 2] = 0
        noise = np.fft.ifft2(X).real
        out = bsnmse((truth + noise)[..., None], truth[..., None])
        assert np.isnan(out[0]) and np.isnan(out[2])
        assert out[1] < 1e-25
        assert band_errors((truth + noise)[..., None], truth[..., None])[2] > 0

    @settings(max_examples=100, deadline=None)
    @given(seed=seeds, h=st.sampled_from([8, 12, 16, 32]), w=st.sampled_from([8, 12, 16, 32]))
    def test_parseval_decomposition(self, seed, h, w):
        # band errors times band energies recombine to the MSE of the mean-free residual
        r = np.random.default_rng(seed)
        p, t = r.standard_normal((2, 2, h, w, 2))
        res = p - t
        total = np.mean((res - res.mean(axis=(1, 2), keepdims=True)) ** 2)
        errs = band_errors(p, t)
        assert abs(errs.sum() - total) <= 1e-8 * total
        # band energies straight from the FFT
        V = np.fft.fft2(np.moveaxis(t, -1, -3))
        n_slices = V.size // (h * w)
        energies = np.array([np.sum(np.abs(V[..., m]) ** 2) / n_slices / (h * w) ** 2 for m in log_bands(h, w).masks()])
        np.testing.assert_allclose(bsnmse(p, t) * energies, errs, rtol=1e-8)


class TestRadialPower:
    def test_total_power_is_mean_square(self, rng):
        # band-limit so every mode rounds into a kept bin, then undo the per-bin averaging
        X = np.fft.fft2(rng.standard_normal((16, 16)))
        m = np.fft.fftfreq(16) * 16
        idx = np.rint(np.hypot(m[:, None], m[None, :])).astype(int)
        X[idx > 8] = 0
        x = np.fft.ifft2(X).real
        counts = np.bincount(idx.ravel(), minlength=9)[:9]
        assert np.sum(radial_power(x) * counts) == pytest.approx(np.mean(x**2), rel=1e-12)

    def test_single_mode_in_its_bin(self):
        i = np.arange(32)
        x = np.cos(2 * np.pi * 5 * i / 32)[:, None] * np.ones((1, 32))
        P = radial_power(x)
        assert np.argmax(P) == 5
        assert P[5] / P.sum() > 1 - 1e-12

    def test_white_noise_flat(self):
        P = np.mean([radial_power(np.random.default_rng(s).standard_normal((64, 64))) for s in range(20)], axis=0)
        expected = 1.0 / (64 * 64)
        np.testing.assert_allclose(P[3:], expected, rtol=0.25)

    def test_white_noise_no_bin_above_three_medians(self):
        P = np.mean([radial_power(np.random.default_rng(s).standard_normal((64, 64))) for s in range(20)], axis=0)
        assert P[1:].max() <= 3 * np.median(P[1:])

    def test_zero_residual(self):
        assert np.all(residual_spectrum(np.ones((8, 8)), np.ones((8, 8))).power == 0)

    def test_tiling_peaks_at_harmonics(self):
        P = radial_power(patch_tiling(64, 64, 16))
        peaks = set(np.flatnonzero(P > 1e-20 * P.max()))
        assert peaks <= {0, 4, 8, 12, 16, 20, 24, 28, 32}
        assert {4, 8, 12} <= peaks

    def test_stack_averaged(self, rng):
        x = rng.standard_normal((3, 16, 16))
        np.testing.assert_allclose(radial_power(x), np.mean([radial_power(s) for s in x], axis=0), rtol=1e-12)

    def test_residual_spectrum(self, rng):
        p, t = rng.standard_normal((2, 16, 16))
        rep = residual_spectrum(p, t, {"run": "x"})
        np.testing.assert_array_equal(rep.power, radial_power(p - t))
        assert rep.meta == {"run": "x"} and list(rep.k) == list(range(9))
        with pytest.raises(ValueError):
            residual_spectrum(np.zeros(4), np.zeros(4))
        with pytest.raises(ValueError):
            residual_spectrum(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSpikeScore:
    def test_harmonic_bins(self):
        assert harmonic_bins(16, 64, 33) == [4, 8, 12, 16, 20, 24, 28]
        assert harmonic_bins(8, 64, 33) == [8, 16, 24]
        with pytest.raises(ValueError):
            harmonic_bins(5, 64, 33)

    def test_too_few_harmonics(self):
        rep = SpectralReport(np.ones(33))
        with pytest.raises(ValueError, match="need 2"):
            harmonic_spike_score(rep, 4, 64)

    def test_tiling_scores_high_and_noise_low(self):
        H = 64
        art = patch_tiling(H, H, 16)
        noise = np.random.default_rng(0).standard_normal((H, H))
        art_rep = residual_spectrum(art + noise, np.zeros((H, H)))
        noise_rep = residual_spectrum(noise, np.zeros((H, H)))
        s_art = harmonic_spike_score(art_rep, 16, H)
        s_noise = harmonic_spike_score(noise_rep, 16, H)
        assert art_rep.scores[16] == s_art
        assert s_art > 10 * s_noise

    def test_checkerboard_construction(self):
        # a pure tiling has power only at harmonics, so each excess is measured against the floor
        H = 64
        rep = residual_spectrum(patch_tiling(H, H, 16), np.zeros((H, H)))
        assert harmonic_spike_score(rep, 16, H) > 1e6

    def test_scale_invariant(self, rng):
        r = 0.3 * patch_tiling(64, 64, 16) + rng.standard_normal((64, 64))
        a = harmonic_spike_score(residual_spectrum(r, np.zeros_like(r)), 16, 64)
        b = harmonic_spike_score(residual_spectrum(7.5 * r, np.zeros_like(r)), 16, 64)
        assert b == pytest.approx(a, rel=1e-10)

    def test_noise_below_periodic_residual_of_equal_energy(self):
        H = 64
        art = patch_tiling(H, H, 16)
        art /= art.std()
        for s in range(20):
            noise = np.random.default_rng(s).standard_normal((H, H))
            noise /= noise.std()
            s_noise = harmonic_spike_score(residual_spectrum(noise, np.zeros_like(noise)), 16, H)
            s_art = harmonic_spike_score(residual_spectrum(art, np.zeros_like(art)), 16, H)
            assert s_noise < s_art

    def test_zero_spectrum_scores_zero(self):
        assert harmonic_spike_score(SpectralReport(np.zeros(33)), 16, 64) == 0.0

    def test_flat_spectrum_scores_zero(self):
        assert harmonic_spike_score(SpectralReport(np.ones(33)), 16, 64) == 0.0

    def test_spike_added_at_harmonic(self):
        P = np.ones(33)
        P[8] = 3.0
        assert harmonic_spike_score(SpectralReport(P), 16, 64) == pytest.approx(2.0)
        P = np.ones(33)
        P[9] = 3.0  # off-harmonic bump only moves medians
        assert harmonic_spike_score(SpectralReport(P), 16, 64) == 0.0


class TestWriters:
    def test_csv_round_trip_exact(self, tmp_path):
        v = 0.1 + 0.2
        write_csv(tmp_path / "a.csv", [{"x": v, "n": np.int64(3), "s": "a"}])
        rows = list(csv.DictReader(open(tmp_path / "a.csv")))
        assert float(rows[0]["x"]) == v and rows[0]["n"] == "3"

    def test_csv_empty(self, tmp_path):
        write_csv(tmp_path / "e.csv", [])
        assert (tmp_path / "e.csv").read_text() == ""

    def test_json_sorted_and_numpy_aware(self, tmp_path):
        write_json(tmp_path / "a.json", {"b": np.arange(2), "a": np.float32(1.5)})
        text = (tmp_path / "a.json").read_text()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": 1.5, "b": [0, 1]}
        with pytest.raises(TypeError):
            write_json(tmp_path / "b.json", {"x": object()})

    def test_spectrum_csv(self, tmp_path):
        write_spectrum_csv(tmp_path / "s.csv", SpectralReport(np.array([1.0, 0.5])))
        assert (tmp_path / "s.csv").read_text() == "k,power\n0,1.0\n1,0.5\n"
