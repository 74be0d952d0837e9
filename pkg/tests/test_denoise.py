import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echolocate.audio import FrameParams, Spectrogram, psnr, stft
from echolocate.denoise import (
    METHODS,
    PAPER_REFERENCE_DB,
    DegenerateHistogramError,
    MagnitudeHistogram,
    NoiseProfile,
    benchmark_denoisers,
    denoise_otsu,
    denoise_signal,
    denoise_spectral_gate,
    denoise_spectral_subtract,
    denoise_wiener,
    estimate_noise_profile,
    magnitude_db,
    magnitude_histogram,
    otsu_index,
    otsu_threshold,
)

from helpers import FS, mono, tone, tone_noise_fixture


def brute_force_otsu(counts):
    """Exhaustive between-class variance maximiser in exact rational arithmetic.

    Split ``t`` puts bins ``< t`` in the background class. Returns the
    smallest maximising ``t``.
    """
    total = sum(counts)
    best_t, best = None, Fraction(-1)
    for t in range(1, len(counts)):
        n0 = sum(counts[:t])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(sum(i * c for i, c in enumerate(counts[:t])), n0)
        mu1 = Fraction(sum(i * c for i, c in enumerate(counts) if i >= t), n1)
        var = Fraction(n0, total) * Fraction(n1, total) * (mu0 - mu1) ** 2
        if var > best:
            best_t, best = t, var
    return best_t


def spec_of(frames):
    frames = np.asarray(frames, dtype=complex)
    return Spectrogram(frames, FrameParams(), FS, 400 + 160 * (frames.shape[0] - 1))


class TestOtsu:
    def test_two_spikes(self):
        counts = [0] * 256
        counts[10] = counts[200] = 50
        hist = MagnitudeHistogram(np.array(counts), (0.0, 256.0))
        t = brute_force_otsu(counts)
        assert otsu_index(counts) == t == 11
        assert otsu_threshold(hist) == hist.level(t) == 11.0

    def test_uniform_histogram(self):
        counts = [3] * 256
        assert otsu_index(counts) == brute_force_otsu(counts) == 128

    def test_single_bin_is_degenerate(self):
        counts = [0] * 256
        counts[42] = 1000
        with pytest.raises(DegenerateHistogramError):
            otsu_index(counts)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            otsu_index([1, -1, 3])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=2, max_size=256).filter(
        lambda c: sum(1 for v in c if v) >= 2))
    def test_matches_oracle(self, counts):
        assert otsu_index(counts) == brute_force_otsu(counts)

    def test_level_maps_bin_edges(self):
        hist = MagnitudeHistogram(np.ones(4, dtype=int), (-80.0, 0.0))
        assert [hist.level(i) for i in range(5)] == [-80.0, -60.0, -40.0, -20.0, 0.0]


class TestHistogram:
    def test_counts_every_cell(self, rng):
        spec = stft(mono(rng.standard_normal(4000)))
        hist = magnitude_histogram(spec)
        assert hist.counts.sum() == spec.frames.size
        db = magnitude_db(spec)
        assert hist.range == (db.min(), db.max())


class TestDenoiseOtsu:
    def test_improves_psnr_at_10db(self):
        clean, noisy = tone_noise_fixture(10.0, seed=3)
        out = denoise_signal(noisy, "otsu")
        assert psnr(clean, out) > psnr(clean, noisy)

    def test_zero_spectrogram_unchanged(self):
        spec = spec_of(np.zeros((4, 257)))
        out = denoise_otsu(spec)
        assert out.meta["warning"] == "degenerate-histogram"
        assert np.array_equal(out.frames, spec.frames)

    def test_sparse_tone_bins_kept_exactly(self):
        spec = stft(mono(tone(40 * FS / 512, 0.2)))
        out = denoise_otsu(spec)
        k = np.argmax(np.abs(spec.frames), axis=1)
        rows = np.arange(spec.n_frames)
        assert np.array_equal(out.frames[rows, k], spec.frames[rows, k])
        kept = out.frames != 0
        assert np.array_equal(out.frames[kept], spec.frames[kept])

    def test_idempotent(self, rng):
        _, noisy = tone_noise_fixture(5.0, seed=9)
        once = denoise_otsu(stft(noisy))
        twice = denoise_otsu(once)
        assert np.array_equal(once.frames, twice.frames)

    def test_records_threshold(self, rng):
        out = denoise_otsu(stft(mono(rng.standard_normal(2000))))
        assert math.isfinite(out.meta["otsu_threshold_db"])


class TestBaselines:
    @pytest.mark.parametrize("fn", [denoise_wiener, denoise_spectral_gate, denoise_spectral_subtract])
    def test_zero_profile_is_identity(self, fn, rng):
        spec = stft(mono(rng.standard_normal(3000)))
        out = fn(spec, NoiseProfile(np.zeros(spec.n_bins), 1))
        np.testing.assert_array_equal(out.frames, spec.frames)

    def test_subtract_profile_equal_to_signal(self, rng):
        spec = stft(mono(rng.standard_normal(400)))
        out = denoise_spectral_subtract(spec, NoiseProfile(np.abs(spec.frames[0]), 1))
        assert not np.any(out.frames)

    @pytest.mark.parametrize("method", ["wiener", "spectral_gate", "spectral_subtract"])
    def test_improve_at_5db(self, method):
        clean, noisy = tone_noise_fixture(5.0, seed=21)
        assert psnr(clean, denoise_signal(noisy, method)) > psnr(clean, noisy)

    @pytest.mark.parametrize("fn", [denoise_spectral_gate, denoise_spectral_subtract])
    def test_magnitudes_never_grow(self, fn, rng):
        spec = stft(mono(rng.standard_normal(3000)))
        out = fn(spec, estimate_noise_profile(spec))
        assert np.all(np.abs(out.frames) <= np.abs(spec.frames) + 1e-15)

    def test_profile_bin_mismatch(self, rng):
        spec = stft(mono(rng.standard_normal(1000)))
        with pytest.raises(ValueError):
            denoise_wiener(spec, NoiseProfile(np.zeros(10), 1))

    def test_explicit_noise_clip(self):
        clean, noisy = tone_noise_fixture(5.0, seed=4)
        noise_only = mono(noisy.samples[0] - clean.samples[0])
        out = denoise_signal(noisy, "spectral_subtract", noise=noise_only)
        assert psnr(clean, out) > psnr(clean, noisy)


class TestDenoiseSignal:
    @pytest.mark.parametrize("method", METHODS)
    def test_shape_and_energy(self, method):
        _, noisy = tone_noise_fixture(8.0, seed=11)
        out = denoise_signal(noisy, method)
        assert out.samples.shape == noisy.samples.shape
        assert np.sum(out.samples ** 2) <= np.sum(noisy.samples ** 2)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            denoise_signal(mono(np.zeros(1000)), "median")

    def test_multichannel(self, rng):
        from echolocate.audio import AudioBuffer

        buf = AudioBuffer(rng.standard_normal((3, 2000)), FS)
        assert denoise_signal(buf, "otsu").n_channels == 3


class TestBenchmark:
    def test_reference_column(self):
        assert PAPER_REFERENCE_DB == {"wiener": 36.791, "spectral_gate": 55.235,
                                      "spectral_subtract": 57.116, "otsu": 57.529}

    def test_identical_inputs_are_infinite(self):
        clean, _ = tone_noise_fixture(10.0, seed=1)
        report = benchmark_denoisers(clean, clean)
        assert all(e.psnr_db == math.inf for e in report.entries)
        d = json.loads(report.to_json())
        assert {r["psnr_db"] for r in d["results"]} == {"inf"}
        assert d["schema_version"] == 1

    def test_every_method_beats_noisy_at_10db(self):
        clean, noisy = tone_noise_fixture(10.0, seed=2)
        report = benchmark_denoisers(clean, noisy)
        assert len(report.entries) == 4
        for e in report.entries:
            assert e.psnr_db > report.noisy_psnr_db, e.algorithm
        assert "FFT with Otsu's Method" in report.table()

    def test_failures_are_recorded(self):
        # 300 samples is shorter than one analysis window
        report = benchmark_denoisers(mono(np.ones(300)), mono(np.ones(300) * 0.5))
        assert all(e.psnr_db is None and e.error for e in report.entries)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            benchmark_denoisers(mono(np.zeros(1000)), mono(np.zeros(999)))
