import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masklab import dsp
from masklab.errors import DataError, ShapeError


def naive_dft(frame):
    """O(N^2) reference DFT, one-sided."""
    n = len(frame)
    out = np.zeros(n // 2 + 1, dtype=complex)
    for k in range(n // 2 + 1):
        for t in range(n):
            out[k] += frame[t] * np.exp(-2j * np.pi * k * t / n)
    return out


class TestStft:
    def test_zero_input_is_zero_spectrogram(self):
        spec = dsp.stft(dsp.Waveform(np.zeros(16000)))
        assert spec.shape == (61, 257)
        assert np.all(spec.real == 0) and np.all(spec.imag == 0)

    def test_frame_count_formula(self):
        cfg = dsp.StftConfig(512, 256)
        spec = dsp.stft(dsp.Waveform(np.ones(16000) * 0.1), cfg)
        assert spec.shape[0] == 61
        assert spec.shape[1] == cfg.window_length // 2 + 1

    def test_matches_naive_dft_oracle(self):
        cfg = dsp.StftConfig(64, 32, window="rect")
        rng = np.random.default_rng(0)
        wave = dsp.Waveform(rng.normal(size=256))
        spec = dsp.stft(wave, cfg)
        for t in range(spec.shape[0]):
            frame = wave.samples[t * cfg.hop : t * cfg.hop + cfg.window_length]
            ref = naive_dft(frame)
            assert np.max(np.abs(spec.real[t] - ref.real)) <= 1e-9
            assert np.max(np.abs(spec.imag[t] - ref.imag)) <= 1e-9

    def test_cosine_at_bin_center_concentrates(self):
        cfg = dsp.StftConfig(64, 32, window="rect")
        k = 5
        n = np.arange(128)
        wave = dsp.Waveform(np.cos(2 * np.pi * k * n / 64))
        spec = dsp.stft(wave, cfg)
        mags = spec.magnitude()
        assert np.all(mags.argmax(axis=1) == k)
        off_bin = np.delete(mags, k, axis=1)
        assert np.max(off_bin) < 1e-9 * mags.max()

    def test_too_short_input_raises(self):
        with pytest.raises(DataError, match="too short"):
            dsp.stft(dsp.Waveform(np.zeros(100)))

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=4096), rng.normal(size=4096)
        a, b = 0.7, -1.3
        sx = dsp.stft(dsp.Waveform(x))
        sy = dsp.stft(dsp.Waveform(y))
        sxy = dsp.stft(dsp.Waveform(a * x + b * y))
        assert np.allclose(sxy.real, a * sx.real + b * sy.real, atol=1e-9)
        assert np.allclose(sxy.imag, a * sx.imag + b * sy.imag, atol=1e-9)

    def test_parseval_per_frame(self):
        cfg = dsp.StftConfig()
        rng = np.random.default_rng(4)
        wave = dsp.Waveform(rng.normal(size=8192))
        spec = dsp.stft(wave, cfg)
        window = cfg.window_samples()
        n = cfg.window_length
        for t in range(spec.shape[0]):
            frame = wave.samples[t * cfg.hop : t * cfg.hop + n] * window
            time_energy = np.sum(frame**2)
            p = spec.power()[t]
            freq_energy = (p[0] + p[-1] + 2 * p[1:-1].sum()) / n
            assert abs(time_energy - freq_energy) <= 1e-6 * max(time_energy, 1e-12)


class TestIstft:
    def test_zero_spectrogram_is_zero_waveform(self):
        cfg = dsp.StftConfig()
        spec = dsp.ComplexSpectrogram(np.zeros((10, 257)), np.zeros((10, 257)), cfg)
        out = dsp.istft(spec)
        assert np.all(out.samples == 0)

    def test_round_trip_snr(self):
        rng = np.random.default_rng(5)
        wave = dsp.Waveform(rng.normal(size=16000))
        rec = dsp.istft(dsp.stft(wave))
        w = 512
        ref = wave.samples[w : len(rec) - w]
        err = ref - rec.samples[w : len(rec) - w]
        snr = 10 * np.log10(np.sum(ref**2) / np.sum(err**2))
        assert snr >= 60.0

    def test_output_length_formula(self):
        cfg = dsp.StftConfig()
        spec = dsp.stft(dsp.Waveform(np.random.default_rng(6).normal(size=10000)), cfg)
        out = dsp.istft(spec)
        assert len(out) == (spec.shape[0] - 1) * cfg.hop + cfg.window_length

    def test_inconsistent_shape_rejected(self):
        with pytest.raises(ShapeError):
            dsp.ComplexSpectrogram(np.zeros((4, 100)), np.zeros((4, 100)), dsp.StftConfig())

    @settings(max_examples=10, deadline=None)
    @given(st.integers(min_value=3 * 512, max_value=4 * 512), st.integers(0, 2**31 - 1))
    def test_round_trip_property(self, n, seed):
        wave = dsp.Waveform(np.random.default_rng(seed).normal(size=n))
        rec = dsp.istft(dsp.stft(wave))
        w = 512
        ref = wave.samples[w : len(rec) - w]
        if len(ref) == 0:
            return
        err = ref - rec.samples[w : len(rec) - w]
        snr = 10 * np.log10(np.sum(ref**2) / max(np.sum(err**2), 1e-300))
        assert snr >= 60.0


class TestMel:
    def test_zero_spectrogram_hits_log_eps(self):
        cfg = dsp.StftConfig()
        spec = dsp.ComplexSpectrogram(np.zeros((5, 257)), np.zeros((5, 257)), cfg)
        mel = dsp.mel_project(spec, 40)
        assert np.allclose(mel, np.log(dsp.MEL_LOG_EPS))

    def test_filter_peaks_increase_with_band(self):
        fb = dsp.mel_filterbank(40, 257, 16000, 512)
        peaks = fb.argmax(axis=1)
        assert np.all(np.diff(peaks) > 0)
        assert np.all(fb.sum(axis=1) > 0)

    def test_band_sum_oracle(self):
        cfg = dsp.StftConfig()
        rng = np.random.default_rng(7)
        spec = dsp.stft(dsp.Waveform(rng.normal(size=4096)), cfg)
        n_mels = 24
        mel = dsp.mel_project(spec, n_mels)
        fb = dsp.mel_filterbank(n_mels, cfg.n_bins, 16000, cfg.window_length)
        power = spec.power()
        for t in range(spec.shape[0]):
            for m in range(n_mels):
                acc = 0.0
                for k in range(cfg.n_bins):
                    acc += power[t, k] * fb[m, k]
                assert abs(mel[t, m] - np.log(acc + dsp.MEL_LOG_EPS)) <= 1e-9

    def test_too_many_mels_rejected(self):
        with pytest.raises(DataError):
            dsp.mel_filterbank(300, 257, 16000, 512)


class TestRender:
    def test_zero_spectrogram_uniform_floor(self, tmp_path):
        from matplotlib import image as mpimage

        cfg = dsp.StftConfig()
        spec = dsp.ComplexSpectrogram(np.zeros((8, 257)), np.zeros((8, 257)), cfg)
        path = dsp.render_spectrogram(spec, tmp_path / "zero.png")
        img = mpimage.imread(path)
        assert img.shape[0] == 257 and img.shape[1] == 8
        flat = img.reshape(-1, img.shape[-1])
        assert np.all(flat == flat[0])

    def test_pure_tone_bright_line(self, tmp_path):
        from matplotlib import image as mpimage

        cfg = dsp.StftConfig()
        n = np.arange(16000)
        wave = dsp.Waveform(0.5 * np.sin(2 * np.pi * 500.0 * n / 16000))
        spec = dsp.stft(wave, cfg)
        path = dsp.render_spectrogram(spec, tmp_path / "tone.png")
        img = mpimage.imread(path)
        brightness = img[..., :3].sum(axis=(1, 2))
        expected_bin = round(500 / (16000 / cfg.window_length))
        # origin="lower": row index from the bottom
        assert img.shape[0] - 1 - brightness.argmax() == expected_bin

    def test_scaled_dimensions(self, tmp_path):
        from matplotlib import image as mpimage

        cfg = dsp.StftConfig()
        spec = dsp.stft(dsp.Waveform(np.random.default_rng(8).normal(size=4096)), cfg)
        path = dsp.render_spectrogram(spec, tmp_path / "scaled.png", scale=3)
        img = mpimage.imread(path)
        assert img.shape[0] == spec.shape[1] * 3
        assert img.shape[1] == spec.shape[0] * 3

    def test_unwritable_path_raises(self, tmp_path):
        cfg = dsp.StftConfig()
        spec = dsp.stft(dsp.Waveform(np.zeros(1024)), cfg)
        with pytest.raises(DataError):
            dsp.render_spectrogram(spec, tmp_path / "no_such_dir" / "x.png")
