import numpy as np
import pytest

from masklab import dsp
from masklab.errors import DataError, ShapeError
from masklab.metrics import (
    HallucinationMap,
    flag_density_split,
    hallucination_map,
    log_spectral_distance,
    si_sdr,
    stoi,
)
from masklab.synthdata import ClipSpec, DegradationSpec, mix_at_snr, synth_clean


def _wave(x):
    return dsp.Waveform(np.asarray(x, dtype=np.float64))


@pytest.fixture(scope="module")
def speechlike():
    return synth_clean(ClipSpec(seed=21))


class TestSiSdr:
    def test_identity_hits_cap(self, speechlike):
        assert si_sdr(speechlike, speechlike) == 100.0

    def test_scale_invariance(self, speechlike):
        doubled = _wave(2.0 * speechlike.samples)
        assert si_sdr(doubled, speechlike) == 100.0
        rng = np.random.default_rng(0)
        noisy = _wave(speechlike.samples + 0.01 * rng.normal(size=len(speechlike)))
        a = si_sdr(noisy, speechlike)
        b = si_sdr(_wave(3.7 * noisy.samples), speechlike)
        assert abs(a - b) <= 1e-6

    def test_orthogonal_noise_closed_form(self):
        n = 16000
        t = np.arange(n)
        s = np.sin(2 * np.pi * 440 * t / 16000)
        e = np.cos(2 * np.pi * 1237 * t / 16000)
        e -= (e @ s) / (s @ s) * s  # exactly orthogonal
        e *= np.sqrt((s @ s) / 10.0) / np.linalg.norm(e)  # ||e||^2 = ||s||^2/10
        val = si_sdr(_wave(s + e), _wave(s))
        assert val == pytest.approx(10.0, abs=1e-6)

    def test_orthogonal_formula_property(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=4000)
        e = rng.normal(size=4000)
        e -= (e @ s) / (s @ s) * s
        expected = 10 * np.log10((s @ s) / (e @ e))
        assert si_sdr(_wave(s + e), _wave(s)) == pytest.approx(expected, abs=1e-6)

    def test_zero_reference_rejected(self):
        with pytest.raises(DataError):
            si_sdr(_wave(np.ones(100)), _wave(np.zeros(100)))

    def test_zero_projection_floors(self):
        t = np.arange(4000)
        s = np.sin(2 * np.pi * 100 * t / 16000)
        e = np.cos(2 * np.pi * 100 * t / 16000)  # orthogonal to s
        assert si_sdr(_wave(e), _wave(s)) == -100.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            si_sdr(_wave(np.ones(10)), _wave(np.ones(11)))


class TestStoi:
    def test_self_correlation_is_one(self, speechlike):
        assert stoi(speechlike, speechlike) == pytest.approx(1.0, abs=1e-6)

    def test_polarity_inversion_invariant(self, speechlike):
        # the measure correlates one-third-octave magnitude envelopes, so a
        # sign flip changes nothing
        assert stoi(_wave(-speechlike.samples), speechlike) == pytest.approx(1.0, abs=1e-6)

    def test_envelope_destruction_scores_low(self, speechlike):
        # same spectrum magnitudes per frame but shuffled in time -> low score
        rng = np.random.default_rng(11)
        shuffled = speechlike.samples.copy().reshape(-1, 2000)
        rng.shuffle(shuffled)
        assert stoi(_wave(shuffled.ravel()), speechlike) < 0.5

    def test_monotone_in_snr(self, speechlike):
        scores = []
        for snr in (-10.0, 0.0, 10.0, 20.0):
            noisy = mix_at_snr(
                speechlike, DegradationSpec(kind="white", snr_db=snr), seed=5, skip_seconds=0.5
            )
            scores.append(stoi(noisy, speechlike))
        assert all(b > a for a, b in zip(scores, scores[1:])), scores

    def test_gain_invariance(self, speechlike):
        noisy = mix_at_snr(
            speechlike, DegradationSpec(kind="white", snr_db=5.0), seed=6, skip_seconds=0.5
        )
        base = stoi(noisy, speechlike)
        assert abs(stoi(_wave(0.25 * noisy.samples), speechlike) - base) <= 1e-4
        assert abs(stoi(noisy, _wave(0.25 * speechlike.samples)) - base) <= 1e-4

    def test_too_short_rejected(self):
        with pytest.raises(DataError):
            stoi(_wave(np.ones(1000)), _wave(np.ones(1000)))


class TestLsd:
    def test_zero_for_identical(self, speechlike):
        assert log_spectral_distance(speechlike, speechlike) == 0.0

    def test_constant_gain_is_uniform_db(self, speechlike):
        doubled = _wave(2.0 * speechlike.samples)
        val = log_spectral_distance(doubled, speechlike)
        assert val == pytest.approx(20 * np.log10(2), abs=1e-9)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        a = _wave(rng.normal(size=4096))
        b = _wave(rng.normal(size=4096))
        cfg = dsp.StftConfig()
        val = log_spectral_distance(a, b, cfg)

        mag_a = dsp.stft(a, cfg).magnitude()
        mag_b = dsp.stft(b, cfg).magnitude()
        floor_a = mag_a.max() * 10 ** (-80 / 20)
        floor_b = mag_b.max() * 10 ** (-80 / 20)
        total = 0.0
        for t in range(mag_a.shape[0]):
            acc = 0.0
            for k in range(mag_a.shape[1]):
                la = 20 * np.log10(max(mag_a[t, k], floor_a))
                lb = 20 * np.log10(max(mag_b[t, k], floor_b))
                acc += (la - lb) ** 2
            total += acc / mag_a.shape[1]
        expected = np.sqrt(total / mag_a.shape[0])
        assert val == pytest.approx(expected, abs=1e-9)


class TestHallucinationMap:
    def _specs(self, noisy, clean, est, cfg=None):
        cfg = cfg or dsp.StftConfig()
        return (
            dsp.stft(noisy, cfg),
            dsp.stft(clean, cfg),
            dsp.stft(est, cfg),
        )

    def test_passthrough_cases_have_zero_ratio(self, speechlike):
        noisy = mix_at_snr(
            speechlike, DegradationSpec(kind="white", snr_db=5.0), seed=7, skip_seconds=0.5
        )
        x, s, est = self._specs(noisy, speechlike, speechlike)
        assert hallucination_map(x, s, est).energy_ratio == 0.0
        x, s, est = self._specs(noisy, speechlike, noisy)
        assert hallucination_map(x, s, est).energy_ratio == 0.0

    def test_injected_tone_burst_flagged_exactly(self, speechlike):
        cfg = dsp.StftConfig()
        noisy = mix_at_snr(
            speechlike, DegradationSpec(kind="white", snr_db=20.0), seed=8, skip_seconds=0.5
        )
        # inject a 500 Hz burst (faded to avoid gating splatter) into the
        # leading pause, absent from both input and reference
        t = np.arange(len(noisy))
        burst = np.zeros(len(noisy))
        lo, hi = 1024, 6144  # inside the 0.5 s pause
        ramp = 512
        env = np.ones(hi - lo)
        env[:ramp] = 0.5 * (1 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[-ramp:] = env[:ramp][::-1]
        burst[lo:hi] = 0.5 * env * np.sin(2 * np.pi * 500 * t[lo:hi] / 16000)
        est = _wave(noisy.samples + burst)
        x, s, e = self._specs(noisy, speechlike, est)
        hmap = hallucination_map(x, s, e)
        tone_bin = round(500 / (16000 / cfg.window_length))
        assert hmap.energy_ratio > 0
        flagged_bins = np.argwhere(hmap.flagged)
        assert len(flagged_bins) > 0
        # the tone bin itself is flagged in the middle of the burst
        mid_frame = (lo + hi) // 2 // cfg.hop
        assert hmap.flagged[mid_frame, tone_bin]
        # every flagged bin sits at the tone frequency (within the fade
        # ramps' modulation sidebands), inside the burst's time extent
        for frame, k in flagged_bins:
            assert abs(k - tone_bin) <= 5
            start = frame * cfg.hop
            assert start + cfg.window_length > lo and start < hi

    def test_exact_margin_boundary_not_flagged(self):
        cfg = dsp.StftConfig(64, 32)
        base = np.zeros((4, 33))
        base[2, 5] = 1.0
        margin = 6.0
        scale = 10 ** (margin / 10.0)
        x = dsp.ComplexSpectrogram(base, np.zeros_like(base), cfg)
        s = dsp.ComplexSpectrogram(base, np.zeros_like(base), cfg)
        est = dsp.ComplexSpectrogram(base * np.sqrt(scale), np.zeros_like(base), cfg)
        hmap = hallucination_map(x, s, est, margin_db=margin)
        assert not hmap.flagged[2, 5]
        above = dsp.ComplexSpectrogram(base * np.sqrt(scale) * 1.001, np.zeros_like(base), cfg)
        assert hallucination_map(x, s, above, margin_db=margin).flagged[2, 5]

    def test_shape_mismatch_rejected(self, speechlike):
        cfg = dsp.StftConfig()
        a = dsp.stft(speechlike, cfg)
        b = dsp.stft(_wave(speechlike.samples[:16000]), cfg)
        with pytest.raises(ShapeError):
            hallucination_map(a, a, b)

    def test_density_split(self):
        cfg = dsp.StftConfig()
        flagged = np.zeros((61, 257), dtype=bool)
        flagged[:10, :] = True  # early frames flagged
        hmap = HallucinationMap(flagged=flagged, margin_db=6.0, energy_ratio=0.5)
        head, tail = flag_density_split(hmap, cfg, 16000, 0.5)
        assert head > tail

    def test_energy_ratio_validation(self):
        with pytest.raises(DataError):
            HallucinationMap(flagged=np.zeros((2, 2), dtype=bool), margin_db=6, energy_ratio=1.5)
