import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multibreath.errors import DataError, ShapeError, ValidationError
from multibreath.frontend import (FrontendConfig, MaskSpec, MelSpectrogram, Waveform, apply_masks,
                                  build_mel_filterbank, circular_pad, filterbank_for, hz_to_mel, mel_spectrogram,
                                  mel_to_hz, power_spectrogram, resample, waveform_to_logmel)

CFG = FrontendConfig()
FB = filterbank_for(CFG)


def tone(freq, rate, n, amp=0.5):
    return Waveform(amp * np.sin(2 * np.pi * freq * np.arange(n) / rate), rate)


class TestResample:
    def test_length_4k_to_16k(self):
        out = resample(Waveform(np.random.default_rng(0).standard_normal(4000), 4000), 16000)
        assert out.sample_rate_hz == 16000 and len(out.samples) == 16000

    def test_same_rate_is_identity(self):
        x = np.random.default_rng(1).standard_normal(500)
        np.testing.assert_array_equal(resample(Waveform(x, 8000), 8000).samples, x)

    def test_440_tone_peak(self):
        out = resample(tone(440, 8000, 8000), 16000)
        spec = np.abs(np.fft.rfft(out.samples))
        freqs = np.fft.rfftfreq(len(out.samples), 1 / 16000)
        assert abs(freqs[np.argmax(spec)] - 440) <= 2

    def test_downsampling_removes_aliases(self):
        # a 6 kHz tone at 16 kHz lies above the 4 kHz Nyquist of the 8 kHz output
        out = resample(tone(6000, 16000, 16000), 8000)
        assert np.max(np.abs(out.samples[100:-100])) < 0.01  # edges carry the FIR start-up transient

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            resample(Waveform(np.zeros(0), 4000), 16000)

    @pytest.mark.parametrize("rate", [4000, 44100, 22050, 48000])
    def test_duration_preserved(self, rate):
        n = rate * 2 + 3
        out = resample(Waveform(np.zeros(n), rate), 16000)
        assert abs(len(out.samples) - n * 16000 / rate) <= 1


class TestCircularPad:
    def test_example(self):
        np.testing.assert_array_equal(circular_pad(Waveform([1.0, 2, 3], 10), 7).samples, [1, 2, 3, 1, 2, 3, 1])

    def test_truncates(self):
        np.testing.assert_array_equal(circular_pad(Waveform([1.0, 2, 3], 10), 2).samples, [1, 2])

    def test_identity(self):
        x = np.arange(5.0)
        np.testing.assert_array_equal(circular_pad(Waveform(x, 10), 5).samples, x)

    def test_bad_target(self):
        with pytest.raises(ValidationError):
            circular_pad(Waveform([1.0], 10), 0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 50), st.integers(1, 300))
    def test_modular_property(self, length, target):
        x = np.arange(length, dtype=float)
        out = circular_pad(Waveform(x, 10), target).samples
        np.testing.assert_array_equal(out, x[np.arange(target) % length])


class TestFilterbank:
    def test_shape_and_nonnegative(self):
        assert FB.weights.shape == (64, 513)
        assert np.all(FB.weights >= 0)

    def test_zero_below_fmin_and_above_fmax(self):
        f = FB.bin_frequencies
        assert not FB.weights[:, f < 50].any()
        assert not FB.weights[:, f > 2000].any()

    def test_interior_bins_covered(self):
        f = FB.bin_frequencies
        inside = (f > 50) & (f < 2000)
        assert np.all(FB.weights[:, inside].sum(axis=0) > 0)

    def test_centers_interior_and_increasing(self):
        c = FB.band_centers_hz
        assert c[0] > 50 and c[-1] < 2000
        assert np.all(np.diff(c) > 0)

    def test_each_band_unimodal_with_unit_peak(self):
        for row in FB.weights:
            nz = np.flatnonzero(row)
            assert np.all(np.diff(nz) == 1), "support must be contiguous"
            d = np.sign(np.diff(row[nz[0]:nz[-1] + 1]))
            d = d[d != 0]
            assert np.count_nonzero(np.diff(d) < 0) <= 1 and np.count_nonzero(np.diff(d) > 0) == 0
            assert row.max() == pytest.approx(1.0)

    def test_htk_formula(self):
        assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(np.array([50.0, 1000, 2000]))), [50, 1000, 2000])

    def test_immutable(self):
        with pytest.raises(ValueError):
            FB.weights[0, 0] = 3

    def test_bad_parameters(self):
        with pytest.raises(ValidationError):
            build_mel_filterbank(fmin=3000, fmax=2000)
        with pytest.raises(ValidationError):
            build_mel_filterbank(fmax=9000)
        with pytest.raises(ValidationError):
            build_mel_filterbank(fft_size=64, n_mels=64)  # bands narrower than one bin


class TestMelSpectrogram:
    def test_silence_floor(self):
        s = mel_spectrogram(Waveform(np.zeros(131072), 16000), FB)
        assert s.values.shape == (64, 256)
        np.testing.assert_array_equal(s.values, np.log(1e-10))

    def test_one_khz_tone_band(self):
        # cosine, so the reflect padding around sample 0 continues the tone without a phase flip
        x = 0.5 * np.cos(2 * np.pi * 1000 * np.arange(131072) / 16000)
        s = mel_spectrogram(Waveform(x, 16000), FB).values
        expected = int(np.argmin(np.abs(FB.band_centers_hz - 1000)))
        assert np.all(np.argmax(s, axis=0) == expected)

    def test_power_matches_direct_dft_for_one_frame(self):
        x = np.random.default_rng(0).standard_normal(4096)
        p = power_spectrogram(x, 1024, 512)
        assert p.shape == (513, 8)
        win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(1024) / 1024)
        frame = x[512 * 3 - 512:512 * 3 + 512] * win
        np.testing.assert_allclose(p[:, 3], np.abs(np.fft.rfft(frame)) ** 2, rtol=1e-10)

    def test_wrong_length_or_rate(self):
        with pytest.raises(ShapeError):
            mel_spectrogram(Waveform(np.zeros(1000), 16000), FB)
        with pytest.raises(ShapeError):
            mel_spectrogram(Waveform(np.zeros(131072), 8000), FB)

    def test_gain_never_decreases_cells(self):
        w = Waveform(np.random.default_rng(2).standard_normal(131072) * 0.1, 16000)
        a = mel_spectrogram(w, FB).values
        b = mel_spectrogram(Waveform(w.samples * 1.7, 16000), FB).values
        assert np.all(b >= a)

    @pytest.mark.parametrize("rate,seconds", [(4000, 1.3), (44100, 0.4), (16000, 9.5), (22050, 3.0)])
    def test_end_to_end_shape(self, rate, seconds):
        x = np.random.default_rng(rate).standard_normal(int(rate * seconds))
        s = waveform_to_logmel(Waveform(x, rate), CFG, FB)
        assert s.values.shape == (64, 256)
        assert np.all(np.isfinite(s.values)) and np.all(s.values >= np.log(1e-10))


class TestMasks:
    S = MelSpectrogram(np.random.default_rng(0).standard_normal((64, 256)))

    def test_zero_widths_identity(self):
        out = apply_masks(self.S, MaskSpec(0, 0), seed=3)
        np.testing.assert_array_equal(out.values, self.S.values)

    def test_deterministic(self):
        a = apply_masks(self.S, MaskSpec(), seed=11).values
        b = apply_masks(self.S, MaskSpec(), seed=11).values
        np.testing.assert_array_equal(a, b)

    def test_input_untouched(self):
        before = self.S.values.copy()
        apply_masks(self.S, MaskSpec(), seed=1)
        np.testing.assert_array_equal(self.S.values, before)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    def test_only_declared_cells_change(self, seed, per_axis):
        spec = MaskSpec(20, 40, per_axis, fill_value=-99.0)
        out, rects = apply_masks(self.S, spec, seed, return_rects=True)
        inside = np.zeros((64, 256), bool)
        for r in rects:
            assert r.width <= (20 if r.axis == "time" else 40)
            if r.axis == "time":
                assert 0 <= r.start and r.start + r.width <= 256
                inside[:, r.start:r.start + r.width] = True
            else:
                assert 0 <= r.start and r.start + r.width <= 64
                inside[r.start:r.start + r.width, :] = True
        np.testing.assert_array_equal(out.values[~inside], self.S.values[~inside])
        assert np.all(out.values[inside] == -99.0)
        masked_cols = np.all(out.values == -99.0, axis=0).sum()
        assert masked_cols <= 20 * per_axis

    def test_mask_larger_than_axis(self):
        with pytest.raises(ValidationError):
            apply_masks(MelSpectrogram(np.zeros((8, 10))), MaskSpec(20, 4), seed=0)
