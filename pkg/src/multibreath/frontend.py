"""Waveform -> fixed-size log-mel spectrogram, plus time/frequency masking.

Defaults produce a 64x256 image: 16 kHz audio circularly padded to 131072
samples, a Hann-windowed 1024-point STFT with hop 512 whose 256 frames are
centred on samples ``0, 512, ..., 130560`` (reflect padding at the ends),
64 HTK-mel triangles between 50 and 2000 Hz, and ``log(max(p, 1e-10))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .errors import DataError, ShapeError, ValidationError


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ShapeError(f"waveform must be 1-d, got shape {s.shape}")
        if not np.isfinite(s).all():
            raise ValidationError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    target_samples: int = 131072
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 64
    fmin: float = 50.0
    fmax: float = 2000.0
    log_floor: float = 1e-10
    window: str = "hann"
    pad_mode: str = "reflect"
    mel_scale: str = "htk"

    @property
    def n_frames(self) -> int:
        return 1 + (self.target_samples - 1) // self.hop

    @property
    def shape(self) -> tuple:
        return (self.n_mels, self.n_frames)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # [n_mels, 1 + n_fft // 2]
    band_centers_hz: np.ndarray
    sample_rate: int
    fft_size: int

    def __post_init__(self):
        self.weights.setflags(write=False)
        self.band_centers_hz.setflags(write=False)

    @property
    def bin_frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.fft_size, 1.0 / self.sample_rate)


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [n_mels, frames], natural-log power
    source: str = ""


@dataclass(frozen=True)
class MaskSpec:
    max_time_frames: int = 20
    max_freq_bins: int = 40
    num_masks_per_axis: int = 1
    fill_value: float = 0.0


def resample(w: Waveform, target_rate_hz: int) -> Waveform:
    """Band-limited polyphase resampling (Kaiser-windowed sinc FIR)."""
    if target_rate_hz <= 0:
        raise ValidationError(f"target rate must be positive, got {target_rate_hz}")
    if len(w.samples) == 0:
        raise DataError("cannot resample an empty waveform")
    if target_rate_hz == w.sample_rate_hz:
        return Waveform(w.samples.copy(), w.sample_rate_hz)
    k = gcd(int(target_rate_hz), w.sample_rate_hz)
    up, down = int(target_rate_hz) // k, w.sample_rate_hz // k
    return Waveform(signal.resample_poly(w.samples, up, down), int(target_rate_hz))


def circular_pad(w: Waveform, target_len: int) -> Waveform:
    """Repeat the waveform from its start until ``target_len`` samples (truncate if longer)."""
    if target_len <= 0:
        raise ValidationError(f"target length must be positive, got {target_len}")
    n = len(w.samples)
    if n == 0:
        raise DataError("cannot pad an empty waveform")
    return Waveform(np.resize(w.samples, target_len), w.sample_rate_hz)


def hz_to_mel(f, scale: str = "htk"):
    f = np.asarray(f, dtype=np.float64)
    if scale == "htk":
        return 2595.0 * np.log10(1.0 + f / 700.0)
    if scale == "slaney":
        f_sp, min_log_hz = 200.0 / 3, 1000.0
        min_log_mel = min_log_hz / f_sp
        logstep = np.log(6.4) / 27.0
        return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep,
                        f / f_sp)
    raise ValueError(f"unknown mel scale {scale!r}")


def mel_to_hz(m, scale: str = "htk"):
    m = np.asarray(m, dtype=np.float64)
    if scale == "htk":
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    if scale == "slaney":
        f_sp, min_log_hz = 200.0 / 3, 1000.0
        min_log_mel = min_log_hz / f_sp
        logstep = np.log(6.4) / 27.0
        return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)
    raise ValueError(f"unknown mel scale {scale!r}")


def build_mel_filterbank(fft_size: int = 1024, sample_rate: int = 16000, n_mels: int = 64,
                         fmin: float = 50.0, fmax: float = 2000.0, scale: str = "htk") -> MelFilterbank:
    """Triangles with mel-equispaced edges, each scaled so its largest sampled weight is 1."""
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValidationError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got fmin={fmin} fmax={fmax}")
    if n_mels < 1 or fft_size < 2:
        raise ValidationError("n_mels and fft_size must be positive")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin, scale), hz_to_mel(fmax, scale), n_mels + 2), scale)
    freqs = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    peak = weights.max(axis=1, keepdims=True)
    if np.any(peak <= 0):
        empty = np.flatnonzero(peak[:, 0] <= 0)
        raise ValidationError(f"mel bands {empty.tolist()} contain no FFT bin; use fewer bands or a larger FFT")
    return MelFilterbank(weights / peak, edges[1:-1].copy(), int(sample_rate), int(fft_size))


def power_spectrogram(samples: np.ndarray, n_fft: int = 1024, hop: int = 512, window: str = "hann",
                      pad_mode: str = "reflect") -> np.ndarray:
    """``|STFT|^2`` as ``[1 + n_fft // 2, frames]`` with frames centred at ``k * hop`` for ``k*hop < len``."""
    x = np.asarray(samples, dtype=np.float64)
    padded = np.pad(x, n_fft // 2, mode=pad_mode)
    n_frames = 1 + (len(x) - 1) // hop
    frames = sliding_window_view(padded, n_fft)[::hop][:n_frames]
    win = signal.get_window(window, n_fft, fftbins=True)
    spec = np.fft.rfft(frames * win, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def mel_spectrogram(w: Waveform, fb: MelFilterbank, cfg: FrontendConfig = FrontendConfig(),
                    source: str = "") -> MelSpectrogram:
    if w.sample_rate_hz != cfg.sample_rate or len(w.samples) != cfg.target_samples:
        raise ShapeError(f"mel_spectrogram expects {cfg.target_samples} samples at {cfg.sample_rate} Hz, "
                         f"got {len(w.samples)} at {w.sample_rate_hz} Hz; resample and pad first")
    if fb.fft_size != cfg.n_fft or fb.sample_rate != cfg.sample_rate:
        raise ShapeError("filterbank does not match the frontend FFT size / sample rate")
    power = power_spectrogram(w.samples, cfg.n_fft, cfg.hop, cfg.window, cfg.pad_mode)
    mel = fb.weights @ power
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), source)


def filterbank_for(cfg: FrontendConfig) -> MelFilterbank:
    return build_mel_filterbank(cfg.n_fft, cfg.sample_rate, cfg.n_mels, cfg.fmin, cfg.fmax, cfg.mel_scale)


def waveform_to_logmel(w: Waveform, cfg: FrontendConfig = FrontendConfig(), fb: MelFilterbank | None = None,
                       source: str = "") -> MelSpectrogram:
    """Resample, circularly pad and transform; the end-to-end shape is ``cfg.shape``."""
    fb = fb if fb is not None else filterbank_for(cfg)
    w = circular_pad(resample(w, cfg.sample_rate), cfg.target_samples)
    return mel_spectrogram(w, fb, cfg, source)


@dataclass(frozen=True)
class MaskRect:
    axis: str  # "time" or "freq"
    start: int
    width: int


def draw_masks(shape: tuple, spec: MaskSpec, rng: np.random.Generator) -> list:
    n_freq, n_time = shape
    if spec.max_time_frames > n_time or spec.max_freq_bins > n_freq:
        raise ValidationError(f"mask maxima ({spec.max_freq_bins}, {spec.max_time_frames}) exceed "
                              f"spectrogram shape {shape}")
    rects = []
    for axis, limit, size in (("time", spec.max_time_frames, n_time), ("freq", spec.max_freq_bins, n_freq)):
        for _ in range(spec.num_masks_per_axis):
            width = int(rng.integers(0, limit + 1))
            start = int(rng.integers(0, size - width + 1))
            rects.append(MaskRect(axis, start, width))
    return rects


def apply_masks(s: MelSpectrogram, spec: MaskSpec, seed, return_rects: bool = False):
    """Masked copy of ``s``; widths ~ Uniform{0..max}, offsets uniform over valid positions."""
    rng = np.random.default_rng(seed)
    rects = draw_masks(s.values.shape, spec, rng)
    out = s.values.copy()
    for r in rects:
        if r.axis == "time":
            out[:, r.start:r.start + r.width] = spec.fill_value
        else:
            out[r.start:r.start + r.width, :] = spec.fill_value
    masked = MelSpectrogram(out, s.source)
    return (masked, rects) if return_rects else masked
