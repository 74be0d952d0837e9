"""Audio containers, STFT/ISTFT, log-Mel features, PSNR and WAV I/O.

Every other module consumes :class:`AudioBuffer` and :class:`Spectrogram`
from here. All functions are pure; buffers are never mutated in place.
"""

from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

DEFAULT_SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
PSNR_INF = math.inf

ArrayLike = Union[np.ndarray, "AudioBuffer"]


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Multi-channel real signal, shape ``(channels, frames)``."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[np.newaxis, :]
        if x.ndim != 2:
            raise ValueError(f"samples must be 1-D or 2-D, got shape {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("AudioBuffer needs at least one channel")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain non-finite values")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_frames(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_frames / self.sample_rate

    def channel(self, index: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[index], self.sample_rate)

    def slice(self, start: int, stop: int) -> "AudioBuffer":
        return AudioBuffer(self.samples[:, start:stop], self.sample_rate)

    def mono(self) -> np.ndarray:
        """Return the single channel as a 1-D array; fails on multi-channel input."""
        if self.n_channels != 1:
            raise ValueError(f"expected a single-channel buffer, got {self.n_channels} channels")
        return self.samples[0]


@dataclass(frozen=True)
class FrameParams:
    """Short-time analysis parameters. Durations are in seconds."""

    window_len: float = 0.025
    hop: float = 0.010
    window: str = "hamming"
    fft_size: int | None = None

    def __post_init__(self):
        if self.window_len <= 0 or self.hop <= 0:
            raise ValueError("window_len and hop must be positive")
        if self.hop > self.window_len:
            raise ValueError("hop must not exceed window_len")
        if self.fft_size is not None and (self.fft_size < 1 or self.fft_size & (self.fft_size - 1)):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_len * sample_rate))

    def hop_samples(self, sample_rate: int) -> int:
        return max(1, int(round(self.hop * sample_rate)))

    def n_fft(self, sample_rate: int) -> int:
        win = self.window_samples(sample_rate)
        if self.fft_size is None:
            return 1 << (win - 1).bit_length()
        if self.fft_size < win:
            raise ValueError(f"fft_size {self.fft_size} is shorter than the window ({win} samples)")
        return self.fft_size

    def taper(self, sample_rate: int) -> np.ndarray:
        return get_window(self.window, self.window_samples(sample_rate))


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Complex STFT, ``frames`` has shape ``(n_frames, n_fft // 2 + 1)``.

    ``n_samples`` is the length of the analysed signal; ``meta`` carries
    processing flags (e.g. ``{"warning": "degenerate-histogram"}``).
    """

    frames: np.ndarray
    params: FrameParams
    sample_rate: int
    n_samples: int
    meta: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    def replace(self, frames: np.ndarray, **meta) -> "Spectrogram":
        merged = dict(self.meta)
        merged.update(meta)
        return Spectrogram(frames, self.params, self.sample_rate, self.n_samples, merged)


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Log Mel energies, shape ``(n_mels, frames)``."""

    values: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def frame_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def stft(buf: AudioBuffer, params: FrameParams = FrameParams()) -> Spectrogram:
    """Windowed real-input STFT without edge padding."""
    x = buf.mono()
    fs = buf.sample_rate
    win = params.window_samples(fs)
    hop = params.hop_samples(fs)
    n_fft = params.n_fft(fs)
    if x.size < win:
        raise ValueError(f"signal has {x.size} samples, shorter than one window ({win})")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    spec = np.fft.rfft(frames * params.taper(fs), n=n_fft, axis=1)
    return Spectrogram(spec, params, fs, x.size)


def istft(spec: Spectrogram) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`.

    Output length is ``(n_frames - 1) * hop + window``. Samples whose window
    sum is zero at the edges are returned as zeros; a zero window sum inside
    the covered span is a degenerate hop/window combination and raises.
    """
    fs = spec.sample_rate
    params = spec.params
    win = params.window_samples(fs)
    hop = params.hop_samples(fs)
    n_fft = params.n_fft(fs)
    w = params.taper(fs)
    n_frames = spec.n_frames
    length = (n_frames - 1) * hop + win if n_frames else 0

    chunks = np.fft.irfft(spec.frames, n=n_fft, axis=1)[:, :win] * w
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n_frames):
        out[i * hop:i * hop + win] += chunks[i]
        norm[i * hop:i * hop + win] += w * w

    tiny = 1e-10 * (norm.max() if length else 1.0)
    live = np.flatnonzero(norm > tiny)
    if live.size:
        inner = norm[live[0]:live[-1] + 1]
        if np.any(inner <= tiny):
            raise ValueError("window sum vanishes inside the signal; hop/window combination is degenerate")
        out[live] /= norm[live]
    out[norm <= tiny] = 0.0
    return AudioBuffer(out, fs)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Band edges/centres in Hz: ``n_mels + 2`` points equally spaced in mel."""
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


@functools.lru_cache(maxsize=32)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filterbank, shape ``(n_mels, n_fft // 2 + 1)``.

    Triangles narrower than one FFT bin are widened to reach one bin
    spacing on each side of their centre, so no band is empty.
    """
    n_bins = n_fft // 2 + 1
    if n_mels > n_bins:
        raise ValueError(f"n_mels={n_mels} exceeds the number of FFT bins ({n_bins})")
    pts = mel_centers(n_mels, sample_rate, fmin, fmax)
    df = sample_rate / n_fft
    freqs = np.arange(n_bins) * df
    left = np.minimum(pts[:-2], pts[1:-1] - df)
    center = pts[1:-1]
    right = np.maximum(pts[2:], pts[1:-1] + df)
    f = freqs[np.newaxis, :]
    rise = (f - left[:, None]) / (center - left)[:, None]
    fall = (right[:, None] - f) / (right - center)[:, None]
    fb = np.clip(np.minimum(rise, fall), 0.0, None)
    fb.setflags(write=False)
    return fb


def mel_features(buf: AudioBuffer, n_mels: int = 128, params: FrameParams = FrameParams(),
                 fmin: float = 0.0, fmax: float | None = None) -> MelSpectrogram:
    """Log Mel filterbank energies of a single-channel buffer."""
    if buf.sample_rate < 8000:
        raise ValueError(f"sample rate {buf.sample_rate} Hz is below the 8 kHz minimum")
    spec = stft(buf, params)
    fb = mel_filterbank(n_mels, params.n_fft(buf.sample_rate), buf.sample_rate, fmin, fmax)
    power = np.abs(spec.frames) ** 2
    return MelSpectrogram(np.log(fb @ power.T + LOG_FLOOR), buf.sample_rate)


def _samples(x: ArrayLike) -> np.ndarray:
    if isinstance(x, AudioBuffer):
        return x.samples
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def psnr(reference: ArrayLike, test: ArrayLike) -> float:
    """Peak signal-to-noise ratio in dB, peak taken from ``reference``.

    Identical inputs give ``PSNR_INF``.
    """
    ref = _samples(reference)
    tst = _samples(test)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch: reference {ref.shape} vs test {tst.shape}")
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return PSNR_INF
    peak = float(np.max(np.abs(ref)))
    if peak == 0.0:
        return -math.inf
    return 10.0 * math.log10(peak * peak / mse)


def read_wav(path: str | os.PathLike) -> AudioBuffer:
    """Read 16-bit PCM or 32-bit float WAV, 1-8 channels, into [-1, 1]."""
    fs, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype}; need PCM16 or float32")
    x = x[:, np.newaxis] if x.ndim == 1 else x
    if not 1 <= x.shape[1] <= 8:
        raise ValueError(f"unsupported channel count {x.shape[1]}")
    return AudioBuffer(x.T, fs)


def write_wav(path: str | os.PathLike, buf: AudioBuffer, pcm16: bool = False) -> None:
    if not 1 <= buf.n_channels <= 8:
        raise ValueError(f"unsupported channel count {buf.n_channels}")
    x = buf.samples.T
    if pcm16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    else:
        data = x.astype("<f4")
    wavfile.write(path, buf.sample_rate, data)
