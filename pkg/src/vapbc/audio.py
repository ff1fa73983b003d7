"""Stereo audio I/O, causal log-mel front end and intensity flattening.

Channel 0 carries the speaker (user), channel 1 the listener (the system
whose backchannels are predicted).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .errors import CorruptHeader, EmptyAudio, NotFound, UnsupportedFormat

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms at 16 kHz
N_FFT = 512
LOG_FLOOR = 1e-10
SILENCE_RMS = 1e-4
FRAME_RATES = (50, 10)


@dataclass(frozen=True)
class StereoAudio:
    """Two equal-length channels of float32 samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float32)
        if x.ndim != 2 or x.shape[0] != 2:
            raise UnsupportedFormat(f"expected 2 channels, got shape {x.shape}")
        if self.sample_rate <= 0:
            raise UnsupportedFormat(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            raise ValueError("audio contains non-finite samples")
        object.__setattr__(self, "samples", x)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def channel(self, c: int) -> np.ndarray:
        return self.samples[c]

    def crop(self, start_s: float, end_s: float) -> "StereoAudio":
        a = int(round(start_s * self.sample_rate))
        b = int(round(end_s * self.sample_rate))
        return StereoAudio(self.samples[:, a:b], self.sample_rate)


@dataclass
class FeatureSequence:
    """A T x D feature matrix for one channel at a fixed frame rate."""

    frames: np.ndarray
    frame_rate: float
    channel_id: int = 0

    def __len__(self) -> int:
        return self.frames.shape[0]


def read_wav_stereo(path) -> StereoAudio:
    """Read a 2-channel 16 kHz PCM16 or float32 WAV file.

    PCM16 is scaled by 1/32768 so the result lies in [-1, 1).
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise NotFound(f"no such audio file: {path}")
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, OSError) as e:
        raise CorruptHeader(f"{path}: {e}") from e
    if rate != SAMPLE_RATE:
        raise UnsupportedFormat(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if data.ndim != 2 or data.shape[1] != 2:
        n = 1 if data.ndim == 1 else data.shape[1]
        raise UnsupportedFormat(f"{path}: {n} channel(s), expected 2")
    if data.dtype == np.int16:
        x = data.T.astype(np.float32) / np.float32(32768.0)
    elif data.dtype == np.float32:
        x = np.ascontiguousarray(data.T)
    else:
        raise UnsupportedFormat(f"{path}: sample encoding {data.dtype} not supported")
    return StereoAudio(x, rate)


def write_wav_stereo(path, audio: StereoAudio, encoding: str = "pcm16") -> None:
    """Write ``audio`` as PCM16 (default) or float32."""
    if encoding == "pcm16":
        q = np.clip(np.round(audio.samples.astype(np.float64) * 32768.0), -32768, 32767)
        data = q.astype(np.int16).T
    elif encoding == "float32":
        data = audio.samples.astype(np.float32).T
    else:
        raise UnsupportedFormat(f"unknown encoding {encoding!r}")
    wavfile.write(os.fspath(path), audio.sample_rate, np.ascontiguousarray(data))


def quantize_pcm16(x: np.ndarray) -> np.ndarray:
    """Snap samples onto the PCM16 grid so a PCM16 round trip is exact."""
    q = np.clip(np.round(np.asarray(x, dtype=np.float64) * 32768.0), -32768, 32767)
    return (q / 32768.0).astype(np.float32)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_bands: int, sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT) -> np.ndarray:
    """Triangular HTK-mel filters over [0, sample_rate/2], shape (n_bands, n_fft//2+1)."""
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_bands + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_bands, freqs.size))
    for b in range(n_bands):
        lo, mid, hi = edges_hz[b : b + 3]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=1)
def _hann() -> np.ndarray:
    w = get_window("hann", WIN_LENGTH)
    w.setflags(write=False)
    return w


def frame_hop(sample_rate: int, frame_rate: float) -> int:
    hop = sample_rate / frame_rate
    if hop != int(hop):
        raise ValueError(f"frame rate {frame_rate} does not divide sample rate {sample_rate}")
    return int(hop)


def mel_frames(padded: np.ndarray, n_frames: int, hop: int, n_bands: int, sample_rate: int) -> np.ndarray:
    """Log-mel energies for windows ``padded[t*hop : t*hop + WIN_LENGTH]``.

    ``padded`` is the signal with ``WIN_LENGTH`` samples of left context, so
    the window for frame t ends exactly at sample t*hop of the signal.
    """
    if n_frames <= 0:
        return np.zeros((0, n_bands), dtype=np.float32)
    windows = np.lib.stride_tricks.sliding_window_view(padded, WIN_LENGTH)[::hop][:n_frames]
    spec = np.fft.rfft(windows * _hann(), n=N_FFT, axis=-1)
    power = spec.real**2 + spec.imag**2
    energy = power @ mel_filterbank(n_bands, sample_rate).T
    return np.log(np.maximum(energy, LOG_FLOOR)).astype(np.float32)


def log_mel(audio_channel, sample_rate: int = SAMPLE_RATE, frame_rate: int = 50,
            n_bands: int = 40, channel_id: int = 0) -> FeatureSequence:
    """Causal log-mel features: one 25 ms window per frame ending at t/frame_rate.

    The stream start is zero padded, so frame 0 is computed from padding only.
    """
    x = np.asarray(audio_channel, dtype=np.float64)
    if x.size == 0:
        raise EmptyAudio("cannot extract features from empty audio")
    if frame_rate not in FRAME_RATES:
        raise ValueError(f"frame rate must be one of {FRAME_RATES}, got {frame_rate}")
    if n_bands < 8:
        raise ValueError("need at least 8 mel bands")
    hop = frame_hop(sample_rate, frame_rate)
    n_frames = x.size // hop
    padded = np.concatenate([np.zeros(WIN_LENGTH), x])
    feats = mel_frames(padded, n_frames, hop, n_bands, sample_rate)
    return FeatureSequence(feats, frame_rate, channel_id)


def rms_contour(audio_channel, hop: float, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """RMS over consecutive non-overlapping windows of ``hop`` seconds."""
    if hop <= 0:
        raise ValueError("hop must be positive")
    x = np.asarray(audio_channel, dtype=np.float64)
    if x.size == 0:
        raise EmptyAudio("cannot compute an RMS contour of empty audio")
    n = max(1, int(round(hop * sample_rate)))
    if x.size < n:
        return np.array([np.sqrt(np.mean(x**2))])
    k = x.size // n
    return np.sqrt(np.mean(x[: k * n].reshape(k, n) ** 2, axis=1))


def _gain_curve(gains: np.ndarray, win: int, n: int, ramp: int) -> np.ndarray:
    # Piecewise-constant gain; each boundary is smoothed inside the window
    # holding the larger gain, so a loud window is never boosted.
    g = np.repeat(gains, win)[:n].astype(np.float64)
    for i in range(len(gains) - 1):
        b = (i + 1) * win
        if b >= n:
            break
        lo, hi = gains[i], gains[i + 1]
        if lo == hi:
            continue
        if lo < hi:
            seg = slice(b, min(b + ramp, n))
            g[seg] = np.linspace(lo, hi, ramp + 1)[1 : 1 + seg.stop - seg.start]
        else:
            seg = slice(max(b - ramp, 0), b)
            g[seg] = np.linspace(lo, hi, ramp + 1)[: seg.stop - seg.start]
    return g


def flatten_intensity(audio: StereoAudio, channel: int, window_ms: float = 50.0) -> StereoAudio:
    """Equalise the windowed RMS of one channel to its overall speech level.

    Windows quieter than ``SILENCE_RMS`` are passed through unchanged so the
    noise floor is not amplified; the target level is the RMS over the
    remaining (active) windows. The other channel is untouched.
    """
    if channel not in (0, 1):
        raise ValueError(f"channel must be 0 or 1, got {channel}")
    x = audio.samples[channel].astype(np.float64)
    if x.size == 0:
        return audio
    win = max(1, int(round(window_ms * audio.sample_rate / 1000.0)))
    n_win = -(-x.size // win)
    padded = np.zeros(n_win * win)
    padded[: x.size] = x
    energy = np.mean(padded.reshape(n_win, win) ** 2, axis=1)
    # The final window may be partial; average over its real samples.
    tail = x.size - (n_win - 1) * win
    energy[-1] = np.mean(x[-tail:] ** 2)
    rms = np.sqrt(energy)
    active = rms >= SILENCE_RMS
    if not np.any(active):
        return audio
    target = np.sqrt(np.mean(energy[active]))
    gains = np.where(active, target / np.where(active, rms, 1.0), 1.0)
    ramp = max(1, win // 100)
    y = x * _gain_curve(gains, win, x.size, ramp)
    out = audio.samples.copy()
    out[channel] = np.clip(y, -1.0, 1.0).astype(np.float32)
    return StereoAudio(out, audio.sample_rate)
