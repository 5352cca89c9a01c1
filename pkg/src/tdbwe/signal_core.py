"""Deterministic audio primitives.

Resampling between 8 kHz and 16 kHz, narrowband simulation, STFT/ISTFT,
low-frequency replacement, bandwidth detection and fixed-length chunking.
Everything here is a pure function over numpy arrays wrapped in
:class:`Waveform`.
"""

from __future__ import annotations

import enum
import math
import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import signal as sig

NARROW_RATE = 8000
WIDE_RATE = 16000
CROSSOVER_HZ = 4000.0

# anti-alias low-pass used before 2:1 decimation
AA_TAPS = 127
AA_CUTOFF_HZ = 0.45 * NARROW_RATE

BANDWIDTH_THRESHOLD = 1e-3
_BW_EPS = 1e-12


class Band(str, enum.Enum):
    NARROW = "narrow"
    WIDE = "wide"
    WIDE_DOWN = "wide_down"
    EXTENDED = "extended"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Waveform:
    """Mono waveform with its sample rate and band label."""

    samples: np.ndarray
    sample_rate: int = WIDE_RATE
    band: Band = Band.UNKNOWN

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "band", Band(self.band))
        if self.sample_rate not in (NARROW_RATE, WIDE_RATE):
            raise ValueError(f"unsupported sample rate {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    hop: int = 128
    win_length: int = 512
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.win_length <= self.fft_size:
            raise ValueError(
                f"need 0 < hop <= win_length <= fft_size, got {self.hop}, "
                f"{self.win_length}, {self.fft_size}"
            )
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    def window_array(self) -> np.ndarray:
        """Periodic Hann window zero-padded (centered) to ``fft_size``."""
        win = sig.get_window("hann", self.win_length, fftbins=True)
        left = (self.fft_size - self.win_length) // 2
        out = np.zeros(self.fft_size)
        out[left:left + self.win_length] = win
        return out

    def is_invertible(self) -> bool:
        """Whether weighted overlap-add can invert this analysis (NOLA)."""
        return bool(sig.check_NOLA(self.window_array(), self.fft_size,
                                   self.fft_size - self.hop))


@dataclass(frozen=True)
class Chunk:
    samples: np.ndarray
    source_id: str
    offset: int


def _require_rate(w: Waveform, rate: int, op: str):
    if w.sample_rate != rate:
        raise ValueError(f"{op} expects {rate} Hz input, got {w.sample_rate} Hz")


def normalize_amplitude(w: Waveform) -> Waveform:
    """Scale so the peak absolute amplitude is exactly 1."""
    if len(w) == 0:
        raise ValueError("cannot normalize an empty waveform")
    peak = np.max(np.abs(w.samples))
    if peak == 0:
        return w
    return replace(w, samples=w.samples / peak)


def antialias_filter() -> np.ndarray:
    """Hann-windowed sinc low-pass (127 taps, 3.6 kHz cutoff at 16 kHz)."""
    return sig.firwin(AA_TAPS, AA_CUTOFF_HZ, window="hann", fs=WIDE_RATE)


def decimate_to_8k(w: Waveform) -> Waveform:
    _require_rate(w, WIDE_RATE, "decimate_to_8k")
    # zero-phase FIR: 'same' convolution removes the (taps-1)/2 delay
    filtered = np.convolve(w.samples, antialias_filter(), mode="same")
    return replace(w, samples=filtered[::2], sample_rate=NARROW_RATE)


def upsample_linear_to_16k(w: Waveform) -> Waveform:
    """2x linear interpolation; the final odd sample repeats the last input."""
    _require_rate(w, NARROW_RATE, "upsample_linear_to_16k")
    x = w.samples
    out = np.empty(2 * len(x))
    out[0::2] = x
    if len(x):
        nxt = np.append(x[1:], x[-1])
        out[1::2] = 0.5 * (x + nxt)
    return replace(w, samples=out, sample_rate=WIDE_RATE)


def make_wide_down(w: Waveform) -> Waveform:
    """Simulate narrowband audio at 16 kHz: decimate then linearly upsample."""
    if w.band not in (Band.WIDE, Band.UNKNOWN):
        raise ValueError(f"make_wide_down expects wideband input, got {w.band.value}")
    _require_rate(w, WIDE_RATE, "make_wide_down")
    n = len(w)
    x = w.samples if n % 2 == 0 else np.append(w.samples, 0.0)
    down = decimate_to_8k(replace(w, samples=x))
    up = upsample_linear_to_16k(down)
    return replace(up, samples=up.samples[:n], band=Band.WIDE_DOWN)


def stft(w: Waveform | np.ndarray, c: StftConfig) -> np.ndarray:
    """Complex STFT, shape (frames, fft_size // 2 + 1).

    Frames are centered: the signal is zero-padded by ``fft_size // 2`` on
    both sides and frame ``t`` starts at ``t * hop`` in the padded signal.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(x) < c.win_length:
        raise ValueError(f"signal length {len(x)} shorter than window {c.win_length}")
    pad = c.fft_size // 2
    xp = np.pad(x, pad)
    n_frames = 1 + (len(xp) - c.fft_size) // c.hop
    frames = np.lib.stride_tricks.sliding_window_view(xp, c.fft_size)[::c.hop][:n_frames]
    return np.fft.rfft(frames * c.window_array(), axis=-1)


def istft(spec: np.ndarray, c: StftConfig, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    if not c.is_invertible():
        raise ValueError(f"STFT config {c} does not satisfy the overlap-add constraint")
    win = c.window_array()
    frames = np.fft.irfft(spec, n=c.fft_size, axis=-1) * win
    pad = c.fft_size // 2
    total = c.fft_size + c.hop * (len(frames) - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t, frame in enumerate(frames):
        s = t * c.hop
        out[s:s + c.fft_size] += frame
        norm[s:s + c.fft_size] += win ** 2
    ok = norm > 1e-10
    out[ok] /= norm[ok]
    out = out[pad:pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


def crossover_bin(n: int, sample_rate: int = WIDE_RATE, cutoff_hz: float = CROSSOVER_HZ) -> int:
    """Index of the length-``n`` DFT bin whose center frequency is nearest ``cutoff_hz``."""
    return int(round(cutoff_hz * n / sample_rate))


def band_split(x: np.ndarray, sample_rate: int = WIDE_RATE,
               cutoff_hz: float = CROSSOVER_HZ) -> tuple[np.ndarray, np.ndarray]:
    """Brick-wall split into (below, at-or-above) ``cutoff_hz`` on the whole-signal DFT.

    The two parts sum to ``x`` and each split is an exact projection.
    """
    x = np.asarray(x, dtype=np.float64)
    spec = np.fft.rfft(x)
    k = crossover_bin(len(x), sample_rate, cutoff_hz)
    low = spec.copy()
    low[k:] = 0
    high = spec - low
    return np.fft.irfft(low, len(x)), np.fft.irfft(high, len(x))


def low_frequency_replacement(predicted: Waveform, original: Waveform) -> Waveform:
    """Keep ``predicted`` above 4 kHz, take everything below from ``original``.

    The split is a hard bin split over a single analysis frame spanning the
    whole signal. Unlike an overlapped short-time grid this is a projection,
    so ``LFR(LFR(p, o), o) == LFR(p, o)`` and ``LFR(x, x) == x`` up to rounding.
    """
    if len(predicted) != len(original):
        raise ValueError(f"length mismatch: {len(predicted)} vs {len(original)}")
    if predicted.sample_rate != original.sample_rate:
        raise ValueError("sample rate mismatch")
    _require_rate(predicted, WIDE_RATE, "low_frequency_replacement")
    low, _ = band_split(original.samples)
    _, high = band_split(predicted.samples)
    return replace(predicted, samples=low + high)


def upper_band_ratio(x: np.ndarray, sample_rate: int = WIDE_RATE,
                     cutoff_hz: float = CROSSOVER_HZ) -> float:
    """Fraction of signal energy at or above ``cutoff_hz`` (periodogram)."""
    spec = np.abs(np.fft.rfft(np.asarray(x, dtype=np.float64))) ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    return float(spec[freqs >= cutoff_hz].sum() / (spec.sum() + _BW_EPS))


def detect_bandwidth(w: Waveform, threshold: float = BANDWIDTH_THRESHOLD) -> Band:
    """Classify a 16 kHz signal as narrow or wide by its 4-8 kHz energy share."""
    _require_rate(w, WIDE_RATE, "detect_bandwidth")
    if len(w) < WIDE_RATE // 2:
        raise ValueError("detect_bandwidth needs at least 0.5 s of audio")
    ratio = upper_band_ratio(w.samples, w.sample_rate)
    return Band.NARROW if ratio < threshold else Band.WIDE


def chunk(w: Waveform, seg_len: float, keep_silence: bool = True,
          source_id: str = "") -> list[Chunk]:
    """Split into non-overlapping fixed-length chunks, dropping the remainder.

    ``keep_silence`` is accepted for interface symmetry with VAD-trimmed
    chunking; silence is never trimmed here.
    """
    if seg_len <= 0:
        raise ValueError("seg_len must be positive")
    n = int(round(seg_len * w.sample_rate))
    count = len(w) // n
    return [Chunk(w.samples[i * n:(i + 1) * n], source_id, i * n) for i in range(count)]


def read_wav(path: str | Path, band: Band = Band.UNKNOWN) -> Waveform:
    """Read a mono 16-bit PCM RIFF file."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        rate = f.getframerate()
        data = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return Waveform(data.astype(np.float64) / 32768.0, rate, band)


def write_wav(path: str | Path, w: Waveform) -> None:
    """Write a mono 16-bit PCM RIFF file (samples clipped to [-1, 1))."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def band_energy_db(x: np.ndarray, lo_hz: float, hi_hz: float,
                   sample_rate: int = WIDE_RATE) -> float:
    """Energy in [lo_hz, hi_hz) relative to total energy, in dB."""
    spec = np.abs(np.fft.rfft(np.asarray(x, dtype=np.float64))) ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    sel = (freqs >= lo_hz) & (freqs < hi_hz)
    return float(10 * math.log10((spec[sel].sum() + _BW_EPS) / (spec.sum() + _BW_EPS)))
