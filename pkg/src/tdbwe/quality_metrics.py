"""Distortion and quality metrics between a reference and an extended signal.

The first argument is always the reference. ``lsd`` and ``mse_time`` are
symmetric; ``estoi`` and ``pesq_adapter`` are not.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from scipy import signal as sig

from .signal_core import StftConfig, Waveform, stft

log = logging.getLogger(__name__)

LSD_STFT = StftConfig(fft_size=1024, hop=120, win_length=600)
MAG_FLOOR = 1e-7

# ESTOI analysis constants
ESTOI_RATE = 10000
ESTOI_FRAME = 256
ESTOI_FFT = 512
ESTOI_BANDS = 15
ESTOI_MIN_FREQ = 150.0
ESTOI_SEGMENT = 30
ESTOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


def _samples(w) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def _check_pair(x, y):
    if isinstance(x, Waveform) and isinstance(y, Waveform) and x.sample_rate != y.sample_rate:
        raise ValueError(f"sample rate mismatch: {x.sample_rate} vs {y.sample_rate}")
    a, b = _samples(x), _samples(y)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def lsd(x, y, c: StftConfig = LSD_STFT, band: tuple[float, float] | None = None,
        sample_rate: int = 16000) -> float:
    """Log-spectral distance in dB.

    Mean over frames of the RMS (over bins) difference of ``20 log10 |STFT|``.
    ``band=(lo, hi)`` compares the band-limited parts of both signals: each is
    restricted to ``lo <= f < hi`` Hz with a whole-signal DFT mask before the
    STFT, and only bins inside the band are scored. Without the mask, window
    leakage from out-of-band content would dominate the in-band distance.
    """
    a, b = _check_pair(x, y)
    if band is not None:
        a, b = _band_limit(a, band, sample_rate), _band_limit(b, band, sample_rate)
    X = 20 * np.log10(np.maximum(np.abs(stft(a, c)), MAG_FLOOR))
    Y = 20 * np.log10(np.maximum(np.abs(stft(b, c)), MAG_FLOOR))
    if band is not None:
        freqs = np.fft.rfftfreq(c.fft_size, 1.0 / sample_rate)
        sel = (freqs >= band[0]) & (freqs < band[1])
        X, Y = X[:, sel], Y[:, sel]
    return float(np.mean(np.sqrt(np.mean((X - Y) ** 2, axis=1))))


def _band_limit(x, band, sample_rate):
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    spec[(freqs < band[0]) | (freqs >= band[1])] = 0
    return np.fft.irfft(spec, len(x))


def mse_time(x, y) -> float:
    a, b = _check_pair(x, y)
    return float(np.mean((a - b) ** 2))


def deep_feature_mse(x, y, encoder) -> float:
    """Sum over encoder blocks of the mean squared activation difference.

    ``encoder`` maps a (1, T) float tensor to a sequence of block activations.
    """
    a, b = _check_pair(x, y)
    with torch.no_grad():
        fa = encoder(torch.as_tensor(a, dtype=torch.float32).unsqueeze(0))
        fb = encoder(torch.as_tensor(b, dtype=torch.float32).unsqueeze(0))
    return float(sum(torch.mean((p - q) ** 2) for p, q in zip(fa, fb)))


# ---------------------------------------------------------------------------
# ESTOI
# ---------------------------------------------------------------------------


def _hann(n):
    # symmetric Hann without the zero end points
    return np.hanning(n + 2)[1:-1]


def third_octave_matrix(fs=ESTOI_RATE, nfft=ESTOI_FFT, num_bands=ESTOI_BANDS,
                        min_freq=ESTOI_MIN_FREQ) -> np.ndarray:
    """(num_bands, nfft // 2 + 1) 0/1 matrix grouping FFT bins into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        obm[i, np.argmin((f - lo[i]) ** 2):np.argmin((f - hi[i]) ** 2)] = 1.0
    return obm


def _frames(x, framelen, hop):
    starts = range(0, len(x) - framelen, hop)
    return np.array([x[s:s + framelen] for s in starts]).reshape(-1, framelen)


def _overlap_add(frames, hop):
    n, framelen = frames.shape
    out = np.zeros((n - 1) * hop + framelen) if n else np.zeros(0)
    for i, frame in enumerate(frames):
        out[i * hop:i * hop + framelen] += frame
    return out


def remove_silent_frames(x, y, dyn_range=ESTOI_DYN_RANGE, framelen=ESTOI_FRAME, hop=ESTOI_FRAME // 2):
    """Drop frames more than ``dyn_range`` dB below the loudest reference frame."""
    w = _hann(framelen)
    xf = _frames(x, framelen, hop) * w
    yf = _frames(y, framelen, hop) * w
    energies = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energies > np.max(energies) - dyn_range
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x):
    spec = np.fft.rfft(_frames(x, ESTOI_FRAME, ESTOI_FRAME // 2) * _hann(ESTOI_FRAME), n=ESTOI_FFT)
    return np.sqrt(third_octave_matrix() @ (np.abs(spec) ** 2).T)


def _normalize(v, axis):
    v = v - v.mean(axis=axis, keepdims=True)
    norm = np.sqrt(np.sum(v ** 2, axis=axis, keepdims=True))
    return np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)


def estoi_arrays(clean: np.ndarray, degraded: np.ndarray, fs: int) -> float:
    """ESTOI of raw arrays at any sample rate (resampled to 10 kHz)."""
    clean = np.asarray(clean, dtype=np.float64)
    degraded = np.asarray(degraded, dtype=np.float64)
    if clean.shape != degraded.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {degraded.shape}")
    if len(clean) < fs // 2:
        raise ValueError("estoi needs at least 0.5 s of audio")
    if fs != ESTOI_RATE:
        g = math.gcd(ESTOI_RATE, fs)
        clean = sig.resample_poly(clean, ESTOI_RATE // g, fs // g)
        degraded = sig.resample_poly(degraded, ESTOI_RATE // g, fs // g)
    clean, degraded = remove_silent_frames(clean, degraded)
    X, Y = _band_envelopes(clean), _band_envelopes(degraded)
    n = X.shape[1]
    if n < ESTOI_SEGMENT:
        warnings.warn("not enough non-silent frames for ESTOI; returning 1e-5", RuntimeWarning)
        return 1e-5
    # (segments, bands, frames) sliding windows
    xs = np.lib.stride_tricks.sliding_window_view(X, ESTOI_SEGMENT, axis=1).transpose(1, 0, 2)
    ys = np.lib.stride_tricks.sliding_window_view(Y, ESTOI_SEGMENT, axis=1).transpose(1, 0, 2)
    xn = _normalize(_normalize(xs, axis=2), axis=1)
    yn = _normalize(_normalize(ys, axis=2), axis=1)
    return float(np.sum(xn * yn) / (xn.shape[0] * ESTOI_SEGMENT))


def estoi(clean: Waveform, degraded: Waveform) -> float:
    a, b = _check_pair(clean, degraded)
    return estoi_arrays(a, b, clean.sample_rate if isinstance(clean, Waveform) else 16000)


# ---------------------------------------------------------------------------
# PESQ
# ---------------------------------------------------------------------------


def default_pesq_evaluator():
    """Wideband evaluator backed by the ``pesq`` package, or None if not installed."""
    try:
        from pesq import pesq
    except ImportError:
        return None

    def evaluate(ref, deg, fs):
        return pesq(fs, ref, deg, "wb")

    return evaluate


def pesq_adapter(clean, degraded, evaluator=None) -> float | None:
    """Score from an external PESQ evaluator, or None when none is configured or it fails.

    ``evaluator(ref, deg, fs) -> float`` is any callable.
    """
    if evaluator is None:
        return None
    a, b = _check_pair(clean, degraded)
    fs = clean.sample_rate if isinstance(clean, Waveform) else 16000
    try:
        return float(evaluator(a, b, fs))
    except Exception as exc:  # noqa: BLE001 - evaluator is third-party code
        warnings.warn(f"PESQ evaluator failed: {exc}", RuntimeWarning)
        return None


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class QualityReport:
    pesq: float | None
    estoi: float | None
    lsd: float
    mse_time: float
    deep_feature_mse: float | None = None


def quality_report(reference: Waveform, estimate: Waveform, encoder=None,
                   pesq_evaluator=None) -> QualityReport:
    est = estoi(reference, estimate) if len(reference) >= reference.sample_rate // 2 else None
    dfm = deep_feature_mse(reference, estimate, encoder) if encoder is not None else None
    return QualityReport(
        pesq=pesq_adapter(reference, estimate, pesq_evaluator),
        estoi=est,
        lsd=lsd(reference, estimate),
        mse_time=mse_time(reference, estimate),
        deep_feature_mse=dfm,
    )


QUALITY_COLUMNS = ("utt_id", "system") + tuple(f.name for f in fields(QualityReport))


def write_quality_table(path, rows) -> Path:
    """Write ``(utt_id, system, QualityReport)`` rows as a tab-separated table.

    Absent metrics are written as empty cells.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(QUALITY_COLUMNS)
        for utt_id, system, report in rows:
            values = asdict(report)
            writer.writerow([utt_id, system] + ["" if values[k] is None else f"{values[k]:.6g}"
                                                for k in QUALITY_COLUMNS[2:]])
    return path


def read_quality_table(path) -> list[dict]:
    with Path(path).open() as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    for r in rows:
        for k in QUALITY_COLUMNS[2:]:
            r[k] = float(r[k]) if r[k] != "" else None
    return rows


def summarize_quality(rows: list[dict]) -> dict[str, dict[str, float | None]]:
    """Per-system averages of each metric, skipping absent cells."""
    out: dict[str, dict[str, float | None]] = {}
    for system in dict.fromkeys(r["system"] for r in rows):
        sel = [r for r in rows if r["system"] == system]
        out[system] = {}
        for k in QUALITY_COLUMNS[2:]:
            vals = [r[k] for r in sel if r[k] is not None]
            out[system][k] = float(np.mean(vals)) if vals else None
    return out
