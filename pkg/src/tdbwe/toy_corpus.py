"""Synthetic speech-like corpus for desk-scale experiments.

Each toy speaker is a source-filter voice: a jittered glottal pulse train
with a speaker-specific pitch, formants scaled by a vocal-tract factor, and
fricative noise bursts whose spectral centre is speaker dependent. Voiced
segments carry real energy above 4 kHz (upper formants, aspiration) and
fricatives are mostly above 4 kHz with a tail below it, so the upper band
is partially predictable from the lower band.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sig

from .signal_core import WIDE_RATE, Band, Waveform, normalize_amplitude, write_wav

# (F1, F2, F3) in Hz for a handful of vowels
_VOWELS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [530, 1840, 2480],
    [300, 870, 2240],
    [640, 1190, 2390],
    [490, 1350, 1690],
])


@dataclass(frozen=True)
class ToySpeaker:
    speaker_id: str
    f0: float
    tract: float
    fricative_hz: float
    breath: float
    gender: str


def make_speakers(n: int, seed: int = 0) -> list[ToySpeaker]:
    rng = np.random.default_rng(seed)
    speakers = []
    for i in range(n):
        gender = "m" if i % 2 == 0 else "f"
        f0 = rng.uniform(95, 145) if gender == "m" else rng.uniform(175, 250)
        tract = rng.uniform(0.85, 1.0) if gender == "m" else rng.uniform(1.0, 1.18)
        speakers.append(ToySpeaker(
            speaker_id=f"spk{i:03d}",
            f0=float(f0),
            tract=float(tract),
            fricative_hz=float(rng.uniform(4500, 6500)),
            breath=float(rng.uniform(0.003, 0.01)),
            gender=gender,
        ))
    return speakers


def _resonator(x: np.ndarray, freq: float, bw: float, fs: int = WIDE_RATE) -> np.ndarray:
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1 - r]
    return sig.lfilter(b, a, x)


def _voiced(spk: ToySpeaker, n: int, vowel: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    fs = WIDE_RATE
    # glottal pulses with jitter and a slow pitch contour
    contour = spk.f0 * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(1, 3) * np.arange(n) / fs
                                          + rng.uniform(0, 2 * np.pi)))
    phase = np.cumsum(contour / fs)
    src = np.zeros(n)
    idx = np.nonzero(np.diff(np.floor(phase)) > 0)[0]
    src[idx] = 1.0 + 0.05 * rng.standard_normal(len(idx))
    # glottal roll-off (-12 dB/oct) with lip radiation (+6 dB/oct)
    src = sig.lfilter([1.0, -1.0], np.convolve([1.0, -0.97], [1.0, -0.97]), src)
    src += spk.breath * rng.standard_normal(n)
    formants = list(vowel * spk.tract) + [3500 * spk.tract, 4900 * spk.tract, 6200 * spk.tract]
    bws = [80, 100, 140, 200, 300, 400]
    gains = [1.0, 0.6, 0.3, 0.15, 1.0, 0.8]
    out = np.zeros(n)
    for f, bw, g in zip(formants, bws, gains):
        out += g * _resonator(src, min(f, 7600), bw)
    return out


def _fricative(spk: ToySpeaker, n: int, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(n)
    lo = max(spk.fricative_hz - 1500, 4000)
    hi = min(spk.fricative_hz + 1500, 7800)
    b, a = sig.butter(4, [lo, hi], btype="bandpass", fs=WIDE_RATE)
    return 0.15 * sig.lfilter(b, a, noise)


def _envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r:
        w = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, r))
        env[:r] = w
        env[n - r:] = w[::-1]
    return env


def synth_utterance(spk: ToySpeaker, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Concatenate silences, vowels and fricatives into one utterance."""
    fs = WIDE_RATE
    total = int(duration * fs)
    out = np.zeros(total)
    pos = int(rng.uniform(0.05, 0.25) * fs)
    last_fric = pos
    while pos < total:
        kind = rng.choice(["vowel", "vowel", "fric", "sil"], p=[0.35, 0.3, 0.2, 0.15])
        # every second of speech gets at least one fricative
        if pos - last_fric > fs:
            kind = "fric"
        if kind == "fric":
            last_fric = pos
        if kind == "vowel":
            n = int(rng.uniform(0.08, 0.25) * fs)
            seg = _voiced(spk, n, _VOWELS[rng.integers(len(_VOWELS))], rng)
            seg *= rng.uniform(0.5, 1.0)
        elif kind == "fric":
            n = int(rng.uniform(0.05, 0.15) * fs)
            seg = _fricative(spk, n, rng) * rng.uniform(0.3, 0.7)
        else:
            n = int(rng.uniform(0.05, 0.3) * fs)
            seg = np.zeros(n)
        n = min(n, total - pos)
        seg = seg[:n] * _envelope(n, int(0.01 * fs))
        out[pos:pos + n] += seg
        pos += n
    out[-int(0.05 * fs):] = 0.0
    out += 1e-4 * rng.standard_normal(total)
    return out


@dataclass
class ToyUtterance:
    utt_id: str
    speaker: ToySpeaker
    waveform: Waveform


def make_corpus(n_speakers: int = 10, utts_per_speaker: int = 10, duration: float = 4.0,
                seed: int = 0) -> list[ToyUtterance]:
    """Deterministic list of amplitude-normalized wideband toy utterances."""
    rng = np.random.default_rng(seed + 1)
    corpus = []
    for spk in make_speakers(n_speakers, seed):
        for j in range(utts_per_speaker):
            x = synth_utterance(spk, duration, rng)
            w = normalize_amplitude(Waveform(x, WIDE_RATE, Band.WIDE))
            corpus.append(ToyUtterance(f"{spk.speaker_id}-u{j:03d}", spk, w))
    return corpus


def write_corpus(corpus: list[ToyUtterance], root: str | Path) -> Path:
    """Write utterances as wav files plus a wide-band manifest; returns the manifest path."""
    from .pipeline import ManifestRow, write_manifest

    root = Path(root)
    rows = []
    for u in corpus:
        rel = Path(u.speaker.speaker_id) / f"{u.utt_id}.wav"
        write_wav(root / rel, u.waveform)
        rows.append(ManifestRow(u.utt_id, u.speaker.speaker_id, str(rel), u.waveform.duration,
                                Band.WIDE, {"gender": u.speaker.gender, "source": "AFV"}))
    manifest = root / "wide.tsv"
    write_manifest(manifest, rows)
    return manifest


def main(argv=None):
    parser = argparse.ArgumentParser(description="Write a synthetic toy speech corpus.")
    parser.add_argument("--out", required=True)
    parser.add_argument("--speakers", type=int, default=10)
    parser.add_argument("--utts", type=int, default=10)
    parser.add_argument("--duration", type=float, default=4.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    corpus = make_corpus(args.speakers, args.utts, args.duration, args.seed)
    print(write_corpus(corpus, args.out))


if __name__ == "__main__":
    main()
