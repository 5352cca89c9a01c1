"""Desk-scale speaker verification backend.

Log-mel front end, relative-energy VAD, a small residual speaker encoder
trained with an additive-angular-margin softmax, LDA and two-covariance
PLDA scoring.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .signal_core import WIDE_RATE, Waveform

log = logging.getLogger(__name__)

FRAME_LEN = 400  # 25 ms
FRAME_HOP = 160  # 10 ms
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10
VAD_OFFSET = -3.0


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(n_mels=N_MELS, fmin=0.0, fmax=WIDE_RATE / 2) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=WIDE_RATE, fmin=0.0,
                   fmax=None) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


class LogMel(torch.nn.Module):
    """(B, T) waveform -> (B, n_mels, frames) natural-log mel energies."""

    def __init__(self, n_mels=N_MELS, frame_len=FRAME_LEN, hop=FRAME_HOP, n_fft=N_FFT,
                 sample_rate=WIDE_RATE, floor=LOG_FLOOR):
        super().__init__()
        self.frame_len, self.hop, self.n_fft, self.floor = frame_len, hop, n_fft, floor
        self.register_buffer("window", torch.hann_window(frame_len, dtype=torch.float64).float())
        self.register_buffer("fbank", torch.from_numpy(
            mel_filterbank(n_mels, n_fft, sample_rate)).float())

    def forward(self, x):
        if x.dim() == 3:
            x = x.squeeze(1)
        if x.shape[-1] < self.frame_len:
            raise ValueError(f"need at least {self.frame_len} samples for one frame")
        frames = x.unfold(-1, self.frame_len, self.hop) * self.window.to(x.dtype)
        power = torch.fft.rfft(frames, n=self.n_fft).abs() ** 2
        mel = power @ self.fbank.to(x.dtype).t()
        return torch.log(torch.clamp(mel, min=self.floor)).transpose(1, 2)


_LOGMEL = None


def logmel(w: Waveform) -> np.ndarray:
    """Log-mel features of a 16 kHz waveform, shape (frames, 80)."""
    global _LOGMEL
    if w.sample_rate != WIDE_RATE:
        raise ValueError(f"logmel expects {WIDE_RATE} Hz input, got {w.sample_rate}")
    if _LOGMEL is None:
        _LOGMEL = LogMel().double()
    with torch.no_grad():
        out = _LOGMEL(torch.from_numpy(w.samples).unsqueeze(0))
    return out[0].t().numpy()


def frame_log_energy(features: np.ndarray) -> np.ndarray:
    return np.log(np.sum(np.exp(features), axis=-1))


def energy_vad(features: np.ndarray, offset: float = VAD_OFFSET) -> np.ndarray:
    """Boolean speech mask: frame log-energy above the utterance mean plus ``offset``.

    Frames sitting at the log floor are never speech.
    """
    features = np.asarray(features)
    if features.size == 0:
        raise ValueError("empty feature matrix")
    e = frame_log_energy(features)
    floor = math.log(features.shape[-1] * LOG_FLOOR)
    return (e > e.mean() + offset) & (e > floor + 1e-6)


# ---------------------------------------------------------------------------
# Speaker encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    n_mels: int = N_MELS
    channels: tuple[int, ...] = (32, 32, 64, 64, 128)
    dilations: tuple[int, ...] = (1, 2, 3, 4, 1)
    emb_dim: int = 64
    margin: float = 0.3
    scale: float = 30.0
    steps: int = 500
    batch_size: int = 32
    crop_frames: int = 200
    lr: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.dilations = tuple(self.dilations)
        if len(self.channels) != len(self.dilations):
            raise ValueError("channels and dilations must have equal length")


class _ResBlock(torch.nn.Module):
    def __init__(self, cin, cout, dilation):
        super().__init__()
        self.conv1 = torch.nn.Conv1d(cin, cout, 3, padding=dilation, dilation=dilation)
        self.bn1 = torch.nn.BatchNorm1d(cout)
        self.conv2 = torch.nn.Conv1d(cout, cout, 3, padding=dilation, dilation=dilation)
        self.bn2 = torch.nn.BatchNorm1d(cout)
        self.skip = torch.nn.Conv1d(cin, cout, 1) if cin != cout else torch.nn.Identity()

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(h)) + self.skip(x))


class SpeakerEncoder(torch.nn.Module):
    """Residual 1-D conv encoder over log-mel frames with mean+std pooling."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        c = config or EncoderConfig()
        self.config = c
        self.frontend = LogMel(c.n_mels)
        self.input_norm = torch.nn.BatchNorm1d(c.n_mels)
        chans = (c.channels[0],) + c.channels
        self.stem = torch.nn.Conv1d(c.n_mels, c.channels[0], 3, padding=1)
        self.blocks = torch.nn.ModuleList(
            _ResBlock(chans[i], chans[i + 1], d) for i, d in enumerate(c.dilations))
        self.embed = torch.nn.Linear(2 * c.channels[-1], c.emb_dim)

    def block_outputs(self, feats):
        """Activations of every residual block for (B, n_mels, frames) features."""
        h = F.relu(self.stem(self.input_norm(feats)))
        outs = []
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        return outs

    def embed_features(self, feats):
        h = self.block_outputs(feats)[-1]
        stats = torch.cat([h.mean(dim=-1), h.std(dim=-1, unbiased=False)], dim=1)
        return self.embed(stats)

    def activations(self, wave):
        """Block activations for a (B, T) waveform batch; used as a deep-feature provider."""
        return self.block_outputs(self.frontend(wave))

    def forward(self, wave):
        return self.embed_features(self.frontend(wave))


class AAMSoftmax(torch.nn.Module):
    """Additive angular margin classification head."""

    def __init__(self, emb_dim, n_classes, margin=0.3, scale=30.0):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.randn(n_classes, emb_dim) * 0.01)
        self.margin, self.scale = margin, scale

    def logits(self, emb, labels=None):
        cos = F.linear(F.normalize(emb), F.normalize(self.weight)).clamp(-1 + 1e-7, 1 - 1e-7)
        if labels is None:
            return self.scale * cos
        m = self.margin
        sin = torch.sqrt(1 - cos ** 2)
        phi = cos * math.cos(m) - sin * math.sin(m)
        # keep the target logit monotone in the angle past pi - m
        phi = torch.where(cos > math.cos(math.pi - m), phi, cos - math.sin(math.pi - m) * m)
        onehot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        return self.scale * (onehot * phi + (1 - onehot) * cos)

    def forward(self, emb, labels):
        return F.cross_entropy(self.logits(emb, labels), labels)


def _speech_features(w: Waveform) -> np.ndarray:
    feats = logmel(w)
    mask = energy_vad(feats)
    return feats[mask] if mask.any() else feats


def train_speaker_encoder(utterances, cfg: EncoderConfig | None = None):
    """Train a :class:`SpeakerEncoder` on ``(speaker_id, Waveform)`` pairs.

    Returns:
        (encoder, history) where history lists per-step loss and accuracy.

    """
    cfg = cfg or EncoderConfig()
    utterances = list(utterances)
    speakers = sorted({s for s, _ in utterances})
    if len(speakers) < 2:
        raise ValueError("speaker encoder training needs at least 2 speakers")
    index = {s: i for i, s in enumerate(speakers)}
    feats = [_speech_features(w).astype(np.float32) for _, w in utterances]
    labels = np.array([index[s] for s, _ in utterances])

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    enc = SpeakerEncoder(cfg)
    head = AAMSoftmax(cfg.emb_dim, len(speakers), cfg.margin, cfg.scale)
    opt = torch.optim.Adam(list(enc.parameters()) + list(head.parameters()), lr=cfg.lr)
    history = []
    enc.train()
    for step in range(cfg.steps):
        pick = rng.integers(0, len(feats), cfg.batch_size)
        crop = min(cfg.crop_frames, min(len(feats[i]) for i in pick))
        batch = []
        for i in pick:
            start = rng.integers(0, len(feats[i]) - crop + 1)
            batch.append(feats[i][start:start + crop].T)
        x = torch.from_numpy(np.stack(batch))
        y = torch.from_numpy(labels[pick])
        emb = enc.embed_features(x)
        loss = head(emb, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            acc = float((head.logits(emb).argmax(1) == y).float().mean())
        history.append({"step": step + 1, "loss": loss.item(), "acc": acc})
    enc.eval()
    return enc, history


@dataclass
class Embedding:
    vector: np.ndarray
    speaker_id: str | None = None
    condition: dict = field(default_factory=dict)
    utt_id: str | None = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding has non-finite entries")


def extract_embedding(encoder: SpeakerEncoder, w: Waveform, speaker_id=None, condition=None,
                      utt_id=None) -> Embedding:
    """Embedding of the VAD-selected frames of ``w``."""
    if len(w) < FRAME_LEN:
        raise ValueError(f"need at least {FRAME_LEN} samples, got {len(w)}")
    feats = _speech_features(w).astype(np.float32)
    encoder.eval()
    with torch.no_grad():
        vec = encoder.embed_features(torch.from_numpy(feats.T).unsqueeze(0))[0].double().numpy()
    return Embedding(vec, speaker_id, dict(condition or {}), utt_id)


def save_encoder(path, encoder: SpeakerEncoder):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config": asdict(encoder.config), "state": encoder.state_dict()}, str(path))


def load_encoder(path) -> SpeakerEncoder:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    enc = SpeakerEncoder(EncoderConfig(**payload["config"]))
    enc.load_state_dict(payload["state"])
    enc.eval()
    return enc


# ---------------------------------------------------------------------------
# LDA + two-covariance PLDA
# ---------------------------------------------------------------------------


@dataclass
class PldaModel:
    """Two-covariance PLDA in an LDA-projected space.

    ``center`` and ``lda`` map raw embeddings into the model space, where
    ``mean``, ``between_cov`` and ``within_cov`` live.
    """

    mean: np.ndarray
    within_cov: np.ndarray
    between_cov: np.ndarray
    lda: np.ndarray
    center: np.ndarray
    length_norm: bool = True

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.lda.shape[0]:
            raise ValueError(f"embedding dimension {x.shape[1]} != model dimension {self.lda.shape[0]}")
        z = (x - self.center) @ self.lda
        if self.length_norm:
            norms = np.linalg.norm(z, axis=1, keepdims=True)
            z = z / np.maximum(norms, 1e-12) * math.sqrt(z.shape[1])
        return z

    def save(self, path):
        np.savez(path, **{k: np.asarray(v) for k, v in asdict(self).items()})

    @classmethod
    def load(cls, path):
        data = np.load(path)
        kw = {k: data[k] for k in data.files}
        kw["length_norm"] = bool(kw["length_norm"])
        return cls(**kw)


def _class_stats(x, labels):
    classes = list(dict.fromkeys(labels))
    labels = np.asarray(labels)
    means = np.stack([x[labels == c].mean(axis=0) for c in classes])
    counts = np.array([np.sum(labels == c) for c in classes])
    resid = x - means[[classes.index(c) for c in labels]]
    return means, counts, resid


def train_lda(x: np.ndarray, labels, d_lda: int) -> np.ndarray:
    """Orthonormal basis (d, d_lda) of the leading LDA directions."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    means, counts, resid = _class_stats(x, labels)
    mu = x.mean(axis=0)
    sw = resid.T @ resid / len(x)
    sb = ((means - mu).T * counts) @ (means - mu) / len(x)
    rank = np.linalg.matrix_rank(sw, tol=1e-10 * max(np.trace(sw), 1e-300))
    if d_lda > rank:
        warnings.warn(f"within-class scatter has rank {rank}; reducing LDA dimension from "
                      f"{d_lda}", RuntimeWarning)
        d_lda = max(rank, 1)
    from scipy.linalg import eigh

    reg = 1e-9 * np.trace(sw) / d
    vals, vecs = eigh(sb, sw + reg * np.eye(d))
    order = np.argsort(vals)[::-1]
    basis, _ = np.linalg.qr(vecs[:, order[:d_lda]])
    # QR may flip signs; keep each direction's orientation
    signs = np.sign(np.sum(basis * vecs[:, order[:d_lda]], axis=0))
    return basis * np.where(signs == 0, 1, signs)


def train_lda_plda(x: np.ndarray, labels, d_lda: int = 32, length_norm: bool = True) -> PldaModel:
    """Fit LDA then a closed-form two-covariance PLDA.

    Args:
        x (ndarray): (N, d_emb) embeddings.
        labels (sequence): speaker label per row.
        d_lda (int): projected dimension.

    """
    x = np.asarray(x, dtype=np.float64)
    labels = list(labels)
    if len(set(labels)) < 2:
        raise ValueError("PLDA training needs at least 2 speakers")
    if any(labels.count(s) < 2 for s in set(labels)):
        raise ValueError("PLDA training needs at least 2 utterances per speaker")
    if d_lda > x.shape[1]:
        warnings.warn(f"d_lda {d_lda} exceeds embedding dimension {x.shape[1]}", RuntimeWarning)
        d_lda = x.shape[1]
    center = x.mean(axis=0)
    lda = train_lda(x - center, labels, d_lda)
    model = PldaModel(np.zeros(lda.shape[1]), np.eye(lda.shape[1]), np.eye(lda.shape[1]), lda,
                      center, length_norm)
    z = model.transform(x)
    means, _, resid = _class_stats(z, labels)
    model.mean = z.mean(axis=0)
    model.within_cov = resid.T @ resid / len(z)
    dm = means - model.mean
    model.between_cov = dm.T @ dm / len(means)
    return model


def _llr_terms(model: PldaModel):
    b, w = model.between_cov, model.within_cov
    d = len(b)
    t = b + w
    joint = np.block([[t, b], [b, t]])
    jinv = np.linalg.inv(joint)
    tinv = np.linalg.inv(t)
    a, c = jinv[:d, :d], jinv[:d, d:]
    const = -0.5 * np.linalg.slogdet(joint)[1] + np.linalg.slogdet(t)[1]
    return tinv - a, c, const


def plda_llr(model: PldaModel, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    """Same- vs different-speaker log-likelihood ratio for rows of model-space vectors."""
    q, c, const = _llr_terms(model)
    u = np.atleast_2d(z1) - model.mean
    v = np.atleast_2d(z2) - model.mean
    return (0.5 * np.einsum("ij,jk,ik->i", u, q, u) + 0.5 * np.einsum("ij,jk,ik->i", v, q, v)
            - np.einsum("ij,jk,ik->i", u, c, v) + const)


def plda_score(model: PldaModel, enroll, test) -> float:
    e = enroll.vector if isinstance(enroll, Embedding) else np.asarray(enroll)
    t = test.vector if isinstance(test, Embedding) else np.asarray(test)
    if e.shape != t.shape:
        raise ValueError(f"embedding dimension mismatch: {e.shape} vs {t.shape}")
    return float(plda_llr(model, model.transform(e), model.transform(t))[0])


def plda_score_pairs(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
    """Vectorised :func:`plda_score` over aligned rows."""
    return plda_llr(model, model.transform(enroll), model.transform(test))


# ---------------------------------------------------------------------------
# Embedding tables
# ---------------------------------------------------------------------------


def _tags(cond: dict) -> str:
    return ",".join(f"{k}:{v}" for k, v in sorted(cond.items()))


def _parse_tags(text: str) -> dict:
    if not text:
        return {}
    return dict(item.split(":", 1) for item in text.split(","))


def write_embeddings(path, embeddings: list[Embedding]):
    """Tab-separated ``utt_id speaker_id conditions vector`` rows with a header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["utt_id", "speaker_id", "conditions", "vector"])
        for e in embeddings:
            w.writerow([e.utt_id or "", e.speaker_id or "", _tags(e.condition),
                        " ".join(repr(float(v)) for v in e.vector)])


def read_embeddings(path) -> list[Embedding]:
    with Path(path).open() as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    return [Embedding(np.array([float(v) for v in r["vector"].split()]), r["speaker_id"] or None,
                      _parse_tags(r["conditions"]), r["utt_id"] or None) for r in rows]
