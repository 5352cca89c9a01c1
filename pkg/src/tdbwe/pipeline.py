"""Manifests, experiment configs and the five pipeline commands.

Manifests are tab-separated with a header::

    utt_id  speaker_id  path  duration  band  conditions

``path`` is relative to the manifest's directory and ``conditions`` is a
``key:value,key:value`` list (empty when there are none).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import asv_backend as asv
from . import quality_metrics as qm
from . import score_analysis as sa
from .losses import LossSpec
from .models import (DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator,
                     load_checkpoint, save_checkpoint)
from .signal_core import (Band, Waveform, chunk, detect_bandwidth, low_frequency_replacement,
                          make_wide_down, read_wav, write_wav)
from .trainers import ChunkSet, TrainConfig, train_cgan, train_cyclegan, train_regression

log = logging.getLogger(__name__)

SCHEMES = ("expand_all", "expand_narrow", "lfr", "expand_narrow_lfr")
MANIFEST_COLUMNS = ("utt_id", "speaker_id", "path", "duration", "band", "conditions")


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestRow:
    utt_id: str
    speaker_id: str
    path: str
    duration: float
    band: Band = Band.WIDE
    conditions: dict = field(default_factory=dict)

    def __post_init__(self):
        self.band = Band(self.band)
        self.duration = float(self.duration)
        if not self.duration > 0:
            raise ValueError(f"{self.utt_id}: duration must be positive")


def _format_tags(tags: dict) -> str:
    return ",".join(f"{k}:{v}" for k, v in sorted(tags.items()))


def _parse_tags(text: str) -> dict:
    return dict(item.split(":", 1) for item in text.split(",")) if text else {}


def write_manifest(path, rows: list[ManifestRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r.utt_id, r.speaker_id, r.path, f"{r.duration:.6f}", r.band.value,
                        _format_tags(r.conditions)])
    return path


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.reader(f, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: expected header {MANIFEST_COLUMNS}, got {header}")
        rows, seen = [], set()
        for n, rec in enumerate(reader, start=2):
            if len(rec) != len(MANIFEST_COLUMNS):
                raise ValueError(f"{path}:{n}: expected {len(MANIFEST_COLUMNS)} fields")
            row = ManifestRow(rec[0], rec[1], rec[2], float(rec[3]), rec[4], _parse_tags(rec[5]))
            if row.utt_id in seen:
                raise ValueError(f"{path}:{n}: duplicate utt_id {row.utt_id!r}")
            seen.add(row.utt_id)
            rows.append(row)
    return rows


def audio_path(manifest_path, row: ManifestRow) -> Path:
    p = Path(row.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def load_rows(manifest_path) -> list[tuple[ManifestRow, Waveform]]:
    return [(r, read_wav(audio_path(manifest_path, r), r.band)) for r in read_manifest(manifest_path)]


def write_pairs(path, pairs: list[tuple[str, str]]) -> Path:
    path = Path(path)
    with path.open("w") as f:
        f.write("wide_id\twide_down_id\n")
        for a, b in pairs:
            f.write(f"{a}\t{b}\n")
    return path


def read_pairs(path) -> list[tuple[str, str]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t") != ["wide_id", "wide_down_id"]:
        raise ValueError(f"{path}: missing pairs header")
    return [tuple(line.split("\t")) for line in lines[1:] if line]


# ---------------------------------------------------------------------------
# Experiment config
# ---------------------------------------------------------------------------


@dataclass
class PathsConfig:
    wide_manifest: str | None = None
    prepared_dir: str | None = None
    out_dir: str = "run"
    checkpoint: str | None = None
    backend_dir: str | None = None


@dataclass
class DataConfig:
    val_fraction: float = 0.05
    paired_cyclegan: bool = False


@dataclass
class BackendConfig:
    d_lda: int = 32
    crop_seconds: float = 1.0
    crop_hop_seconds: float = 0.5


@dataclass
class EvaluateConfig:
    systems: dict = field(default_factory=dict)  # name -> manifest; first entry is the baseline
    enroll_manifest: str | None = None
    trials: str | None = None
    reference_manifest: str | None = None
    pairs: str | None = None
    p_tar: float = 0.05
    condition_keys: list = field(default_factory=lambda: ["source"])
    histogram_bins: int = 40
    tsne_perplexity: float = 10.0
    tsne_iterations: int = 500


@dataclass
class ExperimentConfig:
    mode: str = "regression"
    seed: int = 0
    scheme: str = "expand_all"
    paths: PathsConfig = field(default_factory=PathsConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    train: dict = field(default_factory=dict)
    encoder: asv.EncoderConfig = field(default_factory=asv.EncoderConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    data: DataConfig = field(default_factory=DataConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    base_dir: str = "."

    def __post_init__(self):
        if self.mode not in ("regression", "cgan", "cyclegan", "asv"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")

    def train_config(self) -> TrainConfig:
        mode = "regression" if self.mode == "asv" else self.mode
        return TrainConfig.recipe(mode, **{**self.train, "seed": self.seed})

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p


_SECTIONS = {
    "paths": PathsConfig, "generator": GeneratorConfig, "discriminator": DiscriminatorConfig,
    "loss": LossSpec, "encoder": asv.EncoderConfig, "backend": BackendConfig, "data": DataConfig,
    "evaluate": EvaluateConfig,
}


def _strict(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ValueError(f"config section {where!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return cls(**values)


def parse_config(data: dict, base_dir=".") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig`, rejecting unknown keys at every level."""
    data = dict(data or {})
    top = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"base_dir"}
    unknown = set(data) - top
    if unknown:
        raise ValueError(f"unknown top-level config key(s): {sorted(unknown)}")
    kw = {k: v for k, v in data.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        if name in data:
            kw[name] = _strict(cls, data[name] or {}, name)
    train = kw.get("train") or {}
    bad = set(train) - {f.name for f in dataclasses.fields(TrainConfig)} | ({"mode", "seed"} & set(train))
    if bad:
        raise ValueError(f"unknown key(s) in train: {sorted(bad)}")
    kw["train"] = dict(train)
    cfg = ExperimentConfig(base_dir=str(base_dir), **kw)
    cfg.train_config()  # validate early
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with path.open() as f:
        data = yaml.safe_load(f)
    return parse_config(data, base_dir=path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d.pop("base_dir")
    return json.loads(json.dumps(d, default=list))


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    return path


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def cmd_prepare(manifest_wide, out_dir) -> dict:
    """Create a wide_down copy of every wideband utterance plus a pairing index."""
    manifest_wide = Path(manifest_wide)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, pairs, errors = [], [], []
    for row in read_manifest(manifest_wide):
        try:
            w = read_wav(audio_path(manifest_wide, row), Band.WIDE)
            down = make_wide_down(w)
        except Exception as exc:  # noqa: BLE001 - one bad file must not stop the batch
            log.error("prepare: skipping %s: %s", row.utt_id, exc)
            errors.append({"utt_id": row.utt_id, "error": str(exc)})
            continue
        rel = Path("wide_down") / Path(row.path).with_suffix(".wav")
        write_wav(out_dir / rel, down)
        new_id = f"{row.utt_id}_wd"
        tags = dict(row.conditions, source="CTS")
        rows.append(ManifestRow(new_id, row.speaker_id, str(rel), down.duration, Band.WIDE_DOWN, tags))
        pairs.append((row.utt_id, new_id))
    write_manifest(out_dir / "wide_down.tsv", rows)
    write_pairs(out_dir / "pairs.tsv", pairs)
    return {"wide_down_manifest": str(out_dir / "wide_down.tsv"), "pairs": str(out_dir / "pairs.tsv"),
            "rows": len(rows), "errors": errors}


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def split_speakers(speakers, fraction, seed) -> set:
    """Held-out validation speakers, chosen deterministically from ``seed``."""
    speakers = sorted(set(speakers))
    if len(speakers) < 2 or fraction <= 0:
        return set()
    n = min(max(1, int(round(fraction * len(speakers)))), len(speakers) - 1)
    rng = np.random.default_rng(seed)
    return set(rng.choice(speakers, size=n, replace=False).tolist())


def _chunks(waves, seg_samples):
    out = []
    for w in waves:
        out.extend(c.samples for c in chunk(w, seg_samples / w.sample_rate))
    return np.array(out, dtype=np.float32).reshape(-1, seg_samples)


def _paired_sets(cfg: ExperimentConfig, tc: TrainConfig):
    wide_path = cfg.resolve(cfg.paths.wide_manifest)
    prep = cfg.resolve(cfg.paths.prepared_dir)
    if wide_path is None or prep is None:
        raise ValueError("paired training needs paths.wide_manifest and paths.prepared_dir")
    if not (prep / "pairs.tsv").exists():
        raise ValueError(f"no pairing index at {prep / 'pairs.tsv'}; run prepare first "
                         f"(mode {cfg.mode!r} needs paired data)")
    wide = {r.utt_id: (r, w) for r, w in load_rows(wide_path)}
    down = {r.utt_id: (r, w) for r, w in load_rows(prep / "wide_down.tsv")}
    pairs = [(a, b) for a, b in read_pairs(prep / "pairs.tsv") if a in wide and b in down]
    if not pairs:
        raise ValueError("no usable (wide, wide_down) pairs")
    val_spk = split_speakers([wide[a][0].speaker_id for a, _ in pairs], cfg.data.val_fraction, cfg.seed)
    sets = {}
    for name, sel in (("train", False), ("val", True)):
        chosen = [(a, b) for a, b in pairs if (wide[a][0].speaker_id in val_spk) == sel]
        x = _chunks([down[b][1] for _, b in chosen], tc.seg_samples)
        y = _chunks([wide[a][1] for a, _ in chosen], tc.seg_samples)
        sets[name] = ChunkSet(x, y) if len(x) else None
    if sets["train"] is None:
        raise ValueError("training split is empty")
    return sets["train"], sets["val"]


def _unpaired_sets(cfg: ExperimentConfig, tc: TrainConfig):
    """Domain A = wide_down utterances of one half of the speakers, B = wide of the other."""
    wide_path = cfg.resolve(cfg.paths.wide_manifest)
    prep = cfg.resolve(cfg.paths.prepared_dir)
    if wide_path is None or prep is None or not (prep / "wide_down.tsv").exists():
        raise ValueError("cyclegan needs paths.wide_manifest and a prepared wide_down manifest")
    wide = load_rows(wide_path)
    down = load_rows(prep / "wide_down.tsv")
    speakers = sorted({r.speaker_id for r, _ in wide})
    half = set(speakers[::2])
    a = _chunks([w for r, w in down if r.speaker_id in half], tc.seg_samples)
    b = _chunks([w for r, w in wide if r.speaker_id not in half], tc.seg_samples)
    if not len(a) or not len(b):
        raise ValueError("cyclegan needs audio in both domains")
    return ChunkSet(a), ChunkSet(b)


def _train_backend(cfg: ExperimentConfig, out: Path) -> dict:
    wide_path = cfg.resolve(cfg.paths.wide_manifest)
    if wide_path is None:
        raise ValueError("mode asv needs paths.wide_manifest")
    rows = load_rows(wide_path)
    encoder, hist = asv.train_speaker_encoder([(r.speaker_id, w) for r, w in rows], cfg.encoder)
    embs, labels = backend_training_embeddings(encoder, rows, cfg.backend)
    plda = asv.train_lda_plda(embs, labels, cfg.backend.d_lda)
    out.mkdir(parents=True, exist_ok=True)
    asv.save_encoder(out / "encoder.pt", encoder)
    plda.save(out / "plda.npz")
    np.save(out / "train_embeddings.npy", embs)
    with (out / "history.jsonl").open("w") as f:
        for rec in hist:
            f.write(json.dumps(rec) + "\n")
    dump_config(cfg, out / "config.yaml")
    return {"backend_dir": str(out), "final_acc": hist[-1]["acc"], "steps": len(hist)}


def backend_training_embeddings(encoder, rows, bc: BackendConfig):
    """Embeddings of overlapping crops of every utterance, with speaker labels."""
    embs, labels = [], []
    for r, w in rows:
        n, hop = int(bc.crop_seconds * w.sample_rate), int(bc.crop_hop_seconds * w.sample_rate)
        starts = range(0, max(len(w) - n, 0) + 1, max(hop, 1)) if len(w) >= n else [0]
        for s in starts:
            seg = Waveform(w.samples[s:s + n], w.sample_rate, w.band)
            embs.append(asv.extract_embedding(encoder, seg).vector)
            labels.append(r.speaker_id)
    return np.array(embs), labels


def cmd_train(cfg: ExperimentConfig, out_dir=None, seed: int | None = None) -> dict:
    """Dispatch to the trainer for ``cfg.mode`` and write checkpoint, history and config."""
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if cfg.mode == "asv":
        out = Path(out_dir) if out_dir else cfg.resolve(cfg.paths.backend_dir or cfg.paths.out_dir)
        return _train_backend(cfg, out)
    out = Path(out_dir) if out_dir else cfg.resolve(cfg.paths.out_dir)
    tc = cfg.train_config()
    torch.manual_seed(cfg.seed)
    if cfg.mode in ("regression", "cgan"):
        train, val = _paired_sets(cfg, tc)
    else:
        if cfg.data.paired_cyclegan:
            train, val = _paired_sets(cfg, tc)
        else:
            stream_a, stream_b = _unpaired_sets(cfg, tc)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    history_path = out / "history.jsonl"
    G = build_generator(cfg.generator)
    nets = {"generator": G}
    if cfg.mode == "regression":
        G, hist = train_regression(tc, G, train, val, history_path=history_path,
                                   state_path=out / "train_state.pt")
    elif cfg.mode == "cgan":
        D = build_discriminator(cfg.discriminator)
        G, D, hist = train_cgan(tc, G, D, train, cfg.loss, val, history_path=history_path,
                                state_path=out / "train_state.pt")
        nets["discriminator"] = D
    else:
        G_ba = build_generator(cfg.generator)
        D_a, D_b = build_discriminator(cfg.discriminator), build_discriminator(cfg.discriminator)
        if cfg.data.paired_cyclegan:
            G, G_ba, D_a, D_b, hist = train_cyclegan(tc, G, G_ba, D_a, D_b, train, None, cfg.loss, val,
                                                     history_path=history_path,
                                                     state_path=out / "train_state.pt")
        else:
            G, G_ba, D_a, D_b, hist = train_cyclegan(tc, G, G_ba, D_a, D_b, stream_a, stream_b,
                                                     cfg.loss, history_path=history_path,
                                                     state_path=out / "train_state.pt")
        nets.update(inverse_generator=G_ba, discriminator_a=D_a, discriminator_b=D_b)
    ckpt = out / "checkpoint.pt"
    save_checkpoint(ckpt, nets, extra={"mode": cfg.mode, "seed": cfg.seed})
    steps = hist.of("step")
    return {"checkpoint": str(ckpt), "history": str(history_path), "steps": len(steps)}


# ---------------------------------------------------------------------------
# extend
# ---------------------------------------------------------------------------


def extend_waveform(G, w: Waveform, lfr: bool) -> Waveform:
    if w.sample_rate != 16000:
        raise ValueError(f"model expects 16000 Hz audio, got {w.sample_rate}")
    with torch.no_grad():
        y = G(torch.from_numpy(w.samples.astype(np.float32)).unsqueeze(0))[0].double().numpy()
    out = Waveform(y, w.sample_rate, Band.EXTENDED)
    if lfr:
        out = low_frequency_replacement(out, w)
    return out


def cmd_extend(checkpoint, manifest, scheme: str, out_dir) -> dict:
    """Extend the utterances of ``manifest`` into a parallel tree under ``out_dir``."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    ck = load_checkpoint(checkpoint)
    G = ck.networks["generator"]
    manifest = Path(manifest)
    out_dir = Path(out_dir)
    only_narrow = scheme in ("expand_narrow", "expand_narrow_lfr")
    lfr = scheme in ("lfr", "expand_narrow_lfr")
    rows, errors, extended, copied = [], [], 0, 0
    for row in read_manifest(manifest):
        src = audio_path(manifest, row)
        dst = out_dir / row.path
        try:
            w = read_wav(src, row.band)
            if only_narrow and (len(w) < w.sample_rate // 2 or detect_bandwidth(w) != Band.NARROW):
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src, dst)
                rows.append(dataclasses.replace(row))
                copied += 1
                continue
            y = extend_waveform(G, w, lfr)
        except Exception as exc:  # noqa: BLE001 - per-file failure, keep going
            log.error("extend: %s: %s", row.utt_id, exc)
            errors.append({"utt_id": row.utt_id, "error": str(exc)})
            continue
        write_wav(dst, y)
        rows.append(dataclasses.replace(row, band=Band.EXTENDED))
        extended += 1
    out_manifest = write_manifest(out_dir / "extended.tsv", rows)
    return {"manifest": str(out_manifest), "extended": extended, "copied": copied, "errors": errors}


def _base_id(utt_id: str) -> str:
    return utt_id[:-3] if utt_id.endswith("_wd") else utt_id


def build_trials(enroll_manifest, test_manifest, path, keys=sa.CONDITION_KEYS) -> list[sa.Trial]:
    """All enroll x test pairs, skipping pairs cut from the same source utterance."""
    enroll = read_manifest(enroll_manifest)
    test = read_manifest(test_manifest)
    trials = []
    for e in enroll:
        for t in test:
            if _base_id(e.utt_id) == _base_id(t.utt_id):
                continue
            trials.append(sa.Trial(e.utt_id, t.utt_id, e.speaker_id == t.speaker_id,
                                   sa.trial_conditions(e.conditions, t.conditions, keys)))
    sa.write_trials(path, trials)
    return trials


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _relative_change(new, base):
    if base == 0 or math.isnan(base) or math.isnan(new):
        return math.nan
    return 100.0 * (new - base) / base


def cmd_evaluate(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Quality metrics, embeddings, PLDA scores and analysis tables for every system."""
    ev = cfg.evaluate
    if not ev.systems:
        raise ValueError("evaluate.systems is empty")
    out = Path(out_dir) if out_dir else cfg.resolve(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backend = cfg.resolve(cfg.paths.backend_dir)
    if backend is None or not (backend / "encoder.pt").exists():
        raise ValueError("paths.backend_dir must hold a trained encoder (train with mode: asv)")
    encoder = asv.load_encoder(backend / "encoder.pt")
    plda = asv.PldaModel.load(backend / "plda.npz")
    systems = {name: cfg.resolve(p) for name, p in ev.systems.items()}
    baseline = next(iter(systems))
    report = {"systems": list(systems), "baseline": baseline, "notices": []}

    # quality against the wideband references
    ref_rows = {}
    if ev.reference_manifest and ev.pairs:
        ref_path = cfg.resolve(ev.reference_manifest)
        ref_rows = {r.utt_id: r for r in read_manifest(ref_path)}
        pair_map = {b: a for a, b in read_pairs(cfg.resolve(ev.pairs))}
    quality_rows = []
    loaded = {}
    for name, mpath in systems.items():
        loaded[name] = {r.utt_id: (r, w) for r, w in load_rows(mpath)}
        for utt, (r, w) in loaded[name].items():
            ref_id = pair_map.get(utt, utt) if ref_rows else None
            if ref_id not in ref_rows:
                continue
            ref = read_wav(audio_path(ref_path, ref_rows[ref_id]), Band.WIDE)
            if len(ref) != len(w):
                report["notices"].append(f"{name}/{utt}: reference length differs; quality skipped")
                continue
            quality_rows.append((utt, name, qm.quality_report(ref, w, encoder.activations)))
    qpath = qm.write_quality_table(out / "quality.tsv", quality_rows)
    report["quality_table"] = str(qpath)
    report["quality"] = qm.summarize_quality(qm.read_quality_table(qpath))

    # embeddings
    enroll = {}
    if ev.enroll_manifest:
        enroll = {r.utt_id: (r, w) for r, w in load_rows(cfg.resolve(ev.enroll_manifest))}
    emb = {}
    for name in systems:
        table = {}
        for utt, (r, w) in list(enroll.items()) + list(loaded[name].items()):
            table[utt] = asv.extract_embedding(encoder, w, r.speaker_id, r.conditions, utt)
        emb[name] = table
        asv.write_embeddings(out / f"embeddings_{name}.tsv", list(table.values()))

    trials = sa.read_trials(cfg.resolve(ev.trials)) if ev.trials else []
    if not trials:
        report["notices"].append("no trials; score report not produced")
    else:
        sa.write_trials(out / "trials.txt", trials)
        params = sa.DcfParams(p_tar=ev.p_tar)
        sets = {}
        for name in systems:
            missing = [t for t in trials if t.enroll_id not in emb[name] or t.test_id not in emb[name]]
            if missing:
                raise ValueError(f"system {name!r}: no embedding for trial "
                                 f"{missing[0].enroll_id} {missing[0].test_id}")
            e = np.stack([emb[name][t.enroll_id].vector for t in trials])
            te = np.stack([emb[name][t.test_id].vector for t in trials])
            scores = asv.plda_score_pairs(plda, e, te)
            sa.write_scores(out / f"scores_{name}.txt", scores)
            sets[name] = sa.ScoreSet(trials, scores)
        base_eer = sa.eer(sets[baseline])[0]
        base_dcf = sa.min_dcf(sets[baseline], params)[0]
        table = []
        for name, s in sets.items():
            e, _ = sa.eer(s)
            d, _ = sa.min_dcf(s, params)
            table.append({"system": name, "eer": e, "min_dcf": d,
                          "delta_eer_pct": _relative_change(e, base_eer),
                          "delta_min_dcf_pct": _relative_change(d, base_dcf)})
            keys = [k for k in ev.condition_keys if all(k in t.conditions for t in trials)]
            sa.write_condition_report(out / f"conditions_{name}.tsv",
                                      sa.per_condition_report(s, keys, params))
            if name != baseline:
                h = sa.score_histograms(sets[baseline], s, bins=ev.histogram_bins)
                sa.write_histograms(out / f"hist_{name}.tsv", h)
        report["scores"] = table
        _write_score_table(out / "report.tsv", table)

    # t-SNE over backend-training, test and extended-test embeddings
    groups = []
    train_emb = backend / "train_embeddings.npy"
    if train_emb.exists():
        x = np.load(train_emb)
        step = max(1, len(x) // 200)
        groups += [("train", f"train{i}", v) for i, v in enumerate(x[::step])]
    for i, name in enumerate(systems):
        label = "test" if i == 0 else f"test-{name}"
        groups += [(label, utt, e.vector) for utt, e in emb[name].items() if utt not in enroll]
    if len(groups) >= 10:
        n = len(groups)
        perp = min(ev.tsne_perplexity, (n - 1) / 3.01)
        res = sa.tsne(np.stack([g[2] for g in groups]), perp, ev.tsne_iterations, cfg.seed)
        with (out / "tsne.tsv").open("w") as f:
            f.write("group\tutt_id\tx\ty\n")
            for (g, utt, _), (cx, cy) in zip(groups, res.coords):
                f.write(f"{g}\t{utt}\t{cx:.6g}\t{cy:.6g}\n")
    (out / "report.json").write_text(json.dumps(report, indent=2, default=_json_default))
    return report


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _write_score_table(path, table):
    with Path(path).open("w") as f:
        f.write("system\teer\tmin_dcf\tdelta_eer_pct\tdelta_min_dcf_pct\n")
        for r in table:
            f.write(f"{r['system']}\t{r['eer']:.4f}\t{r['min_dcf']:.4f}\t"
                    f"{r['delta_eer_pct']:.2f}\t{r['delta_min_dcf_pct']:.2f}\n")


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def cmd_plot(report_dir, out_dir=None) -> dict:
    """Static PNG figures from the tables written by :func:`cmd_evaluate`."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report_dir = Path(report_dir)
    out = Path(out_dir) if out_dir else report_dir / "figures"
    out.mkdir(parents=True, exist_ok=True)
    summary = {"histograms": {}, "conditions": {}, "tsne": None}

    for path in sorted(report_dir.glob("hist_*.tsv")):
        h = sa.read_histograms(path)
        centers = (h["bin_lo"] + h["bin_hi"]) / 2
        width = h["bin_hi"][0] - h["bin_lo"][0] if len(centers) else 1.0
        fig, ax = plt.subplots(figsize=(6, 4))
        for col, style in (("before_target", "C0"), ("before_nontarget", "C1"),
                           ("after_target", "C2"), ("after_nontarget", "C3")):
            ax.bar(centers, h[col], width=width, alpha=0.4, color=style, label=col.replace("_", " "))
        ax.set_xlabel("PLDA score")
        ax.set_ylabel("trials")
        ax.legend(fontsize=7)
        name = path.stem[len("hist_"):]
        fig.savefig(out / f"hist_{name}.png", dpi=100)
        plt.close(fig)
        summary["histograms"][name] = {c: int(h[c].sum()) for c in h if c not in ("bin_lo", "bin_hi")}

    trials_path = report_dir / "trials.txt"
    if trials_path.exists():
        trials = sa.read_trials(trials_path)
        for path in sorted(report_dir.glob("scores_*.txt")):
            name = path.stem[len("scores_"):]
            scores = sa.read_scores(path)
            if len(scores) != len(trials):
                raise ValueError(f"{path}: {len(scores)} scores for {len(trials)} trials")
            fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharex=True)
            counts = {}
            for ax, target in zip(axes, (True, False)):
                for cond in sorted({t.conditions.get("source", "all") for t in trials}):
                    vals = [s for t, s in zip(trials, scores)
                            if t.is_target == target and t.conditions.get("source", "all") == cond]
                    if vals:
                        ax.hist(vals, bins=30, histtype="step", density=True, label=cond)
                        counts[f"{'target' if target else 'nontarget'}:{cond}"] = len(vals)
                ax.set_title("target" if target else "non-target")
                ax.legend(fontsize=7)
            fig.savefig(out / f"conditions_{name}.png", dpi=100)
            plt.close(fig)
            summary["conditions"][name] = counts

    tsne_path = report_dir / "tsne.tsv"
    if tsne_path.exists():
        groups: dict[str, list] = {}
        lines = tsne_path.read_text().splitlines()
        for n, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{tsne_path}:{n}: malformed row {line!r}")
            try:
                groups.setdefault(parts[0], []).append((float(parts[2]), float(parts[3])))
            except ValueError:
                raise ValueError(f"{tsne_path}:{n}: malformed row {line!r}") from None
        fig, ax = plt.subplots(figsize=(5, 5))
        for g, pts in groups.items():
            p = np.array(pts)
            ax.scatter(p[:, 0], p[:, 1], s=6, label=f"{g} ({len(p)})")
        ax.legend(fontsize=7)
        fig.savefig(out / "tsne.png", dpi=100)
        plt.close(fig)
        summary["tsne"] = {g: len(p) for g, p in groups.items()}
    (out / "figures.json").write_text(json.dumps(summary, indent=2))
    return summary
