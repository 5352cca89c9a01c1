"""Training loops for deep regression, CGAN and CycleGAN.

Batches are drawn by index from in-memory chunk sets with an RNG keyed on
``(seed, step)``, so a run resumed from a training-state file sees exactly
the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .losses import (LossSpec, cycle_sup_kind, adv_loss_d, adv_loss_g, clip_gradients, cycle_loss,
                     discriminator_accuracy, gradient_penalty, identity_loss, sup_loss)
from .signal_core import WIDE_RATE

log = logging.getLogger(__name__)

MODES = ("regression", "cgan", "cyclegan")
SCHEDULES = ("plateau_halving", "linear_decay", "warmup_plateau_cosine")


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite twice in one run."""


@dataclass
class TrainConfig:
    mode: str = "regression"
    seg_len: float = 4.0
    batch_size: int = 128
    epochs: int = 70
    epoch_hours: float = 100.0
    lr_g: float = 5e-4
    lr_d: float = 5e-4
    lr_min: float = 1e-7
    adam_betas: tuple[float, float] = (0.9, 0.999)
    schedule: str = "plateau_halving"
    d_steps_per_iter: int = 1
    g_steps_per_iter: int = 1
    sample_rate: int = WIDE_RATE
    seed: int = 0
    # plateau halving
    plateau_patience: int = 3
    plateau_threshold: float = 0.01
    # warmup / constant / cosine phases, in epochs
    warmup_epochs: float = 2.0
    constant_epochs: float = 3.0
    cosine_epochs: float = 10.0
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        for name in ("seg_len", "lr_g", "lr_d", "lr_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.epoch_hours < 0:
            raise ValueError("batch_size must be >= 1; epochs and epoch_hours >= 0")
        if self.d_steps_per_iter < 0 or self.g_steps_per_iter < 1:
            raise ValueError("need g_steps_per_iter >= 1 and d_steps_per_iter >= 0")
        n = self.seg_len * self.sample_rate
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"seg_len * sample_rate must be integral, got {n}")
        self.adam_betas = tuple(self.adam_betas)

    @property
    def seg_samples(self) -> int:
        return int(round(self.seg_len * self.sample_rate))

    @classmethod
    def recipe(cls, mode: str, **overrides) -> "TrainConfig":
        """Full-scale hyper-parameters for each mode, optionally overridden."""
        base = {
            "regression": dict(seg_len=4.0, batch_size=128, epochs=70, epoch_hours=100.0,
                               lr_g=5e-4, lr_d=5e-4, lr_min=1e-7, adam_betas=(0.9, 0.999),
                               schedule="plateau_halving"),
            "cgan": dict(seg_len=3.0, batch_size=16, epochs=15, epoch_hours=50.0,
                         lr_g=2e-4, lr_d=1e-4, lr_min=1e-7, adam_betas=(0.5, 0.999),
                         schedule="linear_decay", d_steps_per_iter=1, g_steps_per_iter=2),
            "cyclegan": dict(seg_len=3.0, batch_size=8, epochs=15, epoch_hours=50.0,
                             lr_g=4e-4, lr_d=2e-4, lr_min=1e-8, adam_betas=(0.5, 0.999),
                             schedule="warmup_plateau_cosine"),
        }[mode]
        base.update(overrides)
        return cls(mode=mode, **base)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    audio_seconds_seen: float = 0.0
    best_val: float = math.inf
    rng_seed: int = 0
    g_updates: int = 0
    d_updates: int = 0
    lr_scale: float = 1.0
    plateau_factor: float = 1.0
    plateau_bad_epochs: int = 0
    nan_restores: int = 0


def epoch_len(cfg: TrainConfig) -> int:
    """Optimizer iterations per epoch when an epoch is ``epoch_hours`` of audio."""
    return int(round(cfg.epoch_hours * 3600 / (cfg.batch_size * cfg.seg_len)))


def total_steps(cfg: TrainConfig) -> int:
    return cfg.epochs * epoch_len(cfg)


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------


def linear_decay_lr(lr_max, lr_min, step, total):
    """Linear from ``lr_max`` at step 0 to ``lr_min`` at step ``total - 1``."""
    if total <= 1:
        return lr_max
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return lr_max + (lr_min - lr_max) * frac


def warmup_cosine_lr(lr_max, lr_min, epoch, warmup=2.0, constant=3.0, cosine=10.0):
    """Linear warmup, a constant plateau, then cosine decay; ``epoch`` may be fractional."""
    if epoch < warmup:
        return lr_min + (lr_max - lr_min) * epoch / warmup
    epoch -= warmup
    if epoch < constant:
        return lr_max
    epoch -= constant
    if epoch < cosine:
        return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * epoch / cosine))
    return lr_min


def plateau_update(state: TrainState, val: float, cfg: TrainConfig) -> bool:
    """Track validation progress; returns True when the LR should be halved.

    An epoch counts as an improvement only if it beats the best value so
    far by at least ``plateau_threshold`` (relative).
    """
    if val < state.best_val * (1 - cfg.plateau_threshold) or not math.isfinite(state.best_val):
        state.best_val = val
        state.plateau_bad_epochs = 0
        return False
    state.best_val = min(state.best_val, val)
    state.plateau_bad_epochs += 1
    if state.plateau_bad_epochs >= cfg.plateau_patience:
        state.plateau_bad_epochs = 0
        return True
    return False


def scheduled_lrs(cfg: TrainConfig, state: TrainState):
    """(lr_g, lr_d) for the iteration at ``state.step``.

    ``state.lr_scale`` (halved by NaN recovery) multiplies every schedule.
    """
    n_epoch = max(epoch_len(cfg), 1)
    if cfg.schedule == "linear_decay":
        total = total_steps(cfg)
        g = linear_decay_lr(cfg.lr_g, cfg.lr_min, state.step, total)
        d = linear_decay_lr(cfg.lr_d, cfg.lr_min, state.step, total)
    elif cfg.schedule == "warmup_plateau_cosine":
        e = state.step / n_epoch
        g = warmup_cosine_lr(cfg.lr_g, cfg.lr_min, e, cfg.warmup_epochs, cfg.constant_epochs,
                             cfg.cosine_epochs)
        d = warmup_cosine_lr(cfg.lr_d, cfg.lr_min, e, cfg.warmup_epochs, cfg.constant_epochs,
                             cfg.cosine_epochs)
    else:
        g = max(cfg.lr_g * state.plateau_factor, cfg.lr_min)
        d = max(cfg.lr_d * state.plateau_factor, cfg.lr_min)
    return g * state.lr_scale, d * state.lr_scale


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


class ChunkSet:
    """Fixed-length training chunks, optionally paired with targets.

    Args:
        inputs (ndarray): (N, L) input chunks.
        targets (ndarray, optional): (N, L) targets aligned with ``inputs``.

    """

    def __init__(self, inputs, targets=None):
        inputs = np.asarray(inputs, dtype=np.float32)
        if inputs.ndim != 2:
            raise ValueError("chunks must be a 2-D array (N, L)")
        if targets is not None:
            targets = np.asarray(targets, dtype=np.float32)
            if targets.shape != inputs.shape:
                raise ValueError("targets must match inputs in shape")
        self.inputs = inputs
        self.targets = targets

    def __len__(self):
        return len(self.inputs)

    @property
    def paired(self) -> bool:
        return self.targets is not None

    def batch(self, idx):
        a = torch.from_numpy(self.inputs[idx])
        b = torch.from_numpy(self.targets[idx]) if self.paired else None
        return a, b


def _batch_indices(n, batch_size, seed, step, stream=0):
    rng = np.random.default_rng([seed, step, stream])
    return rng.integers(0, n, size=batch_size)


def _require_data(data: ChunkSet, paired: bool, name="stream"):
    if data is None or len(data) == 0:
        raise ValueError(f"{name} is empty")
    if paired and not data.paired:
        raise ValueError(f"{name} must be paired (input, target) chunks")


# ---------------------------------------------------------------------------
# State files, history and NaN recovery
# ---------------------------------------------------------------------------


class History:
    """In-memory list of records, mirrored to a line-delimited JSON file."""

    def __init__(self, path=None, append=False):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                self.path.write_text("")

    def add(self, **record):
        self.records.append(record)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record) + "\n")

    def of(self, kind):
        return [r for r in self.records if r.get("kind") == kind]


def save_training_state(path, networks: dict, optimizers: dict, state: TrainState, cfg: TrainConfig):
    torch.save({
        "networks": {k: v.state_dict() for k, v in networks.items()},
        "optimizers": {k: v.state_dict() for k, v in optimizers.items()},
        "state": asdict(state),
        "config": asdict(cfg),
    }, str(path))


def load_training_state(path, networks: dict, optimizers: dict) -> TrainState:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    for k, net in networks.items():
        net.load_state_dict(payload["networks"][k])
    for k, opt in optimizers.items():
        opt.load_state_dict(payload["optimizers"][k])
    return TrainState(**payload["state"])


class _Snapshot:
    """Last known-good copy of networks, optimizers and state."""

    def __init__(self, networks, optimizers):
        self.networks = networks
        self.optimizers = optimizers
        self.saved = None

    def take(self, state):
        self.saved = (
            {k: copy.deepcopy(v.state_dict()) for k, v in self.networks.items()},
            {k: copy.deepcopy(v.state_dict()) for k, v in self.optimizers.items()},
            copy.deepcopy(state),
        )

    def restore(self) -> TrainState:
        nets, opts, state = self.saved
        for k, v in self.networks.items():
            v.load_state_dict(nets[k])
        for k, v in self.optimizers.items():
            v.load_state_dict(opts[k])
        return copy.deepcopy(state)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _finite(*values):
    return all(math.isfinite(float(v.detach() if torch.is_tensor(v) else v)) for v in values)


class _Run:
    """Shared loop skeleton: epochs, schedules, validation, NaN recovery."""

    def __init__(self, cfg, networks, optimizers, history_path, state_path, resume):
        self.cfg = cfg
        self.networks = networks
        self.optimizers = optimizers
        self.history = History(history_path, append=resume is not None)
        self.state_path = Path(state_path) if state_path else None
        if resume is not None:
            self.state = load_training_state(resume, networks, optimizers)
        else:
            self.state = TrainState(rng_seed=cfg.seed)
        self.snapshot = _Snapshot(networks, optimizers)
        self.snapshot.take(self.state)

    def lrs(self):
        return scheduled_lrs(self.cfg, self.state)

    def on_nan(self):
        if self.state.nan_restores >= 1:
            raise TrainingDiverged(f"non-finite loss again at step {self.state.step}")
        log.warning("non-finite loss at step %d; restoring last good state and halving LRs",
                    self.state.step)
        restores = self.state.nan_restores
        self.state = self.snapshot.restore()
        self.state.nan_restores = restores + 1
        self.state.lr_scale *= 0.5
        self.history.add(kind="restore", step=self.state.step, lr_scale=self.state.lr_scale)

    def advance(self):
        s = self.state
        s.step += 1
        s.audio_seconds_seen = s.step * self.cfg.batch_size * self.cfg.seg_len

    def end_epoch(self, val):
        s = self.state
        s.epoch += 1
        halve = False
        if val is not None and math.isfinite(val):
            if self.cfg.schedule == "plateau_halving":
                halve = plateau_update(s, val, self.cfg)
                if halve:
                    s.plateau_factor *= 0.5
            else:
                s.best_val = min(s.best_val, val)
        self.history.add(kind="epoch", epoch=s.epoch, step=s.step, val_loss=val,
                         halved=halve, lr_g=self.lrs()[0])
        self.snapshot.take(s)
        if self.state_path:
            self.save(self.state_path)

    def save(self, path):
        save_training_state(path, self.networks, self.optimizers, self.state, self.cfg)


def _validate(G, val: ChunkSet | None, kind="mae", batch_size=16):
    if val is None or len(val) == 0:
        return None
    G.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(val), batch_size):
            a, b = val.batch(np.arange(i, min(i + batch_size, len(val))))
            total += float(sup_loss(kind, b, G(a))) * len(a)
            count += len(a)
    G.train()
    return total / count


# ---------------------------------------------------------------------------
# Deep regression
# ---------------------------------------------------------------------------


def train_regression(cfg: TrainConfig, G, paired_stream: ChunkSet, val: ChunkSet | None = None,
                     loss_kind: str = "mae", history_path=None, state_path=None, resume=None,
                     max_steps: int | None = None):
    """Fit ``G`` to map input chunks onto target chunks.

    Returns:
        (G, History)

    """
    _require_data(paired_stream, paired=True)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(G.parameters(), lr=cfg.lr_g, betas=cfg.adam_betas)
    run = _Run(cfg, {"G": G}, {"G": opt}, history_path, state_path, resume)
    n_epoch = epoch_len(cfg)
    stop = total_steps(cfg) if max_steps is None else min(total_steps(cfg), max_steps)
    G.train()
    while run.state.step < stop:
        s = run.state
        torch.manual_seed(cfg.seed * 1_000_003 + s.step)
        lr_g, _ = run.lrs()
        _set_lr(opt, lr_g)
        a, b = paired_stream.batch(_batch_indices(len(paired_stream), cfg.batch_size, cfg.seed, s.step))
        loss = sup_loss(loss_kind, b, G(a))
        if not _finite(loss):
            run.on_nan()
            continue
        opt.zero_grad()
        loss.backward()
        opt.step()
        s.g_updates += 1
        run.advance()
        if s.step % cfg.log_every == 0:
            run.history.add(kind="step", step=s.step, loss=loss.item(), lr_g=lr_g)
        if n_epoch and s.step % n_epoch == 0:
            run.end_epoch(_validate(G, val, loss_kind))
    return G, run.history


# ---------------------------------------------------------------------------
# CGAN
# ---------------------------------------------------------------------------


def _d_step(spec: LossSpec, D, opt_d, real, fake):
    d_real, d_fake = D(real), D(fake)
    gp = gradient_penalty(D, real, fake) * spec.gp_weight if spec.adv_kind == "wgan_gp" else None
    loss = adv_loss_d(spec.adv_kind, d_real, d_fake, gp)
    acc = discriminator_accuracy(spec.adv_kind, d_real, d_fake)
    return loss, acc


def train_cgan(cfg: TrainConfig, G, D, paired_stream: ChunkSet, loss_spec: LossSpec,
               val: ChunkSet | None = None, aux=None, history_path=None, state_path=None,
               resume=None, max_steps: int | None = None):
    """Alternate ``d_steps_per_iter`` discriminator and ``g_steps_per_iter`` generator updates.

    Returns:
        (G, D, History)

    """
    _require_data(paired_stream, paired=True)
    torch.manual_seed(cfg.seed)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_g, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_d, betas=cfg.adam_betas)
    run = _Run(cfg, {"G": G, "D": D}, {"G": opt_g, "D": opt_d}, history_path, state_path, resume)
    provider = aux if loss_spec.sup_kind != "fm" else (aux or D)
    n_epoch = epoch_len(cfg)
    stop = total_steps(cfg) if max_steps is None else min(total_steps(cfg), max_steps)
    G.train()
    D.train()
    while run.state.step < stop:
        s = run.state
        torch.manual_seed(cfg.seed * 1_000_003 + s.step)
        lr_g, lr_d = run.lrs()
        _set_lr(opt_g, lr_g)
        _set_lr(opt_d, lr_d)
        a, b = paired_stream.batch(_batch_indices(len(paired_stream), cfg.batch_size, cfg.seed, s.step))

        d_loss, acc, ok = torch.zeros(()), float("nan"), True
        for _ in range(cfg.d_steps_per_iter):
            with torch.no_grad():
                fake = G(a)
            d_loss, acc = _d_step(loss_spec, D, opt_d, b, fake)
            if not _finite(d_loss):
                ok = False
                break
            opt_d.zero_grad()
            d_loss.backward()
            if loss_spec.adv_kind == "wgan_gp":
                clip_gradients(D, loss_spec.gp_clip)
            opt_d.step()
            s.d_updates += 1
        if not ok:
            run.on_nan()
            continue

        for _ in range(cfg.g_steps_per_iter):
            fake = G(a)
            d_real = D(b) if loss_spec.adv_kind == "dcl" else None
            adv = adv_loss_g(loss_spec.adv_kind, D(fake), d_real)
            sup = sup_loss(loss_spec.sup_kind, b, fake, provider)
            g_loss = adv + loss_spec.lambda_sup * sup
            if loss_spec.lambda_id > 0:
                g_loss = g_loss + loss_spec.lambda_id * sup_loss(loss_spec.sup_kind, b, G(b), provider)
            if not _finite(g_loss):
                ok = False
                break
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            s.g_updates += 1
        if not ok:
            run.on_nan()
            continue

        run.advance()
        if s.step % cfg.log_every == 0:
            run.history.add(kind="step", step=s.step, g_loss=g_loss.item(), d_loss=d_loss.item(),
                            adv=adv.item(), sup=sup.item(), d_acc=acc, lr_g=lr_g, lr_d=lr_d)
        if n_epoch and s.step % n_epoch == 0:
            run.end_epoch(_validate(G, val))
    return G, D, run.history


# ---------------------------------------------------------------------------
# CycleGAN
# ---------------------------------------------------------------------------


def train_cyclegan(cfg: TrainConfig, G_ab, G_ba, D_a, D_b, stream_a: ChunkSet,
                   stream_b: ChunkSet | None, loss_spec: LossSpec, val: ChunkSet | None = None,
                   history_path=None, state_path=None, resume=None, max_steps: int | None = None):
    """Train both translation directions and both domain discriminators.

    Passing ``stream_b=None`` with a paired ``stream_a`` uses its inputs as
    domain A and its targets as domain B from the same draws (paired mode).

    Returns:
        (G_ab, G_ba, D_a, D_b, History)

    """
    paired_mode = stream_b is None
    _require_data(stream_a, paired=paired_mode, name="stream_a")
    if not paired_mode:
        _require_data(stream_b, paired=False, name="stream_b")
    if loss_spec.cycle_supervised and not paired_mode:
        raise ValueError("supervised CycleGAN needs a paired stream")
    torch.manual_seed(cfg.seed)
    g_params = list(G_ab.parameters()) + list(G_ba.parameters())
    d_params = list(D_a.parameters()) + list(D_b.parameters())
    opt_g = torch.optim.Adam(g_params, lr=cfg.lr_g, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(d_params, lr=cfg.lr_d, betas=cfg.adam_betas)
    nets = {"G_ab": G_ab, "G_ba": G_ba, "D_a": D_a, "D_b": D_b}
    run = _Run(cfg, nets, {"G": opt_g, "D": opt_d}, history_path, state_path, resume)
    n_epoch = epoch_len(cfg)
    stop = total_steps(cfg) if max_steps is None else min(total_steps(cfg), max_steps)
    for net in nets.values():
        net.train()
    kind = loss_spec.adv_kind
    while run.state.step < stop:
        s = run.state
        torch.manual_seed(cfg.seed * 1_000_003 + s.step)
        lr_g, lr_d = run.lrs()
        _set_lr(opt_g, lr_g)
        _set_lr(opt_d, lr_d)
        if paired_mode:
            a, b = stream_a.batch(_batch_indices(len(stream_a), cfg.batch_size, cfg.seed, s.step))
        else:
            a, _ = stream_a.batch(_batch_indices(len(stream_a), cfg.batch_size, cfg.seed, s.step, 0))
            b, _ = stream_b.batch(_batch_indices(len(stream_b), cfg.batch_size, cfg.seed, s.step, 1))
            if b.shape[-1] != a.shape[-1]:
                raise ValueError("domain chunks must share one length")

        d_loss, ok = torch.zeros(()), True
        for _ in range(cfg.d_steps_per_iter):
            with torch.no_grad():
                fake_b, fake_a = G_ab(a), G_ba(b)
            loss_b, _ = _d_step(loss_spec, D_b, opt_d, b, fake_b)
            loss_a, _ = _d_step(loss_spec, D_a, opt_d, a, fake_a)
            d_loss = loss_a + loss_b
            if not _finite(d_loss):
                ok = False
                break
            opt_d.zero_grad()
            d_loss.backward()
            if kind == "wgan_gp":
                clip_gradients(D_a, loss_spec.gp_clip)
                clip_gradients(D_b, loss_spec.gp_clip)
            opt_d.step()
            s.d_updates += 1
        if not ok:
            run.on_nan()
            continue

        for _ in range(cfg.g_steps_per_iter):
            fake_b, fake_a = G_ab(a), G_ba(b)
            real_b = D_b(b) if kind == "dcl" else None
            real_a = D_a(a) if kind == "dcl" else None
            adv = adv_loss_g(kind, D_b(fake_b), real_b) + adv_loss_g(kind, D_a(fake_a), real_a)
            cyc = cycle_loss(loss_spec, G_ab, G_ba, a, b)
            g_loss = adv + loss_spec.lambda_cyc * cyc
            ident = torch.zeros(())
            if loss_spec.lambda_id > 0:
                ident = identity_loss(loss_spec, G_ab, G_ba, a, b)
                g_loss = g_loss + loss_spec.lambda_id * ident
            if loss_spec.cycle_supervised:
                sup = (sup_loss(cycle_sup_kind(loss_spec), b, fake_b)
                       + sup_loss(cycle_sup_kind(loss_spec), a, fake_a))
                g_loss = g_loss + loss_spec.lambda_sup * sup
            if not _finite(g_loss):
                ok = False
                break
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            s.g_updates += 1
        if not ok:
            run.on_nan()
            continue

        run.advance()
        if s.step % cfg.log_every == 0:
            run.history.add(kind="step", step=s.step, g_loss=g_loss.item(), d_loss=d_loss.item(),
                            adv=adv.item(), cyc=cyc.item(), id=ident.item(), lr_g=lr_g, lr_d=lr_d)
        if n_epoch and s.step % n_epoch == 0:
            run.end_epoch(_validate(G_ab, val))
    return G_ab, G_ba, D_a, D_b, run.history
