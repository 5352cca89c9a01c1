"""Supervision and adversarial losses, and the composite CGAN / CycleGAN objectives.

Conventions:
    * Expectations are means over batch and time.
    * A discriminator output is either a plain score tensor or the list of
      ``(score, features)`` pairs produced by :mod:`tdbwe.models`; losses
      over several sub-discriminators are averaged, not summed.
    * Adversarial scores are raw (pre-sigmoid) values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

SUP_KINDS = ("mae", "mse", "mrstft", "fm", "afm")
ADV_KINDS = ("nonsat", "lsgan", "hinge", "wgan_gp", "dcl")

EPS_MAG = 1e-7


@dataclass(frozen=True)
class LossSpec:
    sup_kind: str = "mae"
    adv_kind: str = "lsgan"
    lambda_sup: float = 0.1
    lambda_cyc: float = 10.0
    lambda_id: float = 0.0
    gp_weight: float = 10.0
    gp_clip: float = 1e-3
    # CycleGAN only: add paired supervision in both directions
    cycle_supervised: bool = False

    def __post_init__(self):
        if self.sup_kind not in SUP_KINDS:
            raise ValueError(f"unknown sup_kind {self.sup_kind!r}")
        if self.adv_kind not in ADV_KINDS:
            raise ValueError(f"unknown adv_kind {self.adv_kind!r}")
        for name in ("lambda_sup", "lambda_cyc", "lambda_id", "gp_weight"):
            value = getattr(self, name)
            if not (value >= 0 and value < float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
        if not self.gp_clip > 0:
            raise ValueError("gp_clip must be positive")


@dataclass(frozen=True)
class MrstftConfig:
    resolutions: tuple[tuple[int, int, int], ...] = field(
        default=((1024, 120, 600), (2048, 240, 1200), (512, 50, 240)))
    window: str = "hann"


# ---------------------------------------------------------------------------
# Supervision losses
# ---------------------------------------------------------------------------


def stft_magnitude(x, fft_size, hop, win_length):
    """|STFT| of (B, T) signals, shape (B, frames, bins)."""
    window = torch.hann_window(win_length, dtype=x.dtype, device=x.device)
    spec = torch.stft(x, fft_size, hop, win_length, window, center=True, pad_mode="constant",
                      return_complex=True)
    power = spec.real ** 2 + spec.imag ** 2
    # tiny offset keeps the sqrt differentiable at exact zeros
    return torch.sqrt(power + 1e-30).transpose(1, 2)


def spectral_convergence(x_mag, y_mag):
    """Frobenius-relative magnitude error, reference magnitude in the denominator."""
    return torch.linalg.norm(x_mag - y_mag) / torch.linalg.norm(x_mag)


def log_magnitude_l1(x_mag, y_mag, eps=EPS_MAG):
    """Mean absolute difference of log magnitudes floored at ``eps``."""
    return F.l1_loss(torch.log(torch.clamp(x_mag, min=eps)), torch.log(torch.clamp(y_mag, min=eps)))


def mrstft_loss(x, x_hat, config: MrstftConfig | None = None):
    """Sum over resolutions of spectral convergence plus log-magnitude L1."""
    config = config or MrstftConfig()
    x, x_hat = _flat(x), _flat(x_hat)
    total = 0.0
    for fft_size, hop, win in config.resolutions:
        xm = stft_magnitude(x, fft_size, hop, win)
        ym = stft_magnitude(x_hat, fft_size, hop, win)
        total = total + spectral_convergence(xm, ym) + log_magnitude_l1(xm, ym)
    return total


def _flat(x):
    if x.dim() == 3:
        x = x.squeeze(1)
    if x.dim() == 1:
        x = x.unsqueeze(0)
    return x


def _groups(acts):
    """Normalise an activation provider's output to a list of layer lists."""
    if isinstance(acts, torch.Tensor):
        return [[acts]]
    acts = list(acts)
    if acts and isinstance(acts[0], tuple):
        # discriminator output: [(score, feats), ...]
        return [list(feats) for _, feats in acts]
    if acts and isinstance(acts[0], torch.Tensor):
        return [acts]
    return [list(g) for g in acts]


def feature_matching(x, x_hat, provider):
    """Sum over layers of mean absolute activation differences, averaged over groups.

    Activations of the reference ``x`` are treated as constants.
    """
    with torch.no_grad():
        ref = _groups(provider(x))
    est = _groups(provider(x_hat))
    if len(ref) != len(est) or not ref:
        raise ValueError("activation provider returned inconsistent outputs")
    per_group = []
    for r_layers, e_layers in zip(ref, est):
        per_group.append(sum(F.l1_loss(e, r.detach()) for r, e in zip(r_layers, e_layers)))
    return sum(per_group) / len(per_group)


def sup_loss(kind, x, x_hat, aux=None, mrstft_config: MrstftConfig | None = None):
    """Supervision loss between a reference ``x`` and an estimate ``x_hat``.

    Args:
        kind (str): One of ``mae``, ``mse``, ``mrstft``, ``fm``, ``afm``.
        x (Tensor): Reference waveforms.
        x_hat (Tensor): Estimated waveforms, same shape as ``x``.
        aux (callable): Activation provider, required for ``fm`` and ``afm``.

    Returns:
        Tensor: Non-negative scalar.

    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if kind == "mae":
        return F.l1_loss(x_hat, x)
    if kind == "mse":
        return F.mse_loss(x_hat, x)
    if kind == "mrstft":
        return mrstft_loss(x, x_hat, mrstft_config)
    if kind in ("fm", "afm"):
        if aux is None:
            raise ValueError(f"{kind} loss needs an activation provider")
        return feature_matching(x, x_hat, aux)
    raise ValueError(f"unknown supervision kind {kind!r}")


# ---------------------------------------------------------------------------
# Adversarial losses
# ---------------------------------------------------------------------------


def score_maps(out):
    """List of score tensors from a discriminator output."""
    if isinstance(out, torch.Tensor):
        return [out]
    return [o[0] if isinstance(o, tuple) else o for o in out]


def _per_example(score):
    return score.reshape(score.shape[0], -1).mean(dim=1) if score.dim() > 1 else score


def _dcl_d(real, fake):
    real, fake = _per_example(real), _per_example(fake)
    # diff[i, j] = D(fake_j) - D(real_i)
    diff = fake.unsqueeze(0) - real.unsqueeze(1)
    zeros = torch.zeros(real.shape[0], 1, dtype=diff.dtype, device=diff.device)
    real_term = torch.logsumexp(torch.cat([zeros, diff], dim=1), dim=1).mean()
    zeros = torch.zeros(fake.shape[0], 1, dtype=diff.dtype, device=diff.device)
    fake_term = torch.logsumexp(torch.cat([zeros, diff.t()], dim=1), dim=1).mean()
    return real_term + fake_term


def _adv_d_single(kind, real, fake):
    if kind == "nonsat":
        return F.softplus(-real).mean() + F.softplus(fake).mean()
    if kind == "lsgan":
        return ((real - 1) ** 2).mean() + (fake ** 2).mean()
    if kind == "hinge":
        return F.relu(1 - real).mean() + F.relu(1 + fake).mean()
    if kind == "wgan_gp":
        return fake.mean() - real.mean()
    if kind == "dcl":
        return _dcl_d(real, fake)
    raise ValueError(f"unknown adversarial kind {kind!r}")


def _adv_g_single(kind, fake, real=None):
    if kind == "nonsat":
        return F.softplus(-fake).mean()
    if kind == "lsgan":
        return ((fake - 1) ** 2).mean()
    if kind in ("hinge", "wgan_gp"):
        return -fake.mean()
    if kind == "dcl":
        if real is None:
            raise ValueError("dcl generator loss needs real scores")
        # roles of real and fake swapped
        return _dcl_d(fake, real.detach())
    raise ValueError(f"unknown adversarial kind {kind!r}")


def _check_finite(*outs):
    for out in outs:
        for s in score_maps(out):
            if not torch.isfinite(s).all():
                raise FloatingPointError("non-finite discriminator scores")


def adv_loss_d(kind, d_real, d_fake, gp_term=None):
    """Discriminator loss to be minimised."""
    _check_finite(d_real, d_fake)
    reals, fakes = score_maps(d_real), score_maps(d_fake)
    if len(reals) != len(fakes):
        raise ValueError("real and fake outputs come from different discriminators")
    loss = sum(_adv_d_single(kind, r, f) for r, f in zip(reals, fakes)) / len(reals)
    if kind == "wgan_gp":
        if gp_term is None:
            raise ValueError("wgan_gp needs a gradient-penalty term")
        loss = loss + gp_term
    return loss


def adv_loss_g(kind, d_fake, d_real=None):
    """Generator loss to be minimised; ``d_real`` is needed only for ``dcl``."""
    _check_finite(d_fake)
    fakes = score_maps(d_fake)
    reals = score_maps(d_real) if d_real is not None else [None] * len(fakes)
    return sum(_adv_g_single(kind, f, r) for f, r in zip(fakes, reals)) / len(fakes)


def discriminator_accuracy(kind, d_real, d_fake) -> float:
    """Fraction of real and fake examples the discriminator labels correctly."""
    threshold = 0.5 if kind == "lsgan" else 0.0
    correct, total = 0, 0
    for r, f in zip(score_maps(d_real), score_maps(d_fake)):
        r, f = _per_example(r.detach()), _per_example(f.detach())
        correct += int((r > threshold).sum()) + int((f <= threshold).sum())
        total += r.numel() + f.numel()
    return correct / max(total, 1)


def critic_value(out):
    """Per-example critic value: score-map mean, averaged over sub-discriminators."""
    maps = score_maps(out)
    return sum(_per_example(s) for s in maps) / len(maps)


def gradient_penalty(critic, real, fake, generator=None):
    """Two-sided penalty ``E[(||grad_x D(x_interp)||_2 - 1)^2]`` on random interpolates."""
    if real.shape != fake.shape:
        raise ValueError("real and fake batches differ in shape")
    shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    alpha = torch.rand(shape, dtype=real.dtype, device=real.device, generator=generator)
    interp = (alpha * real.detach() + (1 - alpha) * fake.detach()).requires_grad_(True)
    value = critic_value(critic(interp))
    grad, = torch.autograd.grad(value.sum(), interp, create_graph=True)
    norms = grad.reshape(grad.shape[0], -1).norm(dim=1)
    return ((norms - 1) ** 2).mean()


def clip_gradients(module: torch.nn.Module, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(module.parameters(), max_norm))


# ---------------------------------------------------------------------------
# Composite objectives
# ---------------------------------------------------------------------------


def cgan_d_loss(spec: LossSpec, G, D, a, b, fake=None):
    if a.shape != b.shape:
        raise ValueError("CGAN needs paired batches of equal shape")
    if fake is None:
        with torch.no_grad():
            fake = G(a)
    fake = fake.detach()
    gp = gradient_penalty(D, b, fake) * spec.gp_weight if spec.adv_kind == "wgan_gp" else None
    return adv_loss_d(spec.adv_kind, D(b), D(fake), gp)


def cgan_g_loss(spec: LossSpec, G, D, a, b, aux=None, parts=None):
    if a.shape != b.shape:
        raise ValueError("CGAN needs paired batches of equal shape")
    fake = G(a)
    d_real = D(b) if spec.adv_kind == "dcl" else None
    adv = adv_loss_g(spec.adv_kind, D(fake), d_real)
    provider = aux if spec.sup_kind != "fm" else (aux or D)
    sup = sup_loss(spec.sup_kind, b, fake, provider)
    loss = adv + spec.lambda_sup * sup
    ident = None
    if spec.lambda_id > 0:
        ident = sup_loss(spec.sup_kind, b, G(b), provider)
        loss = loss + spec.lambda_id * ident
    if parts is not None:
        parts.update(adv=adv.item(), sup=sup.item())
        if ident is not None:
            parts["id"] = ident.item()
    return loss


def cgan_objective(spec: LossSpec, G, D, a, b, aux=None, parts=None):
    """(generator loss, discriminator loss) for one paired batch."""
    g_loss = cgan_g_loss(spec, G, D, a, b, aux, parts)
    d_loss = cgan_d_loss(spec, G, D, a, b)
    return g_loss, d_loss


def cycle_sup_kind(spec):
    """Waveform loss for cycle and identity terms; feature losses fall back to L1."""
    return spec.sup_kind if spec.sup_kind in ("mae", "mse", "mrstft") else "mae"


def cycle_loss(spec, G_ab, G_ba, a, b):
    kind = cycle_sup_kind(spec)
    return sup_loss(kind, a, G_ba(G_ab(a))) + sup_loss(kind, b, G_ab(G_ba(b)))


def identity_loss(spec, G_ab, G_ba, a, b):
    kind = cycle_sup_kind(spec)
    return sup_loss(kind, a, G_ba(a)) + sup_loss(kind, b, G_ab(b))


def cyclegan_g_loss(spec: LossSpec, G_ab, G_ba, D_a, D_b, a, b, parts=None):
    fake_b = G_ab(a)
    fake_a = G_ba(b)
    real_b = D_b(b) if spec.adv_kind == "dcl" else None
    real_a = D_a(a) if spec.adv_kind == "dcl" else None
    adv = adv_loss_g(spec.adv_kind, D_b(fake_b), real_b) + adv_loss_g(spec.adv_kind, D_a(fake_a), real_a)
    kind = cycle_sup_kind(spec)
    cyc = sup_loss(kind, a, G_ba(fake_b)) + sup_loss(kind, b, G_ab(fake_a))
    loss = adv + spec.lambda_cyc * cyc
    ident = None
    if spec.lambda_id > 0:
        ident = identity_loss(spec, G_ab, G_ba, a, b)
        loss = loss + spec.lambda_id * ident
    sup = None
    if spec.cycle_supervised:
        if a.shape != b.shape:
            raise ValueError("supervised CycleGAN needs paired batches")
        sup = sup_loss(kind, b, fake_b) + sup_loss(kind, a, fake_a)
        loss = loss + spec.lambda_sup * sup
    if parts is not None:
        parts.update(adv=adv.item(), cyc=cyc.item())
        if ident is not None:
            parts["id"] = ident.item()
        if sup is not None:
            parts["sup"] = sup.item()
    return loss


def cyclegan_d_loss(spec: LossSpec, G_ab, G_ba, D_a, D_b, a, b):
    with torch.no_grad():
        fake_b = G_ab(a)
        fake_a = G_ba(b)
    total = 0.0
    for D, real, fake in ((D_b, b, fake_b), (D_a, a, fake_a)):
        gp = gradient_penalty(D, real, fake) * spec.gp_weight if spec.adv_kind == "wgan_gp" else None
        total = total + adv_loss_d(spec.adv_kind, D(real), D(fake), gp)
    return total


def cyclegan_objective(spec: LossSpec, G_ab, G_ba, D_a, D_b, a, b, parts=None):
    g_loss = cyclegan_g_loss(spec, G_ab, G_ba, D_a, D_b, a, b, parts)
    d_loss = cyclegan_d_loss(spec, G_ab, G_ba, D_a, D_b, a, b)
    return g_loss, d_loss
