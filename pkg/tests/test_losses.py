import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tdbwe.losses import (ADV_KINDS, EPS_MAG, SUP_KINDS, LossSpec, MrstftConfig, adv_loss_d,
                          adv_loss_g, cgan_g_loss, cgan_objective, cycle_loss, cyclegan_d_loss,
                          cyclegan_objective, gradient_penalty, identity_loss, spectral_convergence,
                          stft_magnitude, sup_loss)

T = torch.tensor
scores = st.lists(st.floats(-6, 6, allow_nan=False), min_size=1, max_size=6)


def test_waveform_losses_examples():
    x, y = T([[1.0, 1.0]]), T([[0.0, 0.0]])
    assert sup_loss("mae", x, y).item() == pytest.approx(1.0)
    assert sup_loss("mse", x, y).item() == pytest.approx(1.0)
    z = torch.randn(2, 4000)
    assert sup_loss("mse", z, z).item() == 0.0
    assert sup_loss("mrstft", z, z).item() == pytest.approx(0.0, abs=1e-7)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        sup_loss("mae", torch.zeros(1, 10), torch.zeros(1, 11))


def test_feature_losses_need_provider():
    with pytest.raises(ValueError):
        sup_loss("fm", torch.zeros(1, 10), torch.zeros(1, 10))


def _numpy_stft_mag(x, n_fft, hop, win):
    # centred frames, zero padding, periodic Hann centred in the FFT frame
    w = np.zeros(n_fft)
    left = (n_fft - win) // 2
    w[left:left + win] = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    xp = np.pad(x, n_fft // 2)
    frames = [xp[i:i + n_fft] * w for i in range(0, len(xp) - n_fft + 1, hop)]
    return np.abs(np.fft.rfft(np.array(frames), axis=1))


def test_mrstft_impulse_closed_form():
    n = 4800
    x = np.zeros(n)
    x[2400] = 1.0
    expected = 0.0
    for fft, hop, win in MrstftConfig().resolutions:
        mag = _numpy_stft_mag(x, fft, hop, win)
        expected += 1.0 + np.mean(np.abs(np.log(EPS_MAG) - np.log(np.maximum(mag, EPS_MAG))))
    got = sup_loss("mrstft", torch.from_numpy(x)[None], torch.zeros(1, n, dtype=torch.float64))
    assert got.item() == pytest.approx(expected, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 10))
def test_spectral_convergence_scale_invariant(a):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 2048, generator=g, dtype=torch.float64)
    y = torch.randn(1, 2048, generator=g, dtype=torch.float64)
    base = spectral_convergence(stft_magnitude(x, 512, 50, 240), stft_magnitude(y, 512, 50, 240))
    scaled = spectral_convergence(stft_magnitude(a * x, 512, 50, 240),
                                  stft_magnitude(a * y, 512, 50, 240))
    assert scaled.item() == pytest.approx(base.item(), rel=1e-9)


def test_adversarial_examples():
    assert adv_loss_d("lsgan", T([1.0]), T([0.0])).item() == 0.0
    assert adv_loss_d("hinge", T([2.0]), T([-2.0])).item() == 0.0
    assert adv_loss_d("dcl", T([0.7]), T([0.7])).item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert adv_loss_g("lsgan", T([1.0])).item() == 0.0
    assert adv_loss_g("wgan_gp", T([3.0, -1.0])).item() == pytest.approx(-1.0)
    assert adv_loss_g("nonsat", T([0.0])).item() == pytest.approx(math.log(2), abs=1e-6)


def _log_sigmoid(v):
    return -np.logaddexp(0, -v)


def _d_oracle(kind, r, f):
    if kind == "nonsat":
        return -np.mean(_log_sigmoid(r)) - np.mean(np.log1p(-np.exp(_log_sigmoid(f))))
    if kind == "lsgan":
        return np.mean((r - 1) ** 2) + np.mean(f ** 2)
    if kind == "hinge":
        return np.mean(np.maximum(0, 1 - r)) + np.mean(np.maximum(0, 1 + f))
    if kind == "wgan_gp":
        return np.mean(f) - np.mean(r)
    real = np.mean([np.log1p(np.sum(np.exp(f - ri))) for ri in r])
    fake = np.mean([np.log1p(np.sum(np.exp(fj - r))) for fj in f])
    return real + fake


@pytest.mark.parametrize("kind", ADV_KINDS)
@settings(max_examples=40, deadline=None)
@given(r=scores, f=scores)
def test_adv_loss_d_matches_formula(kind, r, f):
    r, f = np.array(r), np.array(f)
    if kind != "dcl":
        f = np.resize(f, len(r))
    gp = torch.zeros(()) if kind == "wgan_gp" else None
    got = adv_loss_d(kind, torch.from_numpy(r), torch.from_numpy(f), gp).item()
    assert got == pytest.approx(_d_oracle(kind, r, f), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_dcl_batch_one_is_softplus(r, f):
    got = adv_loss_d("dcl", T([r], dtype=torch.float64), T([f], dtype=torch.float64)).item()
    assert got == pytest.approx(2 * np.logaddexp(0, f - r), abs=1e-9)


@pytest.mark.parametrize("kind", ADV_KINDS)
@settings(max_examples=25, deadline=None)
@given(f=scores)
def test_adv_loss_g_matches_formula(kind, f):
    f = np.array(f)
    real = np.zeros_like(f)
    got = adv_loss_g(kind, torch.from_numpy(f), torch.from_numpy(real)).item()
    expected = {
        "nonsat": -np.mean(_log_sigmoid(f)),
        "lsgan": np.mean((f - 1) ** 2),
        "hinge": -np.mean(f),
        "wgan_gp": -np.mean(f),
        "dcl": _d_oracle("dcl", f, real),
    }[kind]
    assert got == pytest.approx(expected, abs=1e-6)


def test_dcl_stable_for_large_scores():
    v = adv_loss_d("dcl", T([-500.0, 0.0]), T([500.0, 0.0]))
    assert torch.isfinite(v)


def test_wgan_needs_gp_and_multi_sub_averaging():
    with pytest.raises(ValueError):
        adv_loss_d("wgan_gp", T([0.0]), T([0.0]))
    outs_r = [(T([[1.0]]), []), (T([[3.0]]), [])]
    outs_f = [(T([[0.0]]), []), (T([[0.0]]), [])]
    # averaged, not summed: ((1-1)^2 + (3-1)^2) / 2
    assert adv_loss_d("lsgan", outs_r, outs_f).item() == pytest.approx(2.0)


def test_nonfinite_scores_raise():
    with pytest.raises(FloatingPointError):
        adv_loss_g("lsgan", T([float("nan")]))


class SumCritic(torch.nn.Module):
    def __init__(self, scale=1.0):
        super().__init__()
        self.scale = scale
        self.seen = []

    def forward(self, x):
        self.seen.append(x.detach().clone())
        return self.scale * x.reshape(x.shape[0], -1).sum(1)


@pytest.mark.parametrize("k", [1, 7, 300])
def test_gradient_penalty_closed_form(k):
    real, fake = torch.randn(3, k, dtype=torch.float64), torch.randn(3, k, dtype=torch.float64)
    unit = gradient_penalty(SumCritic(1 / math.sqrt(k)), real, fake)
    assert unit.item() == pytest.approx(0.0, abs=1e-12)
    double = gradient_penalty(SumCritic(2.0), real, fake)
    assert double.item() == pytest.approx((2 * math.sqrt(k) - 1) ** 2, rel=1e-12)
    if k == 1:
        assert gradient_penalty(SumCritic(), real, fake).item() == 0.0


def test_gradient_penalty_interpolates_between():
    real, fake = torch.zeros(4, 50), torch.ones(4, 50)
    critic = SumCritic()
    gradient_penalty(critic, real, fake)
    x = critic.seen[0]
    assert ((x >= 0) & (x <= 1)).all()
    # one coefficient per example
    assert torch.allclose(x, x[:, :1].expand_as(x))


def test_lossspec_validation():
    with pytest.raises(ValueError):
        LossSpec(sup_kind="l3")
    with pytest.raises(ValueError):
        LossSpec(lambda_sup=-1)
    with pytest.raises(ValueError):
        LossSpec(gp_clip=0)
    assert LossSpec().lambda_sup == 0.1 and LossSpec().lambda_cyc == 10


# ---------------------------------------------------------------------------
# Composite objectives on toy networks
# ---------------------------------------------------------------------------


class Affine(torch.nn.Module):
    """Two-parameter waveform map w * x + b."""

    def __init__(self, w=1.0, b=0.0):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor(w, dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.tensor(b, dtype=torch.float64))

    def forward(self, x):
        return self.w * x + self.b


class ToyD(torch.nn.Module):
    """Two conv layers returning [(score, feats)] like the real discriminators."""

    def __init__(self, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.c1 = torch.nn.Conv1d(1, 3, 5, stride=2, padding=2).double()
        self.c2 = torch.nn.Conv1d(3, 1, 3, padding=1).double()
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.5)

    def forward(self, x):
        h = torch.tanh(self.c1(x.reshape(x.shape[0], 1, -1)))
        return [(self.c2(h), [h])]


def aux_provider(x):
    h1 = torch.tanh(x[:, None] * 2.0)
    return [h1, torch.tanh(h1 * 0.5 + 0.1)]


def _fd_check(loss_fn, params, h=1e-6):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    analytic = torch.cat([g.reshape(-1) for g in grads])
    numeric = []
    for p in params:
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (analytic - numeric).norm() / max(numeric.norm().item(), 1e-12)
    return rel.item()


def _batches(length):
    g = torch.Generator().manual_seed(5)
    a = torch.randn(2, length, generator=g, dtype=torch.float64) * 0.3
    b = 0.8 * a + 0.05 * torch.randn(2, length, generator=g, dtype=torch.float64)
    return a, b


@pytest.mark.parametrize("adv", ADV_KINDS)
@pytest.mark.parametrize("sup", SUP_KINDS)
def test_cgan_generator_gradients_match_finite_differences(sup, adv):
    a, b = _batches(2400 if sup == "mrstft" else 64)
    G, D = Affine(0.9, 0.01), ToyD()
    spec = LossSpec(sup_kind=sup, adv_kind=adv, lambda_sup=0.1)
    aux = aux_provider if sup == "afm" else None
    rel = _fd_check(lambda: cgan_g_loss(spec, G, D, a, b, aux), [G.w, G.b])
    assert rel < 1e-3


@pytest.mark.parametrize("adv", ADV_KINDS)
def test_discriminator_gradients_match_finite_differences(adv):
    a, b = _batches(64)
    G, D = Affine(0.7, 0.0), ToyD(1)
    spec = LossSpec(adv_kind=adv)

    def d_loss():
        torch.manual_seed(11)  # same interpolates on every evaluation
        return cgan_objective(spec, G, D, a, b)[1]

    assert _fd_check(d_loss, list(D.parameters())) < 1e-3


def test_lambda_sup_zero_is_pure_adversarial():
    a, b = _batches(64)
    G, D = Affine(0.5, 0.1), ToyD()
    for adv in ADV_KINDS:
        spec = LossSpec(adv_kind=adv, lambda_sup=0.0)
        d_real = D(b) if adv == "dcl" else None
        expected = adv_loss_g(adv, D(G(a)), d_real)
        assert cgan_g_loss(spec, G, D, a, b).item() == expected.item()


def test_identity_generator_has_zero_supervision():
    a, _ = _batches(64)
    parts = {}
    cgan_g_loss(LossSpec(lambda_sup=7.0), Affine(), ToyD(), a, a, parts=parts)
    assert parts["sup"] == 0.0


def test_cgan_identity_term_added():
    a, b = _batches(64)
    G, D = Affine(0.5, 0.1), ToyD()
    base = cgan_g_loss(LossSpec(lambda_id=0.0), G, D, a, b)
    with_id = cgan_g_loss(LossSpec(lambda_id=2.0), G, D, a, b)
    assert with_id.item() == pytest.approx(base.item() + 2.0 * sup_loss("mae", b, G(b)).item())


def test_cgan_rejects_unpaired():
    with pytest.raises(ValueError):
        cgan_objective(LossSpec(), Affine(), ToyD(), torch.zeros(2, 64), torch.zeros(3, 64))


def test_cycle_and_identity_vanish_for_identity_maps():
    a, b = _batches(64)
    spec = LossSpec(lambda_id=10)
    assert cycle_loss(spec, Affine(), Affine(), a, b).item() == 0.0
    assert identity_loss(spec, Affine(), Affine(), a, b).item() == 0.0


def test_cycle_loss_hand_example():
    a, b = T([[1.0]], dtype=torch.float64), T([[3.0]], dtype=torch.float64)
    value = cycle_loss(LossSpec(), Affine(1.0, 1.0), Affine(1.0, -2.0), a, b)
    assert value.item() == pytest.approx(2.0)


def test_cyclegan_objective_composition():
    a, b = _batches(64)
    G_ab, G_ba, D_a, D_b = Affine(0.9, 0.0), Affine(1.1, 0.0), ToyD(2), ToyD(3)
    spec = LossSpec(adv_kind="lsgan", lambda_cyc=10, lambda_id=10)
    parts = {}
    g_loss, d_loss = cyclegan_objective(spec, G_ab, G_ba, D_a, D_b, a, b, parts)
    expected_g = parts["adv"] + 10 * parts["cyc"] + 10 * parts["id"]
    assert g_loss.item() == pytest.approx(expected_g, rel=1e-9)
    expected_d = (adv_loss_d("lsgan", D_b(b), D_b(G_ab(a))) + adv_loss_d("lsgan", D_a(a), D_a(G_ba(b))))
    assert d_loss.item() == pytest.approx(expected_d.item(), rel=1e-9)
    assert cyclegan_d_loss(spec, G_ab, G_ba, D_a, D_b, a, b).item() == pytest.approx(d_loss.item())


def test_supervised_cyclegan_adds_paired_term():
    a, b = _batches(64)
    nets = (Affine(0.9, 0.0), Affine(1.1, 0.0), ToyD(2), ToyD(3))
    plain = cyclegan_objective(LossSpec(), *nets, a, b)[0]
    parts = {}
    sup = cyclegan_objective(LossSpec(cycle_supervised=True, lambda_sup=0.5), *nets, a, b, parts)[0]
    assert sup.item() == pytest.approx(plain.item() + 0.5 * parts["sup"], rel=1e-9)
