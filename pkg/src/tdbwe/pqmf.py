"""Pseudo-QMF analysis/synthesis bank (cosine-modulated, Kaiser prototype)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from scipy import optimize
from scipy import signal as sig


def _prototype(taps: int, cutoff: float, beta: float) -> np.ndarray:
    return sig.firwin(taps + 1, cutoff, window=("kaiser", beta))


@lru_cache(maxsize=None)
def optimal_cutoff(subbands: int = 4, taps: int = 62, beta: float = 9.0) -> float:
    """Prototype cutoff (fraction of Nyquist) minimising the power-complementarity error.

    A PQMF bank reconstructs almost perfectly when the squared magnitude of
    the prototype ``|P(w)|^2`` is symmetric about ``pi / (2 * subbands)`` so
    that neighbouring channels sum to unity across the transition band.
    """
    w = np.linspace(0, np.pi / subbands, 512)

    def objective(cutoff):
        _, h = sig.freqz(_prototype(taps, cutoff, beta), worN=np.concatenate([w, np.pi / subbands - w]))
        mag2 = np.abs(h) ** 2
        return np.max(np.abs(mag2[:512] + mag2[512:] - 1.0))

    res = optimize.minimize_scalar(objective, bounds=(0.5 / subbands / 2, 1.5 / subbands / 2),
                                   method="bounded", options={"xatol": 1e-7})
    return float(res.x)


def filter_bank(subbands: int = 4, taps: int = 62, beta: float = 9.0,
                cutoff: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Analysis and synthesis filters, each of shape (subbands, taps + 1)."""
    if cutoff is None:
        cutoff = optimal_cutoff(subbands, taps, beta)
    proto = _prototype(taps, cutoff, beta)
    n = np.arange(taps + 1)
    h = np.zeros((subbands, taps + 1))
    g = np.zeros((subbands, taps + 1))
    for k in range(subbands):
        arg = (2 * k + 1) * (np.pi / (2 * subbands)) * (n - taps / 2)
        phase = (-1) ** k * np.pi / 4
        h[k] = 2 * proto * np.cos(arg + phase)
        g[k] = 2 * proto * np.cos(arg - phase)
    return h, g


class PQMF(torch.nn.Module):
    """Differentiable PQMF bank.

    Args:
        subbands (int): Number of subbands.
        taps (int): Prototype filter order (filters have ``taps + 1`` coefficients).
        beta (float): Kaiser window shape parameter.

    """

    def __init__(self, subbands=4, taps=62, beta=9.0):
        super().__init__()
        h, g = filter_bank(subbands, taps, beta)
        self.subbands = subbands
        self.taps = taps
        self.register_buffer("analysis_filter", torch.from_numpy(h).float().unsqueeze(1))
        self.register_buffer("synthesis_filter", torch.from_numpy(g).float().unsqueeze(0))
        updown = torch.zeros(subbands, subbands, subbands)
        for k in range(subbands):
            updown[k, k, 0] = 1.0
        self.register_buffer("updown_filter", updown)

    def analysis(self, x):
        """Split (B, 1, T) into (B, subbands, ceil(T / subbands))."""
        pad = (-x.shape[-1]) % self.subbands
        if pad:
            x = F.pad(x, (0, pad))
        x = F.conv1d(F.pad(x, (self.taps // 2, self.taps // 2)),
                     self.analysis_filter.to(x.dtype))
        return F.conv1d(x, self.updown_filter.to(x.dtype), stride=self.subbands)

    def forward(self, x):
        return self.analysis(x)

    def synthesis(self, x):
        """Merge (B, subbands, T') back into (B, 1, T' * subbands)."""
        x = F.conv_transpose1d(x, self.updown_filter.to(x.dtype) * self.subbands,
                               stride=self.subbands)
        return F.conv1d(F.pad(x, (self.taps // 2, self.taps // 2)),
                        self.synthesis_filter.to(x.dtype))


def pqmf_analysis(x: np.ndarray, bands: int = 4) -> np.ndarray:
    """Numpy convenience wrapper: 1-D signal -> (bands, ceil(len / bands))."""
    bank = PQMF(bands).double()
    with torch.no_grad():
        out = bank.analysis(torch.as_tensor(np.asarray(x, dtype=np.float64)).view(1, 1, -1))
    return out[0].numpy()


def pqmf_synthesis(subbands: np.ndarray) -> np.ndarray:
    bank = PQMF(subbands.shape[0]).double()
    with torch.no_grad():
        out = bank.synthesis(torch.as_tensor(subbands, dtype=torch.float64).unsqueeze(0))
    return out[0, 0].numpy()
