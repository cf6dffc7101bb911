"""Constructive-interference QoS margins and Monte-Carlo SER."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from .cascade import Channels, as_tensor
from .scene import SceneConfig, SymbolFrame, psk_alphabet


def effective_channels(ch, phi) -> torch.Tensor:
    """Rows ``h_k^H + h_rk^H Phi G`` as plain vectors (``y = h_eff @ x[l]``), shape ``(..., K, M)``."""
    ch = Channels.of(ch)
    phi = as_tensor(phi)
    return ch.h_k.conj() + torch.einsum("...kn,...nm->...km", phi[..., None, :] * ch.h_rk.conj(), ch.G)


def received(x, phi, ch) -> torch.Tensor:
    """Noise-free user samples ``y[k, l]``."""
    return torch.einsum("...km,...lm->...kl", effective_channels(ch, phi), as_tensor(x))


def _derotation(frame) -> torch.Tensor:
    s = frame.s if isinstance(frame, SymbolFrame) else frame
    s = as_tensor(s)
    return s.conj() / s.abs()


@dataclass
class QosMargins:
    g: torch.Tensor  # (..., K, L); g <= 0 means satisfied
    h_eff: torch.Tensor  # (..., K, M)


def ci_margin(x, phi, frame, ch, cfg: SceneConfig) -> QosMargins:
    """``g = gamma - Re{y e^{-j<s}} sin(Theta) + |Im{y e^{-j<s}}| cos(Theta)``."""
    h_eff = effective_channels(ch, phi)
    y = torch.einsum("...km,...lm->...kl", h_eff, as_tensor(x))
    z = y * _derotation(frame)
    gamma = torch.as_tensor(cfg.gamma, dtype=torch.float64)[:, None]
    g = gamma - z.real * math.sin(cfg.Theta) + z.imag.abs() * math.cos(cfg.Theta)
    return QosMargins(g, h_eff)


def ci_margin_grad(x, phi, frame, ch, cfg: SceneConfig):
    """Real-composite gradients of every ``g[k, l]``.

    Returned as complex arrays packing ``dg/dRe + j dg/dIm``: ``gx`` with
    shape ``(..., K, L, M)`` (w.r.t. ``x[l]``; other slots have zero
    gradient) and ``gphi`` with shape ``(..., K, L, N)``. The ``|Im|``
    kink uses ``sign(0) = 0``.
    """
    ch = Channels.of(ch)
    x, phi = as_tensor(x), as_tensor(phi)
    h_eff = effective_channels(ch, phi)
    rot = _derotation(frame)  # (..., K, L)
    z = torch.einsum("...km,...lm->...kl", h_eff, x) * rot
    sign = torch.sign(z.imag)
    # d/dz* packing of Re{c w} is conj(c); of Im{c w} it is j conj(c)
    weight = -math.sin(cfg.Theta) + 1j * sign * math.cos(cfg.Theta)  # (..., K, L)
    cx = rot[..., None] * h_eff[..., :, None, :]  # (..., K, L, M)
    gx = weight[..., None] * cx.conj()
    Gx = torch.einsum("...nm,...lm->...ln", ch.G, x)  # (..., L, N)
    cphi = rot[..., None] * ch.h_rk.conj()[..., :, None, :] * Gx[..., None, :, :]
    gphi = weight[..., None] * cphi.conj()
    return gx, gphi


def demodulate(y: np.ndarray, Omega: int) -> np.ndarray:
    """Index of the nearest PSK point by angular distance."""
    offset = 0.0 if Omega == 2 else math.pi / Omega
    step = 2.0 * math.pi / Omega
    return np.mod(np.rint((np.angle(y) - offset) / step), Omega).astype(int)


def simulate_ser(x, phi, frame, ch, cfg: SceneConfig, trials: int, rng=None):
    """Symbol error rate with ``CN(0, sigma_k^2)`` noise.

    ``trials`` noise realizations are drawn for each of the ``K * L``
    designed slots. Returns ``(per_user, mean)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng)
    y = received(x, phi, ch).detach().numpy()
    s = frame.s if isinstance(frame, SymbolFrame) else np.asarray(frame)
    alphabet = psk_alphabet(cfg.Omega)
    sent = np.argmin(np.abs(s[..., None] - alphabet), axis=-1)
    sigma = np.sqrt(np.asarray(cfg.sigma2_k))
    shape = (trials, *y.shape)
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
    noise *= sigma[:, None]
    decided = demodulate(y + noise, cfg.Omega)
    errors = decided != sent
    per_user = errors.mean(axis=(0, -1))
    return per_user, float(per_user.mean())


SER_COLUMNS = ("gamma_dB", "user", "ser", "trials", "seed")


def write_ser_csv(path, rows):
    """Rows are ``(gamma_dB, user, ser, trials, seed)`` tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SER_COLUMNS)
        w.writerows(rows)


def to_numpy(t) -> np.ndarray:
    return t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)

