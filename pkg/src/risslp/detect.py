"""Radar detection metrics: MVDR filter, output SINR and the chi-square detector.

The detection objective ``f1 = x^H H0~^H C^{-1} H0~ x`` is *maximized*
(output SINR is ``xi_0^2 f1``). Every application of ``C^{-1}`` goes
through a Hermitian Cholesky factor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .cascade import CascadeOps, as_tensor, build_cascade, clutter_covariance
from .scene import SceneConfig


def cholesky_solve(C: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``C^{-1} b`` for Hermitian PD ``C``; ``b`` is a vector ``(..., n)``."""
    chol = torch.linalg.cholesky(C)
    return torch.cholesky_solve(b[..., None], chol)[..., 0]


def mvdr_filter(ops: CascadeOps, x, cfg: SceneConfig) -> torch.Tensor:
    """Distortionless filter ``C^{-1} a / (a^H C^{-1} a)`` with ``a = H0~ x``."""
    x = as_tensor(x)
    a = ops.apply_target(x).flatten(-2)
    Ci_a = cholesky_solve(clutter_covariance(ops, x, cfg), a)
    return Ci_a / (a.conj() * Ci_a).sum(-1, keepdim=True)


def filter_variances(w, ops: CascadeOps, x, cfg: SceneConfig):
    """Output variances ``(eps0, eps1)`` of ``w^H r`` without/with the target."""
    x = as_tensor(x)
    w = as_tensor(w)
    eps0 = cfg.xi2_z * (w.abs() ** 2).sum(-1)
    if cfg.Q:
        u = ops.apply_clutter(x).flatten(-2)
        proj = torch.einsum("...i,...qi->...q", w.conj(), u).abs() ** 2
        eps0 = eps0 + (proj * torch.as_tensor(cfg.xi2_q, dtype=torch.float64)).sum(-1)
    a = ops.apply_target(x).flatten(-2)
    eps1 = eps0 + cfg.xi2_0 * (w.conj() * a).sum(-1).abs() ** 2
    return eps0, eps1


def output_sinr(w, ops: CascadeOps, x, cfg: SceneConfig) -> torch.Tensor:
    eps0, eps1 = filter_variances(w, ops, x, cfg)
    return (eps1 - eps0) / eps0


def f1_value(x, phi, ch, cfg: SceneConfig) -> torch.Tensor:
    """``x^H H0~^H C^{-1} H0~ x`` (real, one value per batch entry)."""
    x = as_tensor(x)
    ops = build_cascade(ch, phi, cfg)
    a = ops.apply_target(x).flatten(-2)
    Ci_a = cholesky_solve(clutter_covariance(ops, x, cfg), a)
    return (a.conj() * Ci_a).sum(-1).real


def f1_grad(x, phi, ch, cfg: SceneConfig):
    """Reverse-mode gradients of ``f1`` packed as ``d/dRe + j d/dIm``."""
    x = as_tensor(x).detach().requires_grad_(True)
    phi = as_tensor(phi).detach().requires_grad_(True)
    gx, gphi = torch.autograd.grad(f1_value(x, phi, ch, cfg).sum(), (x, phi))
    return gx, gphi


# ---------------------------------------------------------------------------
# chi-square detector


def chi2_2_cdf(t):
    """CDF of the central chi-square law with two degrees of freedom."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("chi-square argument must be non-negative")
    return -np.expm1(-t / 2.0)


def chi2_2_ppf(p):
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p >= 1)):
        raise ValueError("probability must lie in [0, 1)")
    return -2.0 * np.log1p(-p)


def detection_probability(eps0, eps1, pfa):
    """``Pd = 1 - F((eps0/eps1) F^{-1}(1 - Pfa))``."""
    eps0, eps1, pfa = (np.asarray(v, dtype=float) for v in (eps0, eps1, pfa))
    if np.any(eps0 <= 0) or np.any(eps1 < eps0):
        raise ValueError("need eps1 >= eps0 > 0")
    if np.any((pfa <= 0) | (pfa >= 1)):
        raise ValueError("false-alarm probability must lie in (0, 1)")
    return 1.0 - chi2_2_cdf(eps0 / eps1 * chi2_2_ppf(1.0 - pfa))


@dataclass
class DetectionReport:
    w: np.ndarray
    sinr: float
    eps0: float
    eps1: float
    pfa: float
    pd: float
    delta_thr: float


def detection_report(x, phi, ch, cfg: SceneConfig, pfa: float = 1e-2) -> DetectionReport:
    """MVDR design point summary for a single (unbatched) scene."""
    ops = build_cascade(ch, phi, cfg)
    w = mvdr_filter(ops, x, cfg)
    eps0, eps1 = (float(v) for v in filter_variances(w, ops, x, cfg))
    return DetectionReport(
        w=w.detach().numpy(),
        sinr=eps1 / eps0 - 1.0,
        eps0=eps0,
        eps1=eps1,
        pfa=pfa,
        pd=float(detection_probability(eps0, eps1, pfa)),
        delta_thr=float(eps0 * chi2_2_ppf(1.0 - pfa)),
    )


def roc_curve(eps0: float, eps1: float, pfa_grid) -> list[tuple[float, float]]:
    grid = np.asarray(pfa_grid, dtype=float)
    if np.any((grid <= 0) | (grid >= 1)):
        raise ValueError("ROC grid must lie strictly inside (0, 1)")
    pd = detection_probability(eps0, eps1, grid)
    return list(zip(grid.tolist(), np.atleast_1d(pd).tolist()))


ROC_COLUMNS = ("pfa", "pd", "scheme", "seed")


def write_roc_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROC_COLUMNS)
        w.writerows(rows)
