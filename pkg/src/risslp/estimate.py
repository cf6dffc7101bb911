"""Fisher information and CRB for joint DoA estimation of (theta_0, theta_RIS).

Unknowns are ``[theta_0, theta_RIS, Re(alpha_0), Im(alpha_0)]`` with
observation mean ``mu = alpha_0 H0~(phi) x`` and clutter-plus-noise
covariance ``C``. ``C`` does not depend on the unknowns, so only the mean
term contributes to the FIM.

The ``theta_RIS`` diagonal entry uses ``dH0/dtheta_RIS`` in both slots.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import torch

from .cascade import as_tensor, build_cascade, cascade_derivs, clutter_covariance
from .scene import SceneConfig


class DegenerateGeometryError(ValueError):
    """The angle block of the FIM is (numerically) singular."""


@dataclass
class FimBlocks:
    F_tt: torch.Tensor  # (..., 2, 2)
    F_ta: torch.Tensor  # (..., 2, 2)
    F_aa: torch.Tensor  # (..., 2, 2)
    mu_mean: torch.Tensor  # (..., ML)
    C: torch.Tensor  # (..., ML, ML)

    def full(self) -> torch.Tensor:
        top = torch.cat([self.F_tt, self.F_ta], dim=-1)
        bottom = torch.cat([self.F_ta.mT, self.F_aa], dim=-1)
        return torch.cat([top, bottom], dim=-2)

    def schur(self) -> torch.Tensor:
        """``F_tt - F_ta F_aa^{-1} F_ta^T``: the inverse of the angle CRB block."""
        return self.F_tt - self.F_ta @ torch.linalg.solve(self.F_aa, self.F_ta.mT)


@dataclass
class CrbReport:
    crb_theta: float
    E_tt: torch.Tensor


def nominal_alpha(cfg: SceneConfig, alpha0=None) -> complex:
    return complex(math.sqrt(cfg.xi2_0)) if alpha0 is None else complex(alpha0)


def fim_blocks(x, phi, ch, cfg: SceneConfig, alpha0=None) -> FimBlocks:
    x = as_tensor(x)
    alpha = nominal_alpha(cfg, alpha0)
    ops = build_cascade(ch, phi, cfg)
    der = cascade_derivs(ch, phi, cfg)
    a = ops.apply_target(x).flatten(-2)
    D = torch.stack([der.apply(x, "theta0").flatten(-2), der.apply(x, "thetaRIS").flatten(-2)], dim=-1)
    A = torch.stack([a, 1j * a], dim=-1)  # [1 j]^T (x) H0~ x
    C = clutter_covariance(ops, x, cfg)
    chol = torch.linalg.cholesky(C)
    Ci_D = torch.cholesky_solve(D, chol)
    Ci_A = torch.cholesky_solve(A, chol)
    F_tt = 2.0 * abs(alpha) ** 2 * (D.mH @ Ci_D).real
    F_ta = 2.0 * (alpha.conjugate() * (D.mH @ Ci_A)).real
    F_aa = 2.0 * (A.mH @ Ci_A).real
    return FimBlocks(F_tt, F_ta, F_aa, alpha * a, C)


def _trace_inv_2x2(S: torch.Tensor) -> torch.Tensor:
    det = S[..., 0, 0] * S[..., 1, 1] - S[..., 0, 1] * S[..., 1, 0]
    return (S[..., 0, 0] + S[..., 1, 1]) / det


def f2_core(x, phi, ch, cfg: SceneConfig, alpha0=None) -> torch.Tensor:
    """Unchecked, differentiable ``Tr{Schur^{-1}}``."""
    return _trace_inv_2x2(fim_blocks(x, phi, ch, cfg, alpha0).schur())


def _check_schur(S: torch.Tensor, rcond_min: float = 1e-12):
    eig = torch.linalg.eigvalsh(0.5 * (S + S.mT).detach())
    rcond = eig[..., 0] / eig[..., -1].abs().clamp_min(torch.finfo(eig.dtype).tiny)
    if torch.any(~torch.isfinite(rcond)) or torch.any(rcond < rcond_min):
        raise DegenerateGeometryError(
            f"angle Fisher block is singular (rcond {float(rcond.min()):.3g}); angles unidentifiable"
        )


def f2_value(x, phi, ch, cfg: SceneConfig, alpha0=None) -> torch.Tensor:
    """CRB objective ``Tr{(F_tt - F_ta F_aa^{-1} F_ta^T)^{-1}}`` in rad^2."""
    S = fim_blocks(x, phi, ch, cfg, alpha0).schur()
    _check_schur(S)
    return _trace_inv_2x2(S)


def f2_grad(x, phi, ch, cfg: SceneConfig, alpha0=None):
    """Reverse-mode gradients of ``f2`` packed as ``d/dRe + j d/dIm``."""
    x = as_tensor(x).detach().requires_grad_(True)
    phi = as_tensor(phi).detach().requires_grad_(True)
    value = f2_value(x, phi, ch, cfg, alpha0)
    return torch.autograd.grad(value.sum(), (x, phi))


def crb_report(x, phi, ch, cfg: SceneConfig, alpha0=None) -> CrbReport:
    S = fim_blocks(x, phi, ch, cfg, alpha0).schur()
    _check_schur(S)
    E_tt = torch.linalg.inv(S)
    return CrbReport(float(torch.diagonal(E_tt, dim1=-2, dim2=-1).sum()), E_tt)


def write_crb_csv(path, rows, sweep: str = "P_dBm"):
    """Rows are ``(sweep_value, crb_theta, scheme, seed)``; ``sweep`` is ``P_dBm`` or ``gamma_dB``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((sweep, "crb_theta", "scheme", "seed"))
        w.writerows(rows)
