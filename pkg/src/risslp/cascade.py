"""Cascaded BS/RIS radar operators and their angle derivatives.

The round-trip target operator is rank one,
``H0(phi) = a0 b0^T`` with ``a0 = h_bt + G^H diag(phi) h_rt`` (receive
side) and ``b0^T = h_bt^H + h_rt^H diag(phi) G`` (transmit side), and the
same holds per clutter source. The stacked operators
``I_L (x) H0`` and ``(I_L (x) Hq) Jq`` are never formed during
optimization; they are applied slot by slot on waveforms shaped
``(..., L, M)``. Dense versions are kept for oracle tests.

All functions accept numpy arrays or torch tensors with arbitrary leading
batch dimensions and return complex128 torch tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .scene import ChannelSet, SceneConfig

CDTYPE = torch.complex128


def as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == CDTYPE else a.to(CDTYPE)
    return torch.as_tensor(np.asarray(a), dtype=CDTYPE)


@dataclass
class Channels:
    """Torch view of a (possibly batched) :class:`ChannelSet`."""

    G: torch.Tensor
    h_k: torch.Tensor
    h_rk: torch.Tensor
    h_bt: torch.Tensor
    h_rt: torch.Tensor
    h_bq: torch.Tensor
    h_rq: torch.Tensor

    @classmethod
    def of(cls, ch) -> "Channels":
        if isinstance(ch, cls):
            return ch
        if isinstance(ch, (list, tuple)):
            ch = ChannelSet.stack(ch)
        return cls(*(as_tensor(getattr(ch, name)) for name in ChannelSet.FIELDS))

    @property
    def batch_shape(self) -> torch.Size:
        return self.h_bt.shape[:-1]


@dataclass
class CascadeOps:
    """Rank-one factors of the target and clutter round-trip operators."""

    a0: torch.Tensor  # (..., M)
    b0: torch.Tensor  # (..., M)
    aq: torch.Tensor  # (..., Q, M)
    bq: torch.Tensor  # (..., Q, M)
    d_q: tuple
    L: int

    @property
    def H0(self) -> torch.Tensor:
        return self.a0[..., :, None] * self.b0[..., None, :]

    @property
    def Hq(self) -> torch.Tensor:
        return self.aq[..., :, None] * self.bq[..., None, :]

    def apply_target(self, x: torch.Tensor) -> torch.Tensor:
        """``H0 x[l]`` for every slot; ``x`` shaped ``(..., L, M)``."""
        s = (x * self.b0[..., None, :]).sum(-1)
        return s[..., :, None] * self.a0[..., None, :]

    def apply_clutter(self, x: torch.Tensor) -> torch.Tensor:
        """``Hq x[l - d_q]`` (zero for ``l < d_q``) shaped ``(..., Q, L, M)``."""
        s = torch.einsum("...lm,...qm->...ql", x, self.bq)
        out = []
        for q, d in enumerate(self.d_q):
            sq = s[..., q, :]
            if d:
                sq = torch.cat([torch.zeros_like(sq[..., :d]), sq[..., : self.L - d]], dim=-1)
            out.append(sq[..., :, None] * self.aq[..., q, None, :])
        if not out:
            return x.new_zeros((*x.shape[:-2], 0, *x.shape[-2:]))
        return torch.stack(out, dim=-3)

    def dense_target(self) -> torch.Tensor:
        eye = torch.eye(self.L, dtype=CDTYPE)
        return torch.kron(eye, self.H0) if self.a0.ndim == 1 else _batched_kron(eye, self.H0)

    def dense_clutter(self, q: int) -> torch.Tensor:
        M = self.a0.shape[-1]
        eye = torch.eye(self.L, dtype=CDTYPE)
        Hq = self.Hq[..., q, :, :]
        blk = torch.kron(eye, Hq) if Hq.ndim == 2 else _batched_kron(eye, Hq)
        return blk @ shift_matrix(self.d_q[q], M, self.L)


def _batched_kron(eye: torch.Tensor, H: torch.Tensor) -> torch.Tensor:
    L, M = eye.shape[0], H.shape[-1]
    out = torch.einsum("ij,...ab->...iajb", eye, H)
    return out.reshape(*H.shape[:-2], L * M, L * M)


def _side_vectors(h_b, h_r, G, phi):
    """Receive (``h_b + G^H Phi h_r``) and transmit (``conj(h_b) + G^T Phi conj(h_r)``) vectors."""
    a = h_b + torch.einsum("...nm,...n->...m", G.conj(), phi * h_r)
    b = h_b.conj() + torch.einsum("...nm,...n->...m", G, phi * h_r.conj())
    return a, b


def build_cascade(ch, phi, cfg: SceneConfig) -> CascadeOps:
    ch = Channels.of(ch)
    phi = as_tensor(phi)
    if phi.shape[-1] != ch.G.shape[-2] or ch.h_bt.shape[-1] != ch.G.shape[-1]:
        raise ValueError("dimension mismatch between channels and RIS phases")
    a0, b0 = _side_vectors(ch.h_bt, ch.h_rt, ch.G, phi)
    aq, bq = _side_vectors(ch.h_bq, ch.h_rq, ch.G[..., None, :, :], phi[..., None, :])
    return CascadeOps(a0, b0, aq, bq, tuple(cfg.d_q), cfg.L)


def shift_matrix(d_q: int, M: int, L: int) -> torch.Tensor:
    """0/1 delay matrix with ones where ``i - j = M d_q``."""
    if not 0 <= d_q <= L:
        raise ValueError("d_q must lie in [0, L]")
    n = M * L
    return torch.diag(torch.ones(n - M * d_q, dtype=CDTYPE), -M * d_q) if d_q < L else torch.zeros(n, n, dtype=CDTYPE)


def clutter_covariance(ops: CascadeOps, x, cfg: SceneConfig) -> torch.Tensor:
    """``sum_q xi_q^2 (Hq~ x)(Hq~ x)^H + xi_z^2 I`` as a dense ``(..., ML, ML)`` matrix."""
    x = as_tensor(x)
    ML = x.shape[-1] * x.shape[-2]
    eye = torch.eye(ML, dtype=CDTYPE)
    if cfg.Q == 0:
        return cfg.xi2_z * eye.expand(*x.shape[:-2], ML, ML).clone()
    u = ops.apply_clutter(x).flatten(-2)  # (..., Q, ML)
    w = torch.as_tensor(cfg.xi2_q, dtype=torch.float64)[:, None]
    return torch.einsum("...qi,...qj->...ij", w * u, u.conj()) + cfg.xi2_z * eye


@dataclass
class CascadeDerivs:
    """Derivatives of the target factors with respect to theta_0 and theta_RIS."""

    a0: torch.Tensor
    b0: torch.Tensor
    da0_dtheta0: torch.Tensor
    db0_dtheta0: torch.Tensor
    da0_dthetaRIS: torch.Tensor
    db0_dthetaRIS: torch.Tensor

    @property
    def dH0_dtheta0(self) -> torch.Tensor:
        return _outer(self.da0_dtheta0, self.b0) + _outer(self.a0, self.db0_dtheta0)

    @property
    def dH0_dthetaRIS(self) -> torch.Tensor:
        return _outer(self.da0_dthetaRIS, self.b0) + _outer(self.a0, self.db0_dthetaRIS)

    def apply(self, x: torch.Tensor, which: str) -> torch.Tensor:
        """``(dH0/dtheta) x[l]`` per slot for ``which`` in ``{"theta0", "thetaRIS"}``."""
        da, db = (
            (self.da0_dtheta0, self.db0_dtheta0) if which == "theta0" else (self.da0_dthetaRIS, self.db0_dthetaRIS)
        )
        s = (x * self.b0[..., None, :]).sum(-1)
        ds = (x * db[..., None, :]).sum(-1)
        return s[..., :, None] * da[..., None, :] + ds[..., :, None] * self.a0[..., None, :]


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def steering_derivative_factor(theta: float, count: int) -> torch.Tensor:
    """``d a_m / d theta = j pi m cos(theta) a_m``; returns the factor ``j pi m cos(theta)``."""
    return torch.as_tensor(1j * math.pi * np.arange(count) * math.cos(theta), dtype=CDTYPE)


def cascade_derivs(ch, phi, cfg: SceneConfig) -> CascadeDerivs:
    ch = Channels.of(ch)
    phi = as_tensor(phi)
    dh_bt = ch.h_bt * steering_derivative_factor(cfg.theta_0, ch.h_bt.shape[-1])
    dh_rt = ch.h_rt * steering_derivative_factor(cfg.theta_RIS, ch.h_rt.shape[-1])
    a0, b0 = _side_vectors(ch.h_bt, ch.h_rt, ch.G, phi)
    zero_m = torch.zeros_like(ch.h_bt)
    da_t0, db_t0 = dh_bt, dh_bt.conj()
    da_ris, db_ris = _side_vectors(zero_m, dh_rt, ch.G, phi)
    return CascadeDerivs(a0, b0, da_t0, db_t0, da_ris, db_ris)
