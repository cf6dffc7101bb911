"""Quick oracle checks run by ``risslp verify``.

Each check builds a few random desk instances, compares an implementation
against an independent brute-force or finite-difference computation and
reports ``(name, passed, detail)``.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .cascade import build_cascade
from .detect import detection_probability, f1_value, filter_variances, mvdr_filter, output_sinr
from .estimate import fim_blocks
from .scene import SceneConfig, draw_symbols, synth_channels
from .slp_comm import ci_margin, ci_margin_grad
from .unfold import closed_form_v, closed_form_varphi, project_x


def _instance(cfg, seed):
    rng = np.random.default_rng(seed)
    ch = synth_channels(cfg, rng)
    x = project_x(np.exp(2j * math.pi * rng.random((cfg.L, cfg.M))), cfg)
    phi = torch.as_tensor(np.exp(2j * math.pi * rng.random(cfg.N)))
    return ch, x, phi, rng


def check_mvdr(cfg: SceneConfig, seeds=range(5), filters=200):
    worst = 0.0
    for seed in seeds:
        ch, x, phi, rng = _instance(cfg, seed)
        ops = build_cascade(ch, phi, cfg)
        w_star = mvdr_filter(ops, x, cfg)
        best = float(output_sinr(w_star, ops, x, cfg))
        W = torch.as_tensor(rng.standard_normal((filters, cfg.M * cfg.L)) + 1j * rng.standard_normal((filters, cfg.M * cfg.L)))
        eps0, eps1 = filter_variances(W, ops, x, cfg)
        if float(((eps1 - eps0) / eps0).max()) > best * (1 + 1e-12):
            return "mvdr", False, f"seed {seed}: a random filter beats MVDR"
        worst = max(worst, abs(best - cfg.xi2_0 * float(f1_value(x, phi, ch, cfg))) / best)
    return "mvdr", worst <= 1e-9, f"max rel err SINR vs xi0^2 f1 = {worst:.2e}"


def check_detection_law(eps0=1.0, eps1=3.0, pfa=1e-1, trials=20_000, seed=0):
    rng = np.random.default_rng(seed)
    thr = -2.0 * math.log(pfa) * eps0 / 2.0  # |w^H r|^2 threshold
    z = (rng.standard_normal(trials) + 1j * rng.standard_normal(trials)) * math.sqrt(eps1 / 2.0)
    pd_mc = float(np.mean(np.abs(z) ** 2 > thr))
    pd = float(detection_probability(eps0, eps1, pfa))
    return "detection_law", abs(pd - pd_mc) <= 0.02, f"closed form {pd:.4f} vs Monte Carlo {pd_mc:.4f}"


def check_fim(cfg: SceneConfig, seeds=range(3), h=1e-6):
    worst = 0.0
    for seed in seeds:
        ch, x, phi, _ = _instance(cfg, seed)
        blocks = fim_blocks(x, phi, ch, cfg)
        F = blocks.full()
        alpha = math.sqrt(cfg.xi2_0)

        def mean(th0, thr, a):
            c = cfg.replace(theta_0=th0, theta_RIS=thr)
            ch2 = synth_channels(c, np.random.default_rng(seed))
            return a * build_cascade(ch2, phi, c).apply_target(x).flatten(-2)

        base = (cfg.theta_0, cfg.theta_RIS, alpha + 0j)
        steps = [(h, 0, 0), (0, h, 0), (0, 0, h), (0, 0, 1j * h)]
        D = []
        for d in steps:
            p = [b + s for b, s in zip(base, d)]
            m = [b - s for b, s in zip(base, d)]
            D.append((mean(p[0], p[1], p[2]) - mean(m[0], m[1], m[2])) / (2 * h))
        D = torch.stack(D, -1)
        chol = torch.linalg.cholesky(blocks.C)
        F_fd = 2.0 * (D.mH @ torch.cholesky_solve(D, chol)).real
        worst = max(worst, float(((F - F_fd).abs() / F_fd.abs().amax()).max()))
    return "fim", worst <= 1e-4, f"max rel err vs finite differences = {worst:.2e}"


def check_ci_gradient(cfg: SceneConfig, seed=0, h=1e-7):
    ch, x, phi, rng = _instance(cfg, seed)
    frame = draw_symbols(cfg, rng).s
    gx, _ = ci_margin_grad(x, phi, frame, ch, cfg)
    k, l, m = 0, 0, 0
    e = torch.zeros_like(x)
    e[l, m] = h
    gp = ci_margin(x + e, phi, frame, ch, cfg).g[k, l]
    gm = ci_margin(x - e, phi, frame, ch, cfg).g[k, l]
    fd = float((gp - gm) / (2 * h))
    an = float(gx[k, l, m].real)
    err = abs(fd - an) / max(abs(an), 1e-300)
    return "ci_gradient", err <= 1e-5, f"d g / d Re x rel err = {err:.2e}"


def check_closed_forms(seed=0, grid=10_000):
    rng = np.random.default_rng(seed)
    rho, amp = 1.3, 2.0
    x = torch.as_tensor(rng.standard_normal(4) + 1j * rng.standard_normal(4))
    mu = torch.as_tensor(rng.standard_normal(4) + 1j * rng.standard_normal(4))
    v = closed_form_v(x, mu, rho, amp)
    cand = amp * torch.exp(1j * torch.linspace(0, 2 * math.pi, grid, dtype=torch.float64))
    obj = lambda z: (x[:, None] - z + mu[:, None] / rho).abs() ** 2
    gap_v = float((obj(v[:, None]) - obj(cand[None, :]).amin(-1, keepdim=True)).max())
    phi = torch.exp(1j * torch.as_tensor(rng.random(4) * 6.3))
    vp = closed_form_varphi(phi, mu, rho)
    cand1 = cand / amp
    obj1 = lambda z: (phi[:, None] - z + mu[:, None] / rho).abs() ** 2
    gap_p = float((obj1(vp[:, None]) - obj1(cand1[None, :]).amin(-1, keepdim=True)).max())
    gap = max(gap_v, gap_p)
    return "closed_forms", gap <= 1e-6, f"objective gap vs phase grid = {gap:.2e}"


def run_all(cfg: SceneConfig | None = None):
    cfg = cfg or SceneConfig.desk()
    return [
        check_mvdr(cfg),
        check_detection_law(),
        check_fim(cfg),
        check_ci_gradient(cfg),
        check_closed_forms(),
    ]
