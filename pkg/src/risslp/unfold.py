"""Unfolded ADMM solver with ALM / PHR-ALM dual layers and DFP inner layers.

Loop nesting per outer iteration ``t``::

    for j: beta update; for r: DFP step on x, project
    v update
    for j: beta update; for r: DFP step on phi, project
    varphi update
    mu update

Internally the waveform is carried in power-normalized form
``u = x / sqrt(P/M)`` (unit modulus, like ``phi``), the objective is divided
by the RMS of its per-entry gradient at the initial point and the CI margins
by the mean received amplitude at the initial point. With this scaling ``rho`` and all
step sizes are dimensionless and one hand-tuned schedule works across
power levels. Public helpers (projections, closed forms, dual updates) are
the plain formulas; the solver calls them in normalized coordinates.

Every gradient and DFP matrix lives on the stacked ``[Re; Im]`` real vector
of the flattened variable. Samples in a batch are independent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .cascade import Channels, as_tensor, build_cascade
from .detect import f1_value
from .estimate import f2_core
from .scene import SceneConfig, SymbolFrame
from .slp_comm import ci_margin, effective_channels

TASKS = ("detect", "estimate")


# ---------------------------------------------------------------------------
# schedule and state


@dataclass
class StepSchedule:
    """Step sizes indexed ``[t, j, k*L + l]`` (duals) and ``[t, j, r]`` (DFP)."""

    eta: torch.Tensor  # (T, J, KL) x-phase dual steps
    kappa: torch.Tensor  # (T, J, KL) phi-phase dual steps
    tau: torch.Tensor  # (T, J, R) x-phase DFP steps
    zeta: torch.Tensor  # (T, J, R) phi-phase DFP steps

    def __post_init__(self):
        T, J, R = self.tau.shape
        if self.zeta.shape != (T, J, R) or self.eta.shape[:2] != (T, J) or self.kappa.shape != self.eta.shape:
            raise ValueError("inconsistent schedule shapes")

    @property
    def T(self) -> int:
        return self.tau.shape[0]

    @property
    def J(self) -> int:
        return self.tau.shape[1]

    @property
    def R(self) -> int:
        return self.tau.shape[2]

    @property
    def KL(self) -> int:
        return self.eta.shape[2]

    @classmethod
    def constant(cls, T, J, R, KL, eta=1.0, kappa=1.0, tau=0.1, zeta=0.1) -> "StepSchedule":
        full = lambda shape, v: torch.full(shape, float(v), dtype=torch.float64)
        return cls(full((T, J, KL), eta), full((T, J, KL), kappa), full((T, J, R), tau), full((T, J, R), zeta))

    @classmethod
    def hand_tuned(cls, T, KL, J=10, R=1, eta=3.0, kappa=3.0, tau=0.12, zeta=0.12, decay=0.95) -> "StepSchedule":
        """Constant dual steps and geometrically decaying DFP steps (factor ``decay`` per outer iteration)."""
        sch = cls.constant(T, J, R, KL, eta, kappa, tau, zeta)
        d = torch.as_tensor([decay**t for t in range(T)], dtype=torch.float64)[:, None, None]
        return cls(sch.eta, sch.kappa, sch.tau * d, sch.zeta * d)

    def truncate(self, T: int) -> "StepSchedule":
        return StepSchedule(self.eta[:T], self.kappa[:T], self.tau[:T], self.zeta[:T])

    def detach(self) -> "StepSchedule":
        return StepSchedule(*(v.detach() for v in (self.eta, self.kappa, self.tau, self.zeta)))

    def is_positive(self) -> bool:
        return all(bool((v > 0).all()) for v in (self.eta, self.kappa, self.tau, self.zeta))


@dataclass
class AdmmState:
    """Solver iterate in normalized coordinates.

    ``u`` and ``v`` are the waveform and its copy divided by ``sqrt(P/M)``;
    ``mu1`` is the matching normalized dual. ``beta`` holds the CI
    multipliers in normalized-margin units.
    """

    u: torch.Tensor  # (B, L, M)
    v: torch.Tensor
    phi: torch.Tensor  # (B, N)
    varphi: torch.Tensor
    mu1: torch.Tensor
    mu2: torch.Tensor
    beta: torch.Tensor  # (B, K, L)
    rho: float = 1.0

    def waveform(self, cfg: SceneConfig) -> torch.Tensor:
        return cfg.amp * self.u

    def detach(self) -> "AdmmState":
        return replace(self, **{k: getattr(self, k).detach() for k in ("u", "v", "phi", "varphi", "mu1", "mu2", "beta")})

    def index(self, idx) -> "AdmmState":
        return replace(self, **{k: getattr(self, k)[idx] for k in ("u", "v", "phi", "varphi", "mu1", "mu2", "beta")})


@dataclass
class DfpState:
    """Inverse-Hessian surrogate and the most recent (y, delta) pair."""

    Bmat: torch.Tensor  # (B, n, n)
    y: torch.Tensor | None = None
    delta_step: torch.Tensor | None = None

    @classmethod
    def identity(cls, batch: int, n: int) -> "DfpState":
        return cls(torch.eye(n, dtype=torch.float64).expand(batch, n, n).clone())


@dataclass
class TraceRow:
    tag: tuple  # (t, phase, j, r); 0 marks "not applicable"
    objective: torch.Tensor  # raw f per sample
    residual_x: torch.Tensor  # ||x - v||_inf (W^1/2 units)
    residual_phi: torch.Tensor
    max_violation: torch.Tensor  # max_{k,l} g

    @property
    def label(self) -> str:
        t, phase, j, r = self.tag
        return f"t={t}|{phase}|j={j}|r={r}"


TRACE_COLUMNS = ("layer_tag", "sample", "objective", "residual_x", "residual_phi", "max_violation")


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            for b in range(row.objective.shape[0]):
                w.writerow(
                    (
                        row.label,
                        b,
                        repr(float(row.objective[b])),
                        repr(float(row.residual_x[b])),
                        repr(float(row.residual_phi[b])),
                        repr(float(row.max_violation[b])),
                    )
                )


class SolverAbort(RuntimeError):
    """Raised when the Lagrangian turns non-finite; carries the trace so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# elementary updates


def alm_dual_update_x(beta, eta, g):
    """``beta' = max{beta + eta g, 0}``."""
    return torch.clamp(beta + eta * g, min=0.0)


def phr_dual_update(beta, eta, g):
    """PHR multiplier update; same max-form as the plain ALM update."""
    return torch.clamp(beta + eta * g, min=0.0)


def project_modulus(z: torch.Tensor, modulus: float) -> torch.Tensor:
    """Scale each entry to ``modulus`` keeping its phase (phase 0 for zeros)."""
    mag = z.abs()
    unit = torch.where(mag > 0, z / torch.where(mag > 0, mag, torch.ones_like(mag)), torch.ones_like(z))
    return modulus * unit


def project_x(x, cfg_or_amp) -> torch.Tensor:
    amp = cfg_or_amp.amp if isinstance(cfg_or_amp, SceneConfig) else float(cfg_or_amp)
    return project_modulus(as_tensor(x), amp)


def project_phi(phi) -> torch.Tensor:
    return project_modulus(as_tensor(phi), 1.0)


def closed_form_v(x, mu1, rho, cfg_or_amp) -> torch.Tensor:
    """``v = sqrt(P/M) exp(j angle(rho x + mu1))``."""
    return project_x(rho * as_tensor(x) + as_tensor(mu1), cfg_or_amp)


def closed_form_varphi(phi, mu2, rho) -> torch.Tensor:
    """``varphi = exp(j angle(rho phi + mu2))``."""
    return project_phi(rho * as_tensor(phi) + as_tensor(mu2))


def dual_update_mu(x, v, phi, varphi, mu1, mu2, rho):
    return mu1 + rho * (x - v), mu2 + rho * (phi - varphi)


def lagrangian_value(task, f, primal, aux, mu, rho, g, beta, step=None, dual=None):
    """Augmented Lagrangian for one subproblem.

    ``f`` is the raw task objective (``f1`` or ``f2``) with batch shape
    ``S``; ``primal``/``aux``/``mu`` are the consensus pair and its dual
    (batch shape ``S`` followed by variable dims); ``g`` and ``beta`` are
    ``S + (K, L)``. ``dual`` is ``"alm"`` (linear ``sum beta g``) or
    ``"phr"`` (``sum step/2 max{g + beta/step, 0}^2``); ``g = None`` drops
    the constraint term.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    dual = dual or ("alm" if task == "detect" else "phr")
    nb = f.ndim
    obj = -f if task == "detect" else f
    r = primal - aux + mu / rho
    cons = 0.5 * rho * (r.abs() ** 2).flatten(nb).sum(-1)
    if g is None:
        return obj + cons
    if dual == "alm":
        pen = (beta * g).flatten(nb).sum(-1)
    elif dual == "phr":
        pen = (0.5 * step * torch.clamp(g + beta / step, min=0.0) ** 2).flatten(nb).sum(-1)
    else:
        raise ValueError(f"unknown dual scheme {dual!r}")
    return obj + cons + pen


def to_real(z: torch.Tensor, nb: int = 1) -> torch.Tensor:
    z = z.flatten(nb)
    return torch.cat([z.real, z.imag], dim=-1)


def from_real(r: torch.Tensor, shape) -> torch.Tensor:
    n = r.shape[-1] // 2
    return torch.complex(r[..., :n], r[..., n:]).reshape(shape)


def dfp_step(state: DfpState, grad: torch.Tensor, step_size, z: torch.Tensor) -> torch.Tensor:
    """``z - step B grad`` on real-composite vectors ``(..., n)``."""
    step = torch.as_tensor(step_size, dtype=z.dtype)
    return z - step * (state.Bmat @ grad[..., None])[..., 0]


def dfp_matrix_update(state: DfpState, y, delta_step, grad_norm, eps: float = 1e-30) -> DfpState:
    """Safeguarded DFP-type update.

    Keeps ``B`` when ``y'd / |d|^2 <= |grad|`` (or a denominator is below
    ``eps``), otherwise ``B - [B y y' B / (y'By) - (y'By)/(y'd)^2 d d']``.
    """
    B = state.Bmat
    By = (B @ y[..., None])[..., 0]
    yBy = (y * By).sum(-1)
    yd = (y * delta_step).sum(-1)
    dd = (delta_step * delta_step).sum(-1)
    skip = (dd <= eps) | (yBy.abs() < eps) | (yd**2 < eps)
    dd_s = torch.where(skip, torch.ones_like(dd), dd)
    skip = skip | (yd / dd_s <= grad_norm)
    skip = skip.detach()
    yBy_s = torch.where(skip, torch.ones_like(yBy), yBy)
    yd_s = torch.where(skip, torch.ones_like(yd), yd)
    Btil = By[..., :, None] * By[..., None, :] / yBy_s[..., None, None] - (yBy_s / yd_s**2)[
        ..., None, None
    ] * (delta_step[..., :, None] * delta_step[..., None, :])
    Bn = torch.where(skip[..., None, None], B, B - Btil)
    return DfpState(0.5 * (Bn + Bn.mT), y, delta_step)


# ---------------------------------------------------------------------------
# task objective and problem context


class TaskObjective:
    """Raw task objective ``f1`` (detect, maximized) or ``f2`` (estimate, minimized)."""

    def __init__(self, task: str, cfg: SceneConfig, alpha0=None):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.task, self.cfg, self.alpha0 = task, cfg, alpha0

    @property
    def sign(self) -> float:
        return -1.0 if self.task == "detect" else 1.0

    def value(self, x, phi, ch) -> torch.Tensor:
        if self.task == "detect":
            return f1_value(x, phi, ch, self.cfg)
        return f2_core(x, phi, ch, self.cfg, self.alpha0)

    def loss(self, x, phi, ch) -> torch.Tensor:
        """Minimized form: ``-f1`` or ``f2``."""
        return self.sign * self.value(x, phi, ch)

    def grad(self, x, phi, ch):
        x = as_tensor(x).detach().requires_grad_(True)
        phi = as_tensor(phi).detach().requires_grad_(True)
        return torch.autograd.grad(self.value(x, phi, ch).sum(), (x, phi))


@dataclass
class SolverOptions:
    """Switches that define the scheme being solved."""

    task: str = "detect"
    dual: str | None = None  # alm | phr; default alm for detect, phr for estimate
    rho: float = 1.0
    optimize_phi: bool = True
    constraints: bool = True
    carry_beta: bool = False
    alpha0: complex | None = None
    backoff: float = 0.0  # enforce g + backoff * g_ref <= 0
    init: str = "ci"  # ci | matched waveform warm start
    repair: bool = True  # post-solve feasibility repair of violating slots
    repair_steps: int = 300
    repair_restarts: int = 8
    seed: int = 0  # restarts of the repair

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.dual is None:
            self.dual = "alm" if self.task == "detect" else "phr"
        if self.dual not in ("alm", "phr"):
            raise ValueError(f"unknown dual scheme {self.dual!r}")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.init not in ("ci", "matched"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class Problem:
    """One batch of scenes bound to a scheme, with normalization references."""

    cfg: SceneConfig
    ch: Channels
    s: torch.Tensor  # (B, K, L) symbols
    opts: SolverOptions
    objective: TaskObjective
    f_ref: torch.Tensor = field(default=None)  # (B,)
    g_ref: torch.Tensor = field(default=None)  # (B,)

    @property
    def batch(self) -> int:
        return self.s.shape[0]

    def scaled_margin(self, g):
        return g / self.g_ref[:, None, None] + self.opts.backoff

    def evaluate(self, u, phi):
        """Raw objective and raw CI margins at normalized waveform ``u``."""
        x = self.cfg.amp * u
        f = self.objective.value(x, phi, self.ch)
        g = ci_margin(x, phi, self.s, self.ch, self.cfg).g
        return f, g


# hand-tuned desk constants per task: (T, J, R, eta = kappa, tau = zeta, decay)
DEFAULT_STEPS = {
    "detect": (30, 10, 1, 3.0, 0.12, 0.95),
    "estimate": (40, 10, 1, 20.0, 0.12, 0.95),
}


def default_schedule(task: str, KL: int, T: int | None = None) -> StepSchedule:
    """Hand-tuned constant-dual / decaying-DFP schedule for ``task``."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    T0, J, R, eta, tau, decay = DEFAULT_STEPS[task]
    return StepSchedule.hand_tuned(T0 if T is None else T, KL, J, R, eta, eta, tau, tau, decay)


def _batched(ch, s):
    ch = Channels.of(ch)
    s = as_tensor(s.s if isinstance(s, SymbolFrame) else s)
    if ch.h_bt.ndim == 1:
        ch = Channels(*(getattr(ch, k)[None] for k in ("G", "h_k", "h_rk", "h_bt", "h_rt", "h_bq", "h_rq")))
    if s.ndim == 2:
        s = s.expand(ch.h_bt.shape[0], *s.shape)
    return ch, s


def aligned_phases(ch) -> torch.Tensor:
    """RIS phases that co-phase every reflected BS-RIS-target term with the direct path."""
    ch = Channels.of(ch)
    w = ch.h_bt / ch.h_bt.abs().pow(2).sum(-1, keepdim=True).sqrt().clamp_min(1e-300)
    Gw = torch.einsum("...nm,...m->...n", ch.G, w)
    return project_phi((ch.h_rt.conj() * Gw).conj())


def matched_waveform(ch, phi, cfg: SceneConfig) -> torch.Tensor:
    """Per-slot conjugate of the transmit-side cascade row, projected to modulus ``sqrt(P/M)``."""
    b0 = build_cascade(ch, phi, cfg).b0
    x = b0.conj()[..., None, :].expand(*b0.shape[:-1], cfg.L, b0.shape[-1])
    return project_x(x, cfg)


def ci_waveform(ch, phi, s, cfg: SceneConfig, x=None, iters: int = 100, lift: float = 1.5) -> torch.Tensor:
    """Constructive warm start by alternating projections.

    Each pass moves ``x`` towards the least-squares solution of
    ``h_eff x[l] = max(|y|, lift sigma_k sqrt(Gamma_k)) s`` and projects
    back to modulus ``sqrt(P/M)``, so every sample is pulled onto its own
    symbol ray with at least ``lift`` times the CI apex distance.
    """
    H = effective_channels(ch, phi)
    Hp = torch.linalg.pinv(H)
    s = as_tensor(s)
    floor = torch.as_tensor(lift * np.sqrt(np.asarray(cfg.sigma2_k) * np.asarray(cfg.Gamma_k)))[:, None]
    x = project_x((Hp @ s).mT, cfg) if x is None else project_x(x, cfg)
    for _ in range(iters):
        y = H @ x.mT
        x = project_x(x + (Hp @ (torch.clamp(y.abs(), min=floor) * s - y)).mT, cfg)
    return x


def make_problem(cfg: SceneConfig, ch, frame, opts: SolverOptions, phi0=None, x0=None):
    """Bind a batch to a scheme and build the warm start ``(problem, state)``.

    ``phi0`` overrides the aligned RIS start (used for the random-RIS
    scheme); ``x0`` overrides the waveform start chosen by ``opts.init``.
    """
    ch, s = _batched(ch, frame)
    phi = aligned_phases(ch) if phi0 is None else project_phi(phi0)
    if phi.ndim == 1:
        phi = phi.expand(s.shape[0], -1)
    if x0 is not None:
        x = project_x(x0, cfg)
    elif opts.init == "ci" and opts.constraints:
        x = ci_waveform(ch, phi, s, cfg)
    else:
        x = matched_waveform(ch, phi, cfg)
    if x.ndim == 2:
        x = x.expand(s.shape[0], -1, -1)
    prob = Problem(cfg, ch, s, opts, TaskObjective(opts.task, cfg, opts.alpha0))
    u = x / cfg.amp
    # objective scale: RMS per-entry gradient at the warm start is one
    uu = u.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        (gu,) = torch.autograd.grad(prob.evaluate(uu, phi)[0].sum(), uu)
    with torch.no_grad():
        y_amp = torch.einsum(
            "bkm,blm->bkl", ch.h_k.conj() + torch.einsum("bkn,bnm->bkm", phi[:, None, :] * ch.h_rk.conj(), ch.G), x
        ).abs()
    prob.f_ref = (gu.abs().pow(2).flatten(1).mean(-1).sqrt()).clamp_min(1e-300)
    prob.g_ref = y_amp.mean(dim=(-2, -1)).clamp_min(1e-300)
    B, K, L = s.shape
    zeros_kl = torch.zeros(B, K, L, dtype=torch.float64)
    state = AdmmState(
        u=u.clone(),
        v=u.clone(),
        phi=phi.clone(),
        varphi=phi.clone(),
        mu1=torch.zeros_like(u),
        mu2=torch.zeros_like(phi),
        beta=zeros_kl,
        rho=opts.rho,
    )
    return prob, state


# ---------------------------------------------------------------------------
# solver


@dataclass
class UnfoldResult:
    x: torch.Tensor  # (B, L, M) raw waveform
    phi: torch.Tensor  # (B, N)
    state: AdmmState
    trace: list
    objective: torch.Tensor  # raw f at (x, phi)
    repaired: torch.Tensor | None = None  # (B, L) slots replaced by the repair


def _hinge_descent(prob: Problem, x, phi, steps: int, margin: float = 0.02, lr: float = 0.05):
    """Adam on ``sum max{g/g_ref + margin, 0}^2`` over unit-modulus ``u``."""
    cfg = prob.cfg
    u = (x / cfg.amp).detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([u], lr=lr)
    with torch.enable_grad():
        for _ in range(steps):
            g = ci_margin(cfg.amp * u, phi, prob.s, prob.ch, cfg).g / prob.g_ref[:, None, None]
            loss = torch.clamp(g + margin, min=0.0).pow(2).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                u.copy_(project_modulus(u, 1.0))
    return cfg.amp * u.detach()


def repair_feasibility(prob: Problem, x, phi, tol: float = 1e-6):
    """Replace slots whose CI margins exceed ``tol`` by a nearby feasible point.

    Violating slots first get a hinge-penalty descent from the solver
    output; slots still violating are rebuilt from :func:`ci_waveform` runs
    started at the current point and at seeded random phases. A slot is
    replaced only when the candidate lowers its worst margin, so satisfied
    slots are never touched. Returns ``(x, replaced_mask)``.
    """
    opts = prob.opts
    x = x.detach()
    phi = phi.detach()
    worst = lambda z: ci_margin(z, phi, prob.s, prob.ch, prob.cfg).g.amax(-2)  # (B, L)
    g = worst(x)
    bad0 = g > tol
    if not bool(bad0.any()):
        return x, bad0
    gen = torch.Generator().manual_seed(opts.seed)
    for attempt in range(opts.repair_restarts + 2):
        if attempt == 0:
            cand = _hinge_descent(prob, x, phi, opts.repair_steps)
        else:
            start = x
            if attempt > 1:
                start = torch.exp(2j * torch.pi * torch.rand(x.shape, generator=gen, dtype=torch.float64))
            cand = _hinge_descent(prob, ci_waveform(prob.ch, phi, prob.s, prob.cfg, x=start), phi, opts.repair_steps)
        gc = worst(cand)
        take = (g > tol) & (gc < g)
        x = torch.where(take[..., None], cand, x)
        g = torch.where(take, gc, g)
        if not bool((g > tol).any()):
            break
    return x, bad0


class _Phase:
    """Normalized Lagrangian of one ADMM block (``x`` or ``phi``)."""

    def __init__(self, prob: Problem, which: str):
        self.prob, self.which = prob, which

    def lagrangian(self, var, other, aux, mu, beta, step, rho):
        prob = self.prob
        u, phi = (var, other) if self.which == "x" else (other, var)
        f, g = prob.evaluate(u, phi)
        gn = prob.scaled_margin(g) if prob.opts.constraints else None
        Lval = lagrangian_value(
            prob.opts.task, f / prob.f_ref, var, aux, mu, rho, gn, beta, step, prob.opts.dual
        )
        return Lval, f, g

    def value_and_grad(self, var, other, aux, mu, beta, step, rho, create_graph):
        # differentiate w.r.t. a fresh node so that beta, computed from the same
        # iterate by the dual update, is held fixed (a partial derivative)
        if not create_graph or not var.requires_grad:
            var = var.detach().requires_grad_(True)
        else:
            var = var.view_as(var)
        with torch.enable_grad():
            Lval, f, g = self.lagrangian(var, other, aux, mu, beta, step, rho)
            (gr,) = torch.autograd.grad(Lval.sum(), var, create_graph=create_graph)
        if not create_graph:
            Lval, f, g, var = Lval.detach(), f.detach(), g.detach(), var.detach()
        return var, Lval, f, g, gr


def _row(tag, f, state: AdmmState, g, amp):
    with torch.no_grad():
        rx = amp * (state.u - state.v).abs().flatten(1).amax(-1)
        rp = (state.phi - state.varphi).abs().amax(-1)
        mv = g.flatten(1).amax(-1)
    return TraceRow(tag, f.detach().clone(), rx, rp, mv.detach().clone())


def _check_finite(Lval, trace, tag):
    if not bool(torch.isfinite(Lval.detach()).all()):
        raise SolverAbort(f"non-finite Lagrangian at layer {tag}", trace)


def _guarded(phase, trace, tag, *args):
    """``phase.value_and_grad`` with non-finite iterates reported as :class:`SolverAbort`."""
    if not bool(torch.isfinite(torch.view_as_real(args[0].detach())).all()):
        raise SolverAbort(f"non-finite iterate at layer {tag}", trace)
    try:
        return phase.value_and_grad(*args)
    except torch.linalg.LinAlgError as exc:
        raise SolverAbort(f"factorization failed at layer {tag}: {exc}", trace) from exc


def run_layer(prob: Problem, state: AdmmState, schedule: StepSchedule, t: int, trace=None, differentiable=False):
    """One outer ADMM iteration (0-based ``t``) using ``schedule`` rows ``t``."""
    trace = [] if trace is None else trace
    opts, cfg = prob.opts, prob.cfg
    K, L = prob.s.shape[-2:]
    rho = state.rho
    st = replace(state)

    for which, dual_steps, dfp_steps in (("x", schedule.eta, schedule.tau), ("phi", schedule.kappa, schedule.zeta)):
        if which == "x" or opts.optimize_phi:
            phase = _Phase(prob, which)
            if not opts.carry_beta:
                st.beta = torch.zeros_like(st.beta)
            for j in range(schedule.J):
                var = st.u if which == "x" else st.phi
                other = st.phi if which == "x" else st.u
                aux = st.v if which == "x" else st.varphi
                mu = st.mu1 if which == "x" else st.mu2
                step = dual_steps[t, j].reshape(K, L)
                # dual update at the current iterate
                if opts.constraints:
                    u_cur, phi_cur = (var, other) if which == "x" else (other, var)
                    with torch.set_grad_enabled(differentiable):
                        g = prob.scaled_margin(prob.evaluate(u_cur, phi_cur)[1])
                    update = alm_dual_update_x if opts.dual == "alm" else phr_dual_update
                    st.beta = update(st.beta, step, g)
                tag = (t + 1, which, j + 1, 0)
                var, Lval, f, graw, gr = _guarded(phase, trace, tag, var, other, aux, mu, st.beta, step, rho, differentiable)
                trace.append(_row(tag, f, _with(st, which, var), graw, cfg.amp))
                _check_finite(Lval, trace, tag)
                shape = var.shape
                z, gz = to_real(var), to_real(gr)
                dfp = DfpState.identity(z.shape[0], z.shape[-1])
                for r in range(schedule.R):
                    z_new = dfp_step(dfp, gz, dfp_steps[t, j, r], z)
                    var = project_modulus(from_real(z_new, shape), 1.0)
                    tag = (t + 1, which, j + 1, r + 1)
                    var, Lval, f, graw, gr = _guarded(phase, trace, tag, var, other, aux, mu, st.beta, step, rho, differentiable)
                    trace.append(_row(tag, f, _with(st, which, var), graw, cfg.amp))
                    _check_finite(Lval, trace, tag)
                    z_proj, gz_new = to_real(var), to_real(gr)
                    if r + 1 < schedule.R:
                        gnorm = gz.norm(dim=-1)
                        dfp = dfp_matrix_update(dfp, (gz_new - gz).detach(), (z_proj - z).detach(), gnorm.detach())
                    z, gz = z_proj, gz_new
                st = _with(st, which, var)
        # closed-form copy update; normalized coordinates so the modulus is 1
        if which == "x":
            st.v = closed_form_v(st.u, st.mu1, rho, 1.0)
            trace.append(_row((t + 1, "v", 0, 0), f, st, graw, cfg.amp))
        else:
            st.varphi = closed_form_varphi(st.phi, st.mu2, rho)
            trace.append(_row((t + 1, "varphi", 0, 0), f, st, graw, cfg.amp))
    st.mu1, st.mu2 = dual_update_mu(st.u, st.v, st.phi, st.varphi, st.mu1, st.mu2, rho)
    trace.append(_row((t + 1, "mu", 0, 0), f, st, graw, cfg.amp))
    return st, trace


def _with(st: AdmmState, which: str, var) -> AdmmState:
    return replace(st, u=var) if which == "x" else replace(st, phi=var)


def run_unfolded(
    cfg: SceneConfig,
    ch,
    frame,
    schedule: StepSchedule,
    opts: SolverOptions | None = None,
    phi0=None,
    x0=None,
    differentiable: bool = False,
) -> UnfoldResult:
    """Run all ``schedule.T`` outer iterations from the warm start."""
    opts = opts or SolverOptions()
    prob, state = make_problem(cfg, ch, frame, opts, phi0=phi0, x0=x0)
    return solve_from(prob, state, schedule, differentiable=differentiable)


def solve_from(prob: Problem, state: AdmmState, schedule: StepSchedule, start: int = 0, differentiable=False):
    K, L = prob.s.shape[-2:]
    if schedule.KL != K * L:
        raise ValueError(f"schedule has {schedule.KL} dual entries, scene needs {K * L}")
    trace: list = []
    if not differentiable:
        state = state.detach()
    for t in range(start, schedule.T):
        state, trace = run_layer(prob, state, schedule, t, trace, differentiable)
    x = prob.cfg.amp * state.u
    ctx = torch.enable_grad() if differentiable else torch.no_grad()
    with ctx:
        f = prob.objective.value(x, state.phi, prob.ch)
    if not bool(torch.isfinite(f.detach()).all()):
        raise SolverAbort("non-finite objective at solver output", trace)
    repaired = None
    if prob.opts.repair and prob.opts.constraints and not differentiable:
        x, repaired = repair_feasibility(prob, x, state.phi)
        if bool(repaired.any()):
            with torch.no_grad():
                f = prob.objective.value(x, state.phi, prob.ch)
    return UnfoldResult(x, state.phi, state, trace, f, repaired)
