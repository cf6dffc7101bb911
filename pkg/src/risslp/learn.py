"""Learned step-size producers and layer-by-layer training of the unfolded solver.

Every scalar of the schedule (each ``eta``/``kappa`` entry per ``(t, j, k,
l)`` and each ``tau``/``zeta`` entry per ``(t, j, r)``) is emitted by its own
single-hidden-layer perceptron (10 tanh units, Xavier-uniform weights, zero
biases). The producers of one family are stored as stacked tensors so a
whole schedule is one batched evaluation. Outputs pass through
``s_max * sigmoid(.)``; with fresh weights the hidden pre-activations are
small and every step sits near ``s_max / 2``.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .scene import SceneConfig
from .unfold import (
    AdmmState,
    Problem,
    SolverAbort,
    SolverOptions,
    StepSchedule,
    make_problem,
    run_layer,
    solve_from,
)

FAMILIES = ("eta", "kappa", "tau", "zeta")
N_IN = 3  # [1, layer fraction, mean violation]
HIDDEN = 10
MAGIC = b"RISSLP-W\n"
FORMAT_VERSION = 1


class ProducerBank(torch.nn.Module):
    """``count`` independent MLPs ``R^3 -> R^10 -> R``, evaluated together."""

    def __init__(self, count: int, s_max: float, hidden: int = HIDDEN, generator=None):
        super().__init__()
        self.count, self.s_max, self.hidden = count, float(s_max), hidden
        b1 = math.sqrt(6.0 / (N_IN + hidden))
        b2 = math.sqrt(6.0 / (hidden + 1))
        u = lambda shape, b: (torch.rand(shape, dtype=torch.float64, generator=generator) * 2 - 1) * b
        self.W1 = torch.nn.Parameter(u((count, hidden, N_IN), b1))
        self.b1 = torch.nn.Parameter(torch.zeros(count, hidden, dtype=torch.float64))
        self.W2 = torch.nn.Parameter(u((count, hidden), b2))
        self.b2 = torch.nn.Parameter(torch.zeros(count, dtype=torch.float64))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(torch.einsum("chi,ci->ch", self.W1, feats) + self.b1)
        # clamp keeps sigmoid away from exact 0 in float64 for extreme weights
        return self.s_max * torch.sigmoid(((self.W2 * h).sum(-1) + self.b2).clamp(-700.0, 700.0))


@dataclass
class ScheduleShape:
    T: int
    J: int
    R: int
    KL: int

    def sizes(self) -> dict:
        return {
            "eta": (self.T, self.J, self.KL),
            "kappa": (self.T, self.J, self.KL),
            "tau": (self.T, self.J, self.R),
            "zeta": (self.T, self.J, self.R),
        }


class LearnableParams(torch.nn.Module):
    """Producer networks for the full step-size set of one task."""

    def __init__(self, shape: ScheduleShape, s_max: dict, seed: int = 0, task: str = "detect"):
        super().__init__()
        self.shape, self.task = shape, task
        self.s_max = {k: float(s_max[k]) for k in FAMILIES}
        gen = torch.Generator().manual_seed(seed)
        self.banks = torch.nn.ModuleDict(
            {k: ProducerBank(int(np.prod(v)), self.s_max[k], generator=gen) for k, v in shape.sizes().items()}
        )

    @classmethod
    def around(cls, schedule: StepSchedule, seed: int = 0, task: str = "detect") -> "LearnableParams":
        """Producers whose fresh output is centred on a constant hand-tuned schedule."""
        s_max = {k: 2.0 * float(getattr(schedule, k).mean()) for k in FAMILIES}
        return cls(ScheduleShape(schedule.T, schedule.J, schedule.R, schedule.KL), s_max, seed, task)

    def features(self, family: str, violation: float = 0.0) -> torch.Tensor:
        dims = self.shape.sizes()[family]
        T = dims[0]
        t = torch.arange(T, dtype=torch.float64) / max(T - 1, 1)
        per_t = int(np.prod(dims[1:]))
        frac = t.repeat_interleave(per_t)
        ones = torch.ones_like(frac)
        return torch.stack([ones, frac, violation * ones], dim=-1)

    def layer_slice(self, family: str, t: int) -> slice:
        per_t = int(np.prod(self.shape.sizes()[family][1:]))
        return slice(t * per_t, (t + 1) * per_t)


def produce_schedule(params: LearnableParams, context: dict | None = None) -> StepSchedule:
    """Evaluate every producer; ``context`` may carry ``violation`` (off by default)."""
    violation = float((context or {}).get("violation", 0.0))
    out = {}
    for k, dims in params.shape.sizes().items():
        out[k] = params.banks[k](params.features(k, violation)).reshape(dims)
    return StepSchedule(out["eta"], out["kappa"], out["tau"], out["zeta"])


# ---------------------------------------------------------------------------
# losses


def batch_problem(cfg: SceneConfig, dataset, frames, opts: SolverOptions, phi0=None):
    return make_problem(cfg, list(dataset), frames, opts, phi0=phi0)


def loss(cfg: SceneConfig, dataset, frames, schedule: StepSchedule, opts: SolverOptions, phi0=None, differentiable=False):
    """Mean task loss at the unfolded output: ``-f1`` (detect) or ``f2`` (estimate).

    The post-solve feasibility repair is switched off; the loss scores the
    unrolled iterations themselves.
    """
    prob, state = batch_problem(cfg, dataset, frames, replace(opts, repair=False), phi0)
    res = solve_from(prob, state, schedule, differentiable=differentiable)
    return (prob.objective.sign * res.objective).mean()


@dataclass
class TrainOptions:
    steps: int = 6  # optimizer steps per stage
    lr: float = 1.0
    lr_decay: float = 0.5
    decay_every: int = 3
    grad: str = "reverse"  # reverse | spsa
    spsa_probes: int = 8
    spsa_c: float = 1e-2
    patience: int = 3  # consecutive undone steps before a stage is abandoned
    seed: int = 0


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (stage, step, loss)
    rollbacks: list = field(default_factory=list)  # stages rolled back
    stage_losses: list = field(default_factory=list)  # per stage: list of losses
    full_loss: tuple = ()  # full-depth loss (untrained, layer-wise trained, selected)
    reverted: list = field(default_factory=list)  # layers reset by the final selection

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("stage", "step", "loss"))
            for r in self.rows:
                w.writerow((r[0], r[1], repr(float(r[2]))))


def _layer_params(params: LearnableParams, t: int):
    """Views of the producer tensors used by layer ``t`` (for SGD and rollback)."""
    views = []
    for k in FAMILIES:
        bank = params.banks[k]
        sl = params.layer_slice(k, t)
        for p in (bank.W1, bank.b1, bank.W2, bank.b2):
            views.append((p, sl))
    return views


def _snapshot(views):
    return [p.detach()[sl].clone() for p, sl in views]


def _restore(views, snap):
    with torch.no_grad():
        for (p, sl), s in zip(views, snap):
            p[sl] = s


def _stage_loss(prob: Problem, state: AdmmState, schedule: StepSchedule, t: int, f_norm, differentiable: bool):
    st, _ = run_layer(prob, state, schedule, t, None, differentiable)
    with torch.set_grad_enabled(differentiable):
        f = prob.objective.value(prob.cfg.amp * st.u, st.phi, prob.ch)
    raw = (prob.objective.sign * f).mean()
    norm = (prob.objective.sign * f / f_norm).mean()
    return raw, norm, st


def grad_of_loss_wrt_weights(params: LearnableParams, prob, state, t, f_norm, mode="reverse", probes=8, c=1e-2, gen=None):
    """Gradient of the normalized stage-``t`` loss w.r.t. layer-``t`` producer weights.

    ``mode="reverse"`` differentiates through the unrolled layer;
    ``mode="spsa"`` averages ``probes`` simultaneous-perturbation estimates.
    Returns ``(raw_loss, grads)`` with ``grads`` aligned to ``_layer_params``.
    """
    views = _layer_params(params, t)
    if mode == "reverse":
        params.zero_grad(set_to_none=True)
        raw, norm, _ = _stage_loss(prob, state, produce_schedule(params), t, f_norm, True)
        if not torch.isfinite(norm):
            raise SolverAbort(f"non-finite stage loss at layer {t + 1}", [])
        norm.backward()
        grads = []
        for p, sl in views:
            g = p.grad[sl].clone() if p.grad is not None else torch.zeros_like(p.detach()[sl])
            grads.append(g)
        if not all(bool(torch.isfinite(g).all()) for g in grads):
            raise SolverAbort(f"non-finite weight gradient at layer {t + 1}", [])
        return float(raw.detach()), grads
    if mode != "spsa":
        raise ValueError(f"unknown gradient mode {mode!r}")
    base = _snapshot(views)
    gen = gen or torch.Generator().manual_seed(0)
    acc = [torch.zeros_like(b) for b in base]
    with torch.no_grad():
        raw, _, _ = _stage_loss(prob, state, produce_schedule(params), t, f_norm, False)
        for _ in range(probes):
            delta = [torch.randint(0, 2, b.shape, generator=gen).to(b.dtype) * 2 - 1 for b in base]
            _restore(views, [b + c * d for b, d in zip(base, delta)])
            lp = _stage_loss(prob, state, produce_schedule(params), t, f_norm, False)[1]
            _restore(views, [b - c * d for b, d in zip(base, delta)])
            lm = _stage_loss(prob, state, produce_schedule(params), t, f_norm, False)[1]
            scale = (lp - lm) / (2 * c)
            for a, d in zip(acc, delta):
                a += scale * d  # Rademacher: 1/d == d
        _restore(views, base)
    return float(raw), [a / probes for a in acc]


def _sgd_stage(views, evaluate, opts: TrainOptions, hist: TrainHistory, stage: int) -> list:
    """Plain SGD with step decay on the tensor slices ``views``.

    ``evaluate()`` returns ``(loss, grads)`` at the current weights. A step
    that raises the loss is undone and the learning rate is multiplied by
    ``lr_decay`` (the rate also decays every ``decay_every`` steps);
    ``patience`` consecutive undone steps end the stage early and are
    recorded as a rollback. Returns the losses of the accepted iterates,
    which are non-increasing.
    """
    lr = opts.lr
    raw, grads = evaluate()
    if not math.isfinite(raw):
        raise SolverAbort(f"non-finite loss in stage {stage}", [])
    hist.rows.append((stage, 0, raw))
    losses = [raw]
    snap, rejected = _snapshot(views), 0
    for step in range(1, opts.steps + 1):
        if step % opts.decay_every == 0:
            lr *= opts.lr_decay
        with torch.no_grad():
            for (p, sl), g in zip(views, grads):
                p[sl] -= lr * g
        trial, trial_grads = evaluate()
        if not math.isfinite(trial):
            raise SolverAbort(f"non-finite loss in stage {stage}", [])
        hist.rows.append((stage, step, trial))
        if trial <= raw:
            raw, grads, snap, rejected = trial, trial_grads, _snapshot(views), 0
            losses.append(raw)
            continue
        _restore(views, snap)
        lr *= opts.lr_decay
        rejected += 1
        if rejected >= opts.patience:
            hist.rollbacks.append(stage)
            break
    _restore(views, snap)
    return losses


def train_layerwise(cfg: SceneConfig, dataset, frames, params: LearnableParams, opts: TrainOptions, solver: SolverOptions, phi0=None):
    """Train layer ``t`` with layers ``< t`` frozen and the unroll truncated at ``t``.

    Per-sample states after the frozen prefix are cached, so stage ``t``
    only runs layer ``t``. Steps that raise the stage loss are undone (see
    :func:`_sgd_stage`), so no stage ends above its starting loss.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    solver = replace(solver, repair=False)
    prob, state = batch_problem(cfg, dataset, frames, solver, phi0)
    with torch.no_grad():
        f_norm = prob.objective.value(cfg.amp * state.u, state.phi, prob.ch).abs()
    state0 = state
    initial = [_snapshot(_layer_params(params, t)) for t in range(params.shape.T)]
    hist = TrainHistory()
    gen = torch.Generator().manual_seed(opts.seed)
    for t in range(params.shape.T):
        views = _layer_params(params, t)
        evaluate = lambda: grad_of_loss_wrt_weights(
            params, prob, state, t, f_norm, opts.grad, opts.spsa_probes, opts.spsa_c, gen
        )
        losses = _sgd_stage(views, evaluate, opts, hist, t + 1)
        hist.stage_losses.append(losses)
        with torch.no_grad():
            state, _ = run_layer(prob, state, produce_schedule(params).detach(), t)
    params.zero_grad(set_to_none=True)
    _select_layers(params, prob, state0, initial, hist)
    return params, hist


def _full_loss(params: LearnableParams, prob: Problem, state: AdmmState) -> float:
    with torch.no_grad():
        res = solve_from(prob, state, produce_schedule(params).detach())
    return float((prob.objective.sign * res.objective).mean())


def _select_layers(params: LearnableParams, prob, state0, initial, hist: TrainHistory):
    """Greedy stages optimize the loss at their own depth only. If the full
    unroll ends worse than with the starting weights, layers are reset to
    their starting weights from the last one down while that helps."""
    trained = [_snapshot(_layer_params(params, t)) for t in range(params.shape.T)]
    for t in range(params.shape.T):
        _restore(_layer_params(params, t), initial[t])
    base = _full_loss(params, prob, state0)
    for t in range(params.shape.T):
        _restore(_layer_params(params, t), trained[t])
    best = lw = _full_loss(params, prob, state0)
    for t in reversed(range(params.shape.T)):
        if best <= base:
            break
        _restore(_layer_params(params, t), initial[t])
        trial = _full_loss(params, prob, state0)
        if trial < best:
            best = trial
            hist.reverted.append(t + 1)
        else:
            _restore(_layer_params(params, t), trained[t])
    if best > base:
        for t in range(params.shape.T):
            _restore(_layer_params(params, t), initial[t])
        hist.reverted = list(range(params.shape.T, 0, -1))
        best = base
    hist.full_loss = (base, lw, best)


# ---------------------------------------------------------------------------
# persistence


def save_weights(path, params: LearnableParams):
    header = {
        "version": FORMAT_VERSION,
        "task": params.task,
        "T": params.shape.T,
        "J": params.shape.J,
        "R": params.shape.R,
        "KL": params.shape.KL,
        "hidden": HIDDEN,
        "inputs": N_IN,
        "s_max": params.s_max,
    }
    flat = torch.cat([p.detach().reshape(-1) for p in params.parameters()]).numpy().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_weights(path) -> LearnableParams:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a weights file")
        header = json.loads(fh.readline().decode())
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported weights version {header.get('version')}")
        (n,) = struct.unpack("<Q", fh.read(8))
        flat = np.frombuffer(fh.read(8 * n), dtype="<f8")
    if flat.size != n:
        raise ValueError(f"{path}: truncated payload")
    shape = ScheduleShape(header["T"], header["J"], header["R"], header["KL"])
    params = LearnableParams(shape, header["s_max"], task=header["task"])
    offset = 0
    with torch.no_grad():
        for p in params.parameters():
            k = p.numel()
            p.copy_(torch.from_numpy(flat[offset : offset + k].copy()).reshape(p.shape))
            offset += k
    if offset != n:
        raise ValueError(f"{path}: payload size mismatch")
    return params
