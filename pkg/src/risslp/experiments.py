"""Experiment orchestration: sweeps, schemes, baselines and CSV emitters.

An experiment spec is a ``key = value`` text file::

    experiment = sinr_vs_power
    grid = 10, 20, 30          # sweep values, see SWEEP_UNITS
    schemes = proposed_ris, random_ris
    seeds = 0-4
    preset = desk
    T = 30                     # optional, task default otherwise
    sigma2_k = -55 dBm         # any other key overrides the scene config

Every (scheme, sweep point, seed) gives one :class:`ResultRow`. Metric
values depend only on (spec, seed); wall times do not.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .cascade import Channels
from .detect import detection_probability, detection_report
from .estimate import DegenerateGeometryError, crb_report
from .scene import ChannelSet, SceneConfig, draw_symbols, parse_config, synth_channels
from .slp_comm import ci_margin, simulate_ser
from .unfold import SolverAbort, SolverOptions, StepSchedule, default_schedule, run_unfolded

EXPERIMENTS = (
    "sinr_vs_power",
    "sinr_vs_N",
    "sinr_vs_gamma",
    "roc",
    "crb_vs_power",
    "crb_vs_gamma",
    "ser_vs_gamma",
    "timing",
)
SCHEMES = ("proposed_ris", "random_ris", "no_ris", "radar_only")
SWEEP_UNITS = {
    "sinr_vs_power": "P_dBW",
    "sinr_vs_N": "N",
    "sinr_vs_gamma": "gamma_dB",
    "roc": "pfa",
    "crb_vs_power": "P_dBW",
    "crb_vs_gamma": "gamma_dB",
    "ser_vs_gamma": "gamma_dB",
    "timing": "N",
}
RESULT_COLUMNS = ("experiment", "scheme", "sweep", "metric", "seed", "wall_time", "status")
TIMING_COLUMNS = ("scheme", "N", "mean_time", "std_time", "repetitions")

_SPEC_KEYS = {"experiment", "grid", "schemes", "seeds", "preset", "T", "trials", "repetitions", "weights", "workers", "transfer"}


def task_of(experiment: str) -> str:
    return "estimate" if experiment.startswith("crb") else "detect"


@dataclass
class ExperimentSpec:
    experiment: str
    grid: tuple
    schemes: tuple = ("proposed_ris",)
    seeds: tuple = (0,)
    preset: str = "desk"
    T: int | None = None
    trials: int = 100_000  # Monte-Carlo symbols per SER estimate
    repetitions: int = 3  # timing only
    weights: str | None = None
    transfer: bool = False  # allow weights trained with another user count
    workers: int = 1
    overrides: str = ""  # scene config lines

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        self.grid = tuple(float(v) for v in self.grid)
        self.schemes = tuple(self.schemes)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.grid:
            raise ValueError("sweep grid is empty")
        if not self.schemes:
            raise ValueError("no schemes selected")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ValueError(f"unknown schemes {bad}")
        if not self.seeds:
            raise ValueError("no seeds selected")
        if self.preset not in ("desk", "paper"):
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.experiment == "timing" and self.repetitions < 3:
            raise ValueError("timing needs at least 3 repetitions")

    def base_config(self) -> SceneConfig:
        base = SceneConfig.desk() if self.preset == "desk" else SceneConfig.paper()
        return parse_config(self.overrides, base) if self.overrides.strip() else base


def _parse_seeds(value: str) -> tuple:
    seeds = []
    for part in (p.strip() for p in value.split(",")):
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return tuple(seeds)


def parse_spec(text: str) -> ExperimentSpec:
    items, scene_lines = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _SPEC_KEYS:
            items[key] = value
        else:
            scene_lines.append(f"{key} = {value}")
    if "experiment" not in items or "grid" not in items:
        raise ValueError("spec needs 'experiment' and 'grid'")
    kw = dict(
        experiment=items["experiment"],
        grid=[float(v) for v in items["grid"].split(",") if v.strip()],
        overrides="\n".join(scene_lines),
    )
    if "schemes" in items:
        kw["schemes"] = [s.strip() for s in items["schemes"].split(",") if s.strip()]
    if "seeds" in items:
        kw["seeds"] = _parse_seeds(items["seeds"])
    for key in ("preset", "weights"):
        if key in items:
            kw[key] = items[key]
    for key in ("T", "trials", "repetitions", "workers"):
        if key in items:
            kw[key] = int(items[key])
    if "transfer" in items:
        flag = items["transfer"].lower()
        if flag not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"transfer must be a boolean, got {items['transfer']!r}")
        kw["transfer"] = flag in ("true", "1", "yes")
    return ExperimentSpec(**kw)


def load_spec(path) -> ExperimentSpec:
    with open(path) as fh:
        return parse_spec(fh.read())


@dataclass
class ResultRow:
    experiment: str
    scheme: str
    sweep: float
    metric: float
    seed: int
    wall_time: float
    status: str = "ok"

    def cells(self) -> tuple:
        metric = repr(float(self.metric)) if self.status == "ok" else ""
        return (self.experiment, self.scheme, repr(float(self.sweep)), metric, self.seed, f"{self.wall_time:.6f}", self.status)


def write_results_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        w.writerows(r.cells() for r in rows)


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# instances and schemes


@dataclass
class Instance:
    ch: ChannelSet
    frame: np.ndarray  # (K, L) symbols
    phi_random: np.ndarray  # (N,) unit modulus


def make_instance(cfg: SceneConfig, seed: int) -> Instance:
    """Channels, symbols and a random RIS draw from independent streams of ``seed``."""
    c, s, r = np.random.SeedSequence(seed).spawn(3)
    ch = synth_channels(cfg, np.random.default_rng(c))
    frame = draw_symbols(cfg, np.random.default_rng(s)).s
    phi = np.exp(2j * math.pi * np.random.default_rng(r).random(cfg.N))
    return Instance(ch, frame, phi)


def baseline_no_ris(ch: ChannelSet) -> ChannelSet:
    """Remove the RIS: every link through it is set to zero."""
    zero = {k: np.zeros_like(getattr(ch, k)) for k in ("G", "h_rk", "h_rt", "h_rq")}
    return dataclasses.replace(ch, **zero)


def scheme_setup(scheme: str, task: str, inst: Instance):
    """``(channels, solver options, phi0)`` for one scheme."""
    if scheme == "proposed_ris":
        return inst.ch, SolverOptions(task=task), None
    if scheme == "random_ris":
        return inst.ch, SolverOptions(task=task, optimize_phi=False), inst.phi_random
    if scheme == "no_ris":
        return baseline_no_ris(inst.ch), SolverOptions(task=task, optimize_phi=False), None
    if scheme == "radar_only":
        return inst.ch, SolverOptions(task=task, constraints=False), None
    raise ValueError(f"unknown scheme {scheme!r}")


def config_at(spec: ExperimentSpec, base: SceneConfig, value: float) -> SceneConfig:
    unit = SWEEP_UNITS[spec.experiment]
    if unit == "P_dBW":
        return base.replace(P=10.0 ** (value / 10.0))
    if unit == "gamma_dB":
        return base.replace(Gamma_k=10.0 ** (value / 10.0))
    if unit == "N":
        if value != int(value) or value < 1:
            raise ValueError(f"N sweep needs positive integers, got {value}")
        return base.replace(N=int(value))
    return base


def schedule_for(spec: ExperimentSpec, cfg: SceneConfig, task: str) -> StepSchedule:
    if spec.weights:
        from .learn import load_weights, produce_schedule

        params = load_weights(spec.weights)
        if params.task != task:
            raise ValueError(f"weights were trained for {params.task!r}, experiment needs {task!r}")
        with torch.no_grad():
            sched = produce_schedule(params).detach()
        if sched.KL != cfg.K * cfg.L:
            if not spec.transfer:
                raise ValueError("weights do not match the scene's K*L (set transfer = true to reuse them)")
            sched = transfer_schedule(sched, cfg.K * cfg.L)
        return sched
    return default_schedule(task, cfg.K * cfg.L, spec.T)


def transfer_schedule(sched: StepSchedule, KL: int) -> StepSchedule:
    """Reuse a schedule trained for another ``K * L``: every new constraint gets the per-layer mean dual step."""
    widen = lambda s: s.mean(-1, keepdim=True).expand(*s.shape[:2], KL).clone()
    return StepSchedule(widen(sched.eta), widen(sched.kappa), sched.tau, sched.zeta)


def solve_instance(cfg: SceneConfig, inst: Instance, scheme: str, task: str, schedule: StepSchedule):
    ch, opts, phi0 = scheme_setup(scheme, task, inst)
    res = run_unfolded(cfg, ch, inst.frame, schedule, opts, phi0=phi0)
    return ch, res.x[0], res.phi[0], res


# ---------------------------------------------------------------------------
# metrics


def _metric_rows(spec: ExperimentSpec, cfg: SceneConfig, scheme: str, value: float, seed: int) -> list[ResultRow]:
    """Rows of one (scheme, sweep point, seed) job; ROC emits one row per Pfa."""
    task = task_of(spec.experiment)
    inst = make_instance(cfg, seed)
    t0 = time.perf_counter()
    sweep_values = spec.grid if spec.experiment == "roc" else (value,)
    try:
        ch, x, phi, res = solve_instance(cfg, inst, scheme, task, schedule_for(spec, cfg, task))
        if spec.experiment == "roc":
            rep = detection_report(x, phi, ch, cfg)
            metrics = [float(detection_probability(rep.eps0, rep.eps1, p)) for p in spec.grid]
        elif task == "estimate":
            metrics = [crb_report(x, phi, ch, cfg).crb_theta]
        elif spec.experiment == "ser_vs_gamma":
            per_slot = max(1, math.ceil(spec.trials / (cfg.K * cfg.L)))
            metrics = [simulate_ser(x, phi, inst.frame, ch, cfg, per_slot, rng=seed)[1]]
        else:
            metrics = [10.0 * math.log10(detection_report(x, phi, ch, cfg).sinr)]
        status = "ok"
        if not all(math.isfinite(m) for m in metrics):
            status, metrics = "failed: non-finite metric", [math.nan] * len(sweep_values)
    except (SolverAbort, DegenerateGeometryError, torch.linalg.LinAlgError) as exc:
        status, metrics = f"failed: {type(exc).__name__}: {exc}".replace("\n", " "), [math.nan] * len(sweep_values)
    wall = time.perf_counter() - t0
    return [ResultRow(spec.experiment, scheme, v, m, seed, wall, status) for v, m in zip(sweep_values, metrics)]


def _jobs(spec: ExperimentSpec):
    base = spec.base_config()
    points = (spec.grid[0],) if spec.experiment == "roc" else spec.grid
    reps = spec.repetitions if spec.experiment == "timing" else 1
    for scheme in spec.schemes:
        for value in points:
            cfg = config_at(spec, base, value)
            for seed in spec.seeds:
                for _ in range(reps):
                    yield spec, cfg, scheme, value, seed


def _run_job(job):
    return _metric_rows(*job)


def run_experiment(spec: ExperimentSpec) -> list[ResultRow]:
    """All rows of ``spec`` in (scheme, sweep, seed) order; failures become rows with a status."""
    jobs = list(_jobs(spec))
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            chunks = list(pool.map(_run_job, jobs))
    else:
        chunks = [_run_job(j) for j in jobs]
    return [row for chunk in chunks for row in chunk]


@dataclass
class TimingCell:
    scheme: str
    N: int
    times: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.times))

    @property
    def std(self) -> float:
        return float(np.std(self.times, ddof=1)) if len(self.times) > 1 else 0.0


def timing_report(rows) -> list[TimingCell]:
    """Mean and standard deviation of wall time per (scheme, N) over every repetition and seed."""
    cells: dict = {}
    for r in rows:
        if r.status != "ok":
            continue
        key = (r.scheme, int(r.sweep))
        cells.setdefault(key, TimingCell(*key)).times.append(r.wall_time)
    return list(cells.values())


def write_timing_csv(path, cells):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_COLUMNS)
        for c in cells:
            w.writerow((c.scheme, c.N, f"{c.mean:.6f}", f"{c.std:.6f}", len(c.times)))


def feasibility(x, phi, frame, ch, cfg: SceneConfig, tol: float = 1e-6) -> float:
    """Fraction of CI margins with ``g <= tol``."""
    return float((ci_margin(x, phi, frame, Channels.of(ch), cfg).g <= tol).double().mean())
