"""Acceptance criteria at desk scale on seeds 100-119 (disjoint from the tuning seeds 0-19).

Each test records one PASS/FAIL line through the ``report`` fixture; the
lines are printed in the terminal summary.
"""

import csv
import math
import time

import numpy as np
import pytest
import torch

from _helpers import fd_fim, flat_fd, random_point, tiny_setup
from risslp import cli
from risslp import experiments as X
from risslp.cascade import Channels, build_cascade
from risslp.detect import chi2_2_ppf, detection_probability, detection_report, f1_value, filter_variances, mvdr_filter, output_sinr
from risslp.estimate import crb_report, f2_value, fim_blocks
from risslp.learn import LearnableParams, TrainOptions, grad_of_loss_wrt_weights, loss, produce_schedule, train_layerwise
from risslp.scene import SceneConfig, draw_symbols, synth_dataset
from risslp.slp_comm import ci_margin, ci_margin_grad, simulate_ser
from risslp.unfold import (
    SolverOptions,
    closed_form_v,
    closed_form_varphi,
    default_schedule,
    lagrangian_value,
    make_problem,
    run_layer,
    solve_from,
)

pytestmark = pytest.mark.acceptance

SEEDS = tuple(range(100, 120))
SER_SYMBOLS = 100_000


def _instances(cfg, seeds):
    insts = [X.make_instance(cfg, s) for s in seeds]
    return [i.ch for i in insts], np.stack([i.frame for i in insts]), np.stack([i.phi_random for i in insts])


def _solve(cfg, chs, frames, opts, T=None, phi0=None):
    prob, st = make_problem(cfg, chs, frames, opts, phi0=phi0)
    return solve_from(prob, st, default_schedule(opts.task, cfg.K * cfg.L, T))


def _ser(cfg, res, chs, frames, b, seed):
    per_slot = math.ceil(SER_SYMBOLS / (cfg.K * cfg.L))
    return simulate_ser(res.x[b], res.phi[b], frames[b], chs[b], cfg, per_slot, rng=seed)[1]


@pytest.fixture(scope="module")
def cfg():
    return SceneConfig.desk()


@pytest.fixture(scope="module")
def desk(cfg):
    return _instances(cfg, SEEDS)


@pytest.fixture(scope="module")
def detect_proposed(cfg, desk):
    chs, frames, _ = desk
    return _solve(cfg, chs, frames, SolverOptions(task="detect"), T=30)


# ---------------------------------------------------------------------------
# 1. MVDR correctness


def test_c1_mvdr(cfg, report):
    t0 = time.perf_counter()
    beaten, worst = 0, 0.0
    for seed in SEEDS:
        ch, x, phi, _ = random_point(cfg, seed)
        ops = build_cascade(ch, phi, cfg)
        w_star = mvdr_filter(ops, x, cfg)
        best = float(output_sinr(w_star, ops, x, cfg))
        rng = np.random.default_rng(seed)
        n = cfg.M * cfg.L
        W = torch.as_tensor(rng.standard_normal((1000, n)) + 1j * rng.standard_normal((1000, n)))
        beaten += int((output_sinr(W, ops, x, cfg) > best).sum())
        worst = max(worst, abs(best - cfg.xi2_0 * float(f1_value(x, phi, ch, cfg))) / best)
    elapsed = time.perf_counter() - t0
    ok = beaten == 0 and worst <= 1e-9 and elapsed <= 10.0
    report(1, ok, f"{beaten} random filters beat MVDR, max rel err vs xi0^2 f1 {worst:.1e}, {elapsed:.2f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2. detection law


def test_c2_detection_law(cfg, detect_proposed, desk, report):
    chs, _, _ = desk
    x, phi, ch = detect_proposed.x[0], detect_proposed.phi[0], chs[0]
    ops = build_cascade(ch, phi, cfg)
    w = mvdr_filter(ops, x, cfg).numpy()
    eps0, eps1 = (float(v) for v in filter_variances(torch.as_tensor(w), ops, x, cfg))
    a = ops.apply_target(x).reshape(-1).numpy()
    U = ops.apply_clutter(x).reshape(cfg.Q, -1).numpy()
    rng = np.random.default_rng(2)
    trials = 100_000
    cn = lambda *s: (rng.standard_normal(s) + 1j * rng.standard_normal(s)) / math.sqrt(2.0)
    # received snapshots from the signal model: Rayleigh target and clutter amplitudes plus white noise
    clutter = (cn(trials, cfg.Q) * np.sqrt(cfg.xi2_q)) @ U + math.sqrt(cfg.xi2_z) * cn(trials, a.size)
    r1 = clutter + math.sqrt(cfg.xi2_0) * cn(trials, 1) * a
    stat0 = 2.0 * np.abs(clutter @ w.conj()) ** 2 / eps0
    stat1 = 2.0 * np.abs(r1 @ w.conj()) ** 2 / eps0
    errs = []
    for pfa in (1e-2, 1e-1):
        thr = float(chi2_2_ppf(1.0 - pfa))
        errs.append(abs(float(np.mean(stat1 > thr)) - float(detection_probability(eps0, eps1, pfa))))
        errs.append(abs(float(np.mean(stat0 > thr)) - pfa))
    ok = max(errs) <= 0.01
    report(2, ok, f"max |Pd_closed - Pd_MC| = {max(errs[0::2]):.4f}, max |Pfa_MC - Pfa| = {max(errs[1::2]):.4f}")
    assert ok


# ---------------------------------------------------------------------------
# 3. FIM oracle


def test_c3_fim(cfg, report):
    worst, sym, psd = 0.0, 0.0, math.inf
    for seed in SEEDS[:10]:
        ch, x, phi, _ = random_point(cfg, seed)
        F = fim_blocks(x, phi, ch, cfg).full()
        F_fd = fd_fim(cfg, seed, x, phi)
        # the Re/Im alpha cross entries are identically zero and the differences carry
        # ~1e-10 max|F| absolute error there, so their scale is floored
        scale = np.maximum(np.abs(F_fd), 1e-8 * np.abs(F_fd).max())
        worst = max(worst, float(np.max(np.abs(F.numpy() - F_fd) / scale)))
        sym = max(sym, float((F - F.mT).abs().max() / F.abs().max()))
        psd = min(psd, float(torch.linalg.eigvalsh(F).min() / F.abs().max()))
    ok = worst <= 1e-4 and sym <= 1e-12 and psd >= -1e-12
    report(3, ok, f"max entrywise rel err {worst:.1e}, asymmetry {sym:.1e}, min eig / max entry {psd:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. gradient suite


def _fd_gradient(fun, z, h):
    """Packed ``d/dRe + j d/dIm`` of a real scalar function by central differences."""
    out = torch.zeros_like(z)
    flat = out.view(-1)
    for i in range(z.numel()):
        for unit in (1.0, 1j):
            e = torch.zeros_like(z)
            e.view(-1)[i] = h * unit
            d = (float(fun(z + e)) - float(fun(z - e))) / (2 * h)
            flat[i] += d * unit
    return out


def _autograd(fun, z):
    z = z.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fun(z), z)
    return g


def test_c4_gradients(cfg, report):
    errs = {}
    KL = (cfg.K, cfg.L)
    for seed in SEEDS[:3]:
        ch, x, phi, frame = random_point(cfg, seed)
        rng = np.random.default_rng(seed)
        cn = lambda *s: torch.as_tensor(rng.standard_normal(s) + 1j * rng.standard_normal(s))
        v, mu1 = cfg.amp * torch.exp(1j * torch.as_tensor(rng.random(x.shape) * 6.3)), cn(*x.shape)
        beta = torch.as_tensor(rng.random(KL))
        eta = 20.0
        # cube-root-of-epsilon steps: the Lagrangians carry an O(100) consensus term
        # that does not depend on phi, so smaller steps drown in cancellation
        hx, hp = 1e-5 * cfg.amp, 1e-5
        funcs = {
            "f1": (lambda xx, pp: f1_value(xx, pp, ch, cfg), 1e-5),
            "f2": (lambda xx, pp: f2_value(xx, pp, ch, cfg), 1e-4),
            "L1": (
                lambda xx, pp: lagrangian_value("detect", f1_value(xx, pp, ch, cfg), xx, v, mu1, 1.0, ci_margin(xx, pp, frame, ch, cfg).g, beta),
                1e-5,
            ),
            "L2": (
                lambda xx, pp: lagrangian_value(
                    "estimate", f2_value(xx, pp, ch, cfg), xx, v, mu1, 1.0, ci_margin(xx, pp, frame, ch, cfg).g, beta, step=eta
                ),
                1e-4,
            ),
        }
        for name, (fun, tol) in funcs.items():
            for var, wrt in (("x", x), ("phi", phi)):
                f = (lambda z: fun(z, phi)) if var == "x" else (lambda z: fun(x, z))
                an = _autograd(f, wrt)
                fd = _fd_gradient(f, wrt, hx if var == "x" else hp)
                e = float((an - fd).norm() / fd.norm())
                errs[name] = max(errs.get(name, 0.0), e / tol)
        # the CI margins, analytic Jacobian against differences of every g[k, l]
        gx, gphi = ci_margin_grad(x, phi, frame, ch, cfg)
        margins = lambda xx, pp: ci_margin(xx, pp, frame, ch, cfg).g
        for k in range(cfg.K):
            for l in range(cfg.L):
                fd_x = _fd_gradient(lambda z: margins(z, phi)[k, l], x, hx)
                fd_p = _fd_gradient(lambda z: margins(x, z)[k, l], phi, hp)
                an_x = torch.zeros_like(x)
                an_x[l] = gx[k, l]
                e = max(float((an_x - fd_x).norm() / fd_x.norm()), float((gphi[k, l] - fd_p).norm() / fd_p.norm()))
                errs["g"] = max(errs.get("g", 0.0), e / 1e-5)
    ok = all(r <= 1.0 for r in errs.values())
    report(4, ok, "error / tolerance: " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert ok


# ---------------------------------------------------------------------------
# 5. ADMM consensus


def test_c5_consensus(cfg, detect_proposed, report):
    st = detect_proposed.state
    rx = (st.u - st.v).abs().flatten(1).amax(-1) * cfg.amp
    rp = (st.phi - st.varphi).abs().amax(-1)
    hit = int(((rx <= 1e-3 * cfg.amp) & (rp <= 1e-3)).sum())
    ok = hit >= 16
    report(5, ok, f"{hit}/20 seeds reach both residual targets (max |x-v| {float(rx.max()):.1e}, max |phi-varphi| {float(rp.max()):.1e})")
    assert ok


# ---------------------------------------------------------------------------
# 6. feasibility


def test_c6_feasibility(cfg, desk, detect_proposed, report):
    chs, frames, _ = desk
    res = detect_proposed
    g = ci_margin(res.x, res.phi, torch.as_tensor(frames), Channels.of(chs), cfg).g
    frac = (g <= 1e-6).double().flatten(1).mean(-1)
    ser = [_ser(cfg, res, chs, frames, b, SEEDS[b]) for b in range(len(SEEDS))]
    ok = float(frac.min()) >= 0.99 and max(ser) <= 1e-2
    report(6, ok, f"min feasible fraction {float(frac.min()):.3f} (pooled {float(frac.mean()):.4f}), max SER {max(ser):.1e} over 1e5 symbols each")
    assert ok


# ---------------------------------------------------------------------------
# 7. RIS gain


def test_c7_ris_gain(cfg, desk, detect_proposed, report):
    chs, frames, phis = desk
    rand = _solve(cfg, chs, frames, SolverOptions(task="detect", optimize_phi=False), T=30, phi0=torch.as_tensor(phis))
    assert torch.allclose(rand.phi, torch.as_tensor(phis))
    sinr = lambda res, b: 10 * math.log10(detection_report(res.x[b], res.phi[b], chs[b], cfg).sinr)
    gain = [sinr(detect_proposed, b) - sinr(rand, b) for b in range(len(SEEDS))]
    med = float(np.median(gain))
    ok = med >= 3.0
    report(7, ok, f"median optimized-vs-random RIS SINR gain {med:.2f} dB (min {min(gain):.2f}, max {max(gain):.2f})")
    assert ok


# ---------------------------------------------------------------------------
# 8. closed-form optimality


def test_c8_closed_forms(cfg, report):
    grid = torch.linspace(0, 2 * math.pi, 10_000, dtype=torch.float64)
    worst = -math.inf
    for seed in SEEDS[:10]:
        rng = np.random.default_rng(seed)
        cn = lambda n: torch.as_tensor(rng.standard_normal(n) + 1j * rng.standard_normal(n))
        rho = float(rng.uniform(0.1, 5.0))
        x, mu1 = cn(cfg.M) * cfg.amp, cn(cfg.M) * rho
        phi, mu2 = torch.exp(1j * torch.as_tensor(rng.random(cfg.N) * 2 * math.pi)), cn(cfg.N)
        for target, mu, amp, sol in (
            (x, mu1, cfg.amp, closed_form_v(x, mu1, rho, cfg.amp)),
            (phi, mu2, 1.0, closed_form_varphi(phi, mu2, rho)),
        ):
            obj = lambda z: (target[:, None] - z + mu[:, None] / rho).abs() ** 2
            brute = obj(amp * torch.exp(1j * grid)[None, :]).amin(-1)
            worst = max(worst, float((obj(sol[:, None])[:, 0] - brute).max()))
    ok = worst <= 1e-6
    report(8, ok, f"max objective gap (closed form - grid best) {worst:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 9. PHR vs plain ALM


def test_c9_phr_vs_alm(cfg, desk, report):
    chs, frames, _ = desk
    crb = {}
    for dual in ("phr", "alm"):
        res = _solve(cfg, chs, frames, SolverOptions(task="estimate", dual=dual))
        crb[dual] = [crb_report(res.x[b], res.phi[b], chs[b], cfg).crb_theta for b in range(len(SEEDS))]
    med = {k: float(np.median(v)) for k, v in crb.items()}
    wins = sum(p <= a for p, a in zip(crb["phr"], crb["alm"]))
    ok = med["phr"] <= med["alm"]
    report(9, ok, f"median CRB PHR {med['phr']:.4e} vs ALM {med['alm']:.4e}; PHR not worse on {wins}/20 seeds")
    assert ok


# ---------------------------------------------------------------------------
# 10. trade-off monotonicity


def test_c10_tradeoff(cfg, report):
    seeds = SEEDS[:10]
    ser, crb = [], []
    for gamma_db in (6.0, 10.0, 14.0):
        c = cfg.replace(Gamma_k=10.0 ** (gamma_db / 10.0))
        chs, frames, _ = _instances(c, seeds)
        det = _solve(c, chs, frames, SolverOptions(task="detect"))
        ser.append(float(np.median([_ser(c, det, chs, frames, b, seeds[b]) for b in range(len(seeds))])))
        est = _solve(c, chs, frames, SolverOptions(task="estimate"))
        crb.append(float(np.median([crb_report(est.x[b], est.phi[b], chs[b], c).crb_theta for b in range(len(seeds))])))
    ok = ser[0] >= ser[1] >= ser[2] and crb[0] <= crb[1] <= crb[2]
    report(10, ok, "Gamma 6/10/14 dB: median SER " + "/".join(f"{v:.1e}" for v in ser) + ", median CRB " + "/".join(f"{v:.4e}" for v in crb))
    assert ok


# ---------------------------------------------------------------------------
# 11. training sanity


def _train(cfg, task, T=3):
    ds = synth_dataset(cfg, 50, 100)
    rng = np.random.default_rng(101)
    frames = np.stack([draw_symbols(cfg, rng).s for _ in range(50)])
    params = LearnableParams.around(default_schedule(task, cfg.K * cfg.L, T), seed=0, task=task)
    opts = SolverOptions(task=task)
    with torch.no_grad():
        before = float(loss(cfg, ds, frames, produce_schedule(params).detach(), opts))
    params, _ = train_layerwise(cfg, ds, frames, params, TrainOptions(steps=4), opts)
    with torch.no_grad():
        after = float(loss(cfg, ds, frames, produce_schedule(params).detach(), opts))
    return before, after


def test_c11_training(cfg, report):
    parts, ok = [], True
    for task in ("detect", "estimate"):
        before, after = _train(cfg, task)
        ok &= after <= before
        parts.append(f"{task} loss {before:.5g} -> {after:.5g}")
    for task in ("detect", "estimate"):
        params, prob, state, f_norm = tiny_setup(task)
        with torch.no_grad():
            active = bool((run_layer(prob, state, produce_schedule(params), 0)[0].beta > 0).any())
        _, grads = grad_of_loss_wrt_weights(params, prob, state, 0, f_norm)
        an = torch.cat([g.reshape(-1) for g in grads])
        fd = flat_fd(params, prob, state, f_norm)
        err = float((an - fd).norm() / fd.norm())
        ok &= active and err <= 1e-3
        parts.append(f"tiny {task} unroll grad rel err {err:.1e}")
    report(11, ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------------------
# 12. determinism


EXPERIMENT_SPECS = {
    "sinr_vs_power": "grid = 20\nschemes = proposed_ris, random_ris, no_ris, radar_only",
    "sinr_vs_N": "grid = 8, 16",
    "sinr_vs_gamma": "grid = 10",
    "roc": "grid = 0.01, 0.1",
    "crb_vs_power": "grid = 20",
    "crb_vs_gamma": "grid = 10",
    "ser_vs_gamma": "grid = 10\ntrials = 1600",
    "timing": "grid = 16\nrepetitions = 3",
}


def _metric_columns(path):
    with open(path) as fh:
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in csv.DictReader(fh)]


def test_c12_determinism(tmp_path, report):
    assert set(EXPERIMENT_SPECS) == set(X.EXPERIMENTS)
    differing, rows = [], 0
    for name, body in EXPERIMENT_SPECS.items():
        spec = tmp_path / f"{name}.spec"
        spec.write_text(f"experiment = {name}\n{body}\nseeds = 100\nT = 2\n")
        runs = []
        for i in range(2):
            out = tmp_path / f"{name}_{i}.csv"
            assert cli.main(["experiment", str(spec), "--out", str(out)]) == 0
            runs.append(_metric_columns(out))
        rows += len(runs[0])
        if runs[0] != runs[1] or not runs[0]:
            differing.append(name)
    ok = not differing
    report(12, ok, f"{len(EXPERIMENT_SPECS)} experiments, {rows} rows, differing: {differing or 'none'}")
    assert ok
