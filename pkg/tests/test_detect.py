import csv

import numpy as np
import pytest
import torch

from _helpers import dense_covariance, dense_f1, random_point, rel_err
from risslp.cascade import build_cascade
from risslp.detect import (
    ROC_COLUMNS,
    chi2_2_cdf,
    chi2_2_ppf,
    detection_probability,
    detection_report,
    f1_grad,
    f1_value,
    filter_variances,
    mvdr_filter,
    output_sinr,
    roc_curve,
    write_roc_csv,
)
from risslp.scene import SceneConfig


@pytest.fixture
def cfg():
    return SceneConfig.desk()


def no_clutter(cfg):
    return cfg.replace(Q=0, theta_q=(), d_q=(), xi2_q=(), theta_q_ris=(), dist_bs_clutter=(), dist_ris_clutter=())


def test_mvdr_is_matched_filter_without_clutter(cfg):
    c = no_clutter(cfg)
    ch, x, phi, _ = random_point(c, 0)
    ops = build_cascade(ch, phi, c)
    a = ops.apply_target(x).reshape(-1)
    w = mvdr_filter(ops, x, c)
    assert rel_err(w, a / (a.abs() ** 2).sum()) <= 1e-12


def test_mvdr_beats_random_filters(cfg):
    small = cfg.replace(M=3, L=4)
    ch, x, phi, _ = random_point(small, 1)
    ops = build_cascade(ch, phi, small)
    best = float(output_sinr(mvdr_filter(ops, x, small), ops, x, small))
    rng = np.random.default_rng(1)
    n = small.M * small.L
    W = torch.as_tensor(rng.standard_normal((1000, n)) + 1j * rng.standard_normal((1000, n)))
    assert float(output_sinr(W, ops, x, small).max()) <= best * (1 + 1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_mvdr_distortionless_and_sinr_identity(cfg, seed):
    ch, x, phi, _ = random_point(cfg, seed)
    ops = build_cascade(ch, phi, cfg)
    w = mvdr_filter(ops, x, cfg)
    a = ops.apply_target(x).reshape(-1)
    assert abs(complex((w.conj() * a).sum()) - 1) <= 1e-10
    sinr = float(output_sinr(w, ops, x, cfg))
    assert sinr == pytest.approx(cfg.xi2_0 * float(f1_value(x, phi, ch, cfg)), rel=1e-9)


def test_filter_variances_oracle(cfg):
    ch, x, phi, _ = random_point(cfg, 3)
    ops = build_cascade(ch, phi, cfg)
    rng = np.random.default_rng(3)
    w = rng.standard_normal(cfg.M * cfg.L) + 1j * rng.standard_normal(cfg.M * cfg.L)
    eps0, eps1 = filter_variances(torch.as_tensor(w), ops, x, cfg)
    C = dense_covariance(cfg, ch, phi.numpy(), x.numpy())
    a = ops.apply_target(x).reshape(-1).numpy()
    assert float(eps0) == pytest.approx(float(np.real(w.conj() @ C @ w)), rel=1e-12)
    assert float(eps1 - eps0) == pytest.approx(cfg.xi2_0 * abs(w.conj() @ a) ** 2, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_f1_dense_inverse_oracle(cfg, seed):
    ch, x, phi, _ = random_point(cfg, seed)
    assert float(f1_value(x, phi, ch, cfg)) == pytest.approx(dense_f1(cfg, ch, phi.numpy(), x.numpy()), rel=1e-10)


def test_f1_batched(cfg):
    pts = [random_point(cfg, s) for s in range(3)]
    x = torch.stack([p[1] for p in pts])
    phi = torch.stack([p[2] for p in pts])
    f = f1_value(x, phi, [p[0] for p in pts], cfg)
    for i, (ch, xi, ph, _) in enumerate(pts):
        assert float(f[i]) == pytest.approx(float(f1_value(xi, ph, ch, cfg)), rel=1e-12)


def test_f1_phase_invariance(cfg):
    # a common phase on x changes neither the target return power nor C
    ch, x, phi, _ = random_point(cfg, 4)
    assert float(f1_value(x * np.exp(0.4j), phi, ch, cfg)) == pytest.approx(float(f1_value(x, phi, ch, cfg)), rel=1e-12)


def test_f1_gradient_finite_difference(cfg):
    ch, x, phi, _ = random_point(cfg, 5)
    gx, gphi = f1_grad(x, phi, ch, cfg)
    f = lambda xx, pp: float(f1_value(xx, pp, ch, cfg))
    h = 1e-6 * cfg.amp
    for l, m in ((0, 0), (3, 2), (7, 3)):
        for unit, part in ((1.0, "real"), (1j, "imag")):
            e = torch.zeros_like(x)
            e[l, m] = h * unit
            fd = (f(x + e, phi) - f(x - e, phi)) / (2 * h)
            an = float(getattr(gx[l, m], part))
            assert abs(fd - an) <= 1e-5 * max(abs(an), float(gx.abs().max()) * 1e-2)
    for n in (0, 9):
        for unit, part in ((1.0, "real"), (1j, "imag")):
            e = torch.zeros_like(phi)
            e[n] = 1e-6 * unit
            fd = (f(x, phi + e) - f(x, phi - e)) / 2e-6
            an = float(getattr(gphi[n], part))
            assert abs(fd - an) <= 1e-5 * max(abs(an), float(gphi.abs().max()) * 1e-2)


def test_f1_secant_directional_derivative(cfg):
    ch, x, phi, _ = random_point(cfg, 6)
    gx, _ = f1_grad(x, phi, ch, cfg)
    rng = np.random.default_rng(6)
    d = torch.as_tensor(rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))
    # packed d/dRe + j d/dIm: the directional derivative is Re{conj(g) . d}
    an = float((gx.conj() * d).sum().real)
    t = 1e-6 * cfg.amp
    fd = (float(f1_value(x + t * d, phi, ch, cfg)) - float(f1_value(x - t * d, phi, ch, cfg))) / (2 * t)
    assert fd == pytest.approx(an, rel=1e-6)


def test_f1_phi_gradient_zero_without_ris(cfg):
    ch, x, phi, _ = random_point(cfg, 7)
    ch.G[:] = 0
    _, gphi = f1_grad(x, phi, ch, cfg)
    assert float(gphi.abs().max()) == 0.0


def test_chi2_functions():
    t = np.array([0.0, 0.5, 2.0, 10.0])
    np.testing.assert_allclose(chi2_2_cdf(t), 1 - np.exp(-t / 2), rtol=1e-15)
    np.testing.assert_allclose(chi2_2_ppf(chi2_2_cdf(t[1:])), t[1:], rtol=1e-12)
    assert chi2_2_ppf(0.0) == 0.0
    with pytest.raises(ValueError):
        chi2_2_cdf(-1.0)
    with pytest.raises(ValueError):
        chi2_2_ppf(1.0)


def test_detection_probability_limits():
    for pfa in (1e-3, 1e-2, 0.3):
        assert float(detection_probability(2.0, 2.0, pfa)) == pytest.approx(pfa, rel=1e-12)
        assert float(detection_probability(1.0, 1e12, pfa)) == pytest.approx(1.0, abs=1e-9)
    pd = detection_probability(1.0, np.array([1.0, 2.0, 5.0, 50.0]), 1e-2)
    assert np.all(np.diff(pd) > 0)
    with pytest.raises(ValueError):
        detection_probability(2.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        detection_probability(1.0, 2.0, 1.0)


@pytest.mark.parametrize("pfa", [1e-2, 1e-1])
def test_detection_probability_monte_carlo(pfa):
    # r_o = w^H r is CN(0, eps) under each hypothesis; detect |r_o|^2 > eps0 F^{-1}(1 - Pfa) / 2
    eps0, eps1 = 1.5, 7.0
    rng = np.random.default_rng(0)
    n = 100_000
    thr = eps0 * chi2_2_ppf(1 - pfa) / 2
    cn = lambda v: np.sqrt(v / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    assert np.mean(np.abs(cn(eps0)) ** 2 > thr) == pytest.approx(pfa, abs=0.01)
    assert np.mean(np.abs(cn(eps1)) ** 2 > thr) == pytest.approx(float(detection_probability(eps0, eps1, pfa)), abs=0.01)


def test_detection_report(cfg):
    ch, x, phi, _ = random_point(cfg, 8)
    rep = detection_report(x, phi, ch, cfg, pfa=1e-2)
    assert rep.sinr == pytest.approx(rep.eps1 / rep.eps0 - 1)
    assert rep.sinr == pytest.approx(cfg.xi2_0 * float(f1_value(x, phi, ch, cfg)), rel=1e-9)
    assert rep.pd == pytest.approx(float(detection_probability(rep.eps0, rep.eps1, 1e-2)))
    assert rep.delta_thr == pytest.approx(rep.eps0 * chi2_2_ppf(0.99))


def test_roc_curve_and_csv(tmp_path):
    grid = [1e-3, 1e-2, 1e-1]
    roc = roc_curve(1.0, 4.0, grid)
    assert [p for p, _ in roc] == grid
    pds = [d for _, d in roc]
    assert pds == sorted(pds)
    assert all(p <= d <= 1 for p, d in roc)
    with pytest.raises(ValueError):
        roc_curve(1.0, 4.0, [0.0, 0.5])
    path = tmp_path / "roc.csv"
    write_roc_csv(path, [(p, d, "proposed_ris", 0) for p, d in roc])
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == ROC_COLUMNS and len(rows) == 4

