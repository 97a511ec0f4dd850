"""Acceptance suite: ten end-to-end properties of the library, each checked at
a fixed tolerance.  Every test prints one ``CRITERION n PASS|FAIL`` line with
the measured numbers before asserting."""

import time

import numpy as np
import pytest

from locolab.cli import main
from locolab.edit import Mask, disentanglement_score, find_edit_directions
from locolab.harness import (DEFAULT_T_GRID, calibrate_linearity, linearity_trials,
                             rank_ratio_curve, subspace_distance)
from locolab.molrg import (SubspaceModel, forward_noise, localized_model, log_density,
                           random_model, sample_x0, score)
from locolab.pmp import (JacobianOperator, linearization_error, posterior_mean,
                         posterior_mean_via_tweedie)
from locolab.sampler import roundtrip_error
from locolab.spectral import LinearMap, gpm_topk, numerical_rank, principal_angles


@pytest.fixture
def report(capsys):
    def emit(n, passed, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if passed else 'FAIL'}: {detail}")
    return emit


def test_criterion_01_rank_bound(report, monkeypatch):
    monkeypatch.setenv("LOCO_THREADS", "1")
    model = random_model(32, [2, 2], seed=0)
    start = time.perf_counter()
    table = rank_ratio_curve(model, DEFAULT_T_GRID, 0.99, 50, np.random.default_rng(1))
    elapsed = time.perf_counter() - start
    worst = int(table.column("rank_max").max())
    violations = int(np.sum(table.column("rank_max") > 4))
    passed = violations == 0 and elapsed <= 60.0
    report(1, passed, f"max eta-rank {worst} (bound 4), {violations} violating grid points, "
                      f"{elapsed:.2f}s")
    assert passed


def test_criterion_02_linearity_scaling(report):
    model = random_model(32, [2, 2], seed=0)
    lams = [1.0, 5.0, 10.0, 40.0]
    c_hat = calibrate_linearity(model, lams, np.random.default_rng(21))
    ratios = linearity_trials(model, [0.6, 0.7, 0.8, 0.9], lams, 200, np.random.default_rng(22))
    frac = float(np.mean(np.all(ratios <= c_hat, axis=(1, 2))))

    single = random_model(8, [3], seed=1)
    rng = np.random.default_rng(23)
    worst_single = 0.0
    for t in (0.1, 0.5, 0.9):
        for _ in range(5):
            x = forward_noise(single, sample_x0(single, rng).x0, t, rng)
            dx = rng.standard_normal(8)
            dx /= np.linalg.norm(dx)
            worst_single = max(worst_single, linearization_error(single, x, t, dx, 1e3))
    passed = frac >= 0.99 and worst_single <= 1e-10
    report(2, passed, f"C={c_hat:.4g}, {100 * frac:.1f}% of 200 trials within bound; "
                      f"K=1 residual at lambda=1e3: {worst_single:.2e}")
    assert passed


def test_criterion_03_symmetry(report):
    model = random_model(32, [2, 2], seed=0)
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(100):
        t = float(rng.uniform(0.01, 0.99))
        x = forward_noise(model, sample_x0(model, rng).x0, t, rng)
        J = JacobianOperator(model, x, t).matrix()
        worst = max(worst, np.linalg.norm(J - J.T) / np.linalg.norm(J))
    passed = worst <= 1e-12
    report(3, passed, f"max relative asymmetry {worst:.2e} over 100 draws")
    assert passed


def _mean_distance(model, t, n, rng):
    total = 0.0
    for _ in range(n):
        x = forward_noise(model, sample_x0(model, rng).x0, t, rng)
        total += subspace_distance(model, x, t)
    return total / n


def test_criterion_04_subspace_convergence(report):
    rows, ok = [], True
    for seed in range(1, 6):
        model = random_model(32, [2, 2], seed=seed)
        d_mid = _mean_distance(model, 0.5, 15, np.random.default_rng(100 + seed))
        d_late = _mean_distance(model, 0.95, 15, np.random.default_rng(200 + seed))
        rows.append(f"{d_late:.2e}/{d_mid:.2e}")
        ok &= d_late <= 0.2 * d_mid
    single = random_model(32, [4], seed=0)
    rng = np.random.default_rng(41)
    worst_single = max(_mean_distance(single, t, 5, rng) for t in DEFAULT_T_GRID)
    passed = ok and worst_single <= 1e-10
    report(4, passed, f"distance t=0.95 / t=0.5 per model: {', '.join(rows)}; "
                      f"K=1 max distance {worst_single:.2e}")
    assert passed


def test_criterion_05_tweedie_and_score(report):
    rng = np.random.default_rng(51)
    worst_tweedie, worst_score = 0.0, 0.0
    h = 1e-5
    for seed in range(10):
        model = random_model(6, [2, 1, 2][: 2 + seed % 2], seed=seed)
        for t in (0.1, 0.4, 0.7, 0.95):
            x = 2.0 * rng.standard_normal(6)
            f = posterior_mean(model, x, t)
            g = posterior_mean_via_tweedie(model, x, t)
            worst_tweedie = max(worst_tweedie, np.linalg.norm(f - g) / np.linalg.norm(f))
            fd = np.array([(log_density(model, x + h * e, t) - log_density(model, x - h * e, t))
                           / (2 * h) for e in np.eye(6)])
            s = score(model, x, t)
            worst_score = max(worst_score, np.linalg.norm(s - fd) / np.linalg.norm(s))
    passed = worst_tweedie <= 1e-10 and worst_score <= 1e-5
    report(5, passed, f"Tweedie relative gap {worst_tweedie:.2e}; score vs finite-difference "
                      f"{worst_score:.2e}")
    assert passed


def _gapped_matrix(rng, d=32, k=5, gap=1.1):
    """Low-rank signal plus Gaussian noise, redrawn until sigma_k / sigma_{k+1} >= gap."""
    while True:
        U, _ = np.linalg.qr(rng.standard_normal((d, k)))
        V, _ = np.linalg.qr(rng.standard_normal((d, k)))
        A = U @ np.diag(rng.uniform(2.0, 6.0, k)) @ V.T + rng.standard_normal((d, d)) / np.sqrt(d)
        s = np.linalg.svd(A, compute_uv=False)
        if s[k - 1] / s[k] >= gap:
            return A


def test_criterion_06_gpm(report):
    rng = np.random.default_rng(61)
    mats = [_gapped_matrix(rng) for _ in range(50)]
    start = time.perf_counter()
    worst_sigma, worst_angle = 0.0, 0.0
    for A in mats:
        res = gpm_topk(LinearMap.from_matrix(A), 5, rng=rng)
        U, s, Vt = np.linalg.svd(A)
        worst_sigma = max(worst_sigma, float(np.max(np.abs(res.sigma - s[:5]) / s[:5])))
        worst_angle = max(worst_angle, float(principal_angles(res.V, Vt[:5].T).max()),
                          float(principal_angles(res.U, U[:, :5]).max()))
    elapsed = time.perf_counter() - start
    passed = worst_sigma <= 1e-6 and worst_angle <= 1e-4 and elapsed <= 10.0
    report(6, passed, f"sigma relative error {worst_sigma:.2e}, max angle {worst_angle:.2e} rad, "
                      f"{elapsed:.2f}s for 50 matrices")
    assert passed


def test_criterion_07_ddim_roundtrip(report):
    model = random_model(8, [2, 2], seed=0)
    rng = np.random.default_rng(71)
    x0s = [sample_x0(model, rng).x0 for _ in range(20)]
    e100 = np.array([roundtrip_error(model, x0, 0.6, 100) for x0 in x0s])
    e200 = np.array([roundtrip_error(model, x0, 0.6, 200) for x0 in x0s])
    halving = float(e200.mean() / e100.mean())

    single = SubspaceModel((np.eye(8)[:, :3],))
    x1 = single.bases[0] @ rng.standard_normal(3)
    e_single = max(roundtrip_error(single, x1, 0.6, n) for n in (10, 100, 200))

    ok_level = e200.max() <= 1e-3
    ok_order = 0.375 <= halving <= 0.625
    ok_single = e_single <= 1e-10
    passed = ok_level and ok_order and ok_single
    report(7, passed, f"N=200 error max {e200.max():.2e} (limit 1e-3, {'ok' if ok_level else 'miss'}); "
                      f"e(200)/e(100) = {halving:.3f} ({'ok' if ok_order else 'miss'}); "
                      f"K=1 roundtrip {e_single:.2e} (limit 1e-10, "
                      f"{'ok' if ok_single else 'miss'})")
    assert passed


def test_criterion_08_edit_disentanglement(report):
    t = 0.6
    axis = SubspaceModel((np.eye(4)[:, :2],))
    x = np.array([0.3, -1.0, 0.5, 2.0])
    d = find_edit_directions(axis, x, t, Mask([0], 4))
    _, outside_single = disentanglement_score(axis, x, t, d, 1.0)

    omega = Mask(range(8), 16)
    wins, ratios = 0, []
    rng = np.random.default_rng(81)
    for trial in range(100):
        model = localized_model(16, [2, 2], [range(0, 8), range(8, 16)], seed=trial)
        xt = forward_noise(model, sample_x0(model, rng).x0, t, rng)
        proj = find_edit_directions(model, xt, t, omega)
        raw = find_edit_directions(model, xt, t, omega, project=False)
        inside_p, outside_p = disentanglement_score(model, xt, t, proj, 1.0)
        _, outside_raw = disentanglement_score(model, xt, t, raw, 1.0)
        wins += outside_p < outside_raw
        ratios.append(inside_p / outside_p if outside_p > 0 else np.inf)
    median = float(np.median(ratios))
    passed = outside_single == 0.0 and wins >= 90 and median >= 10.0
    report(8, passed, f"K=1 outside change {outside_single}; projected wins {wins}/100; "
                      f"inside/outside median {median:.2f} (limit 10, "
                      f"{100 * np.mean(np.array(ratios) >= 10):.0f}% of trials reach it)")
    assert passed


def test_criterion_09_numerical_rank(report):
    got = (numerical_rank(np.ones(100), 0.99),
           numerical_rank(np.array([5.0, 0.0, 0.0]), 0.99),
           numerical_rank(np.array([10.0, 1.0, 0.1, 0.01]), 0.99))
    passed = got == (99, 1, 1)
    report(9, passed, f"ranks {got}, expected (99, 1, 1)")
    assert passed


def test_criterion_10_determinism(report, tmp_path):
    codes = [main(["theorem1", "--seed", "5", "--out-dir", str(tmp_path / name)])
             for name in ("a", "b")]
    a = (tmp_path / "a" / "theorem1.csv").read_bytes()
    b = (tmp_path / "b" / "theorem1.csv").read_bytes()
    passed = codes == [0, 0] and a == b
    report(10, passed, f"exit codes {codes}; outputs {'identical' if a == b else 'differ'} "
                       f"({len(a)} bytes)")
    assert passed
