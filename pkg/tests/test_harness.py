import math

import numpy as np
import pytest

from hmmix.estimators import g_of_delta, global_rate, worst_case_norm_sq
from hmmix.harness import (C_CANDIDATES, Cell, ExperimentSpec, RiskReport, calibrate_C,
                           calibrated_C, cell_config, choose_C, concentration_check,
                           fit_loglog_slope, frozen_calibration, mc_risk, run_trial, summarize,
                           sweep, TrialResult)
from hmmix.model import DomainError, ModelConfig


def spec(**kw):
    base = dict(n=[64], d=[2], delta=[0.1], theta_norm_sq=[0.5], estimators=["vanilla_spectral"],
                trials=3, master_seed=11)
    base.update(kw)
    return ExperimentSpec(**base)


def test_trial_noiseless_known_oracle():
    cfg = ModelConfig(d=2, n=32, delta=0.0, theta=[2.0, 0.0], noise="zero")
    res = run_trial(cfg, "known_oracle", 1.0, 0, 5)
    assert res.ok and res.ell_used == 32
    assert math.isclose(res.sq_loss, (2 - math.sqrt(3)) ** 2, rel_tol=1e-10)


def test_trial_zero_theta_and_clamp():
    cfg = ModelConfig(d=2, n=32, delta=0.3, theta=[0.0, 0.0], noise="zero")
    for variant in ("known_oracle", "lepski_refined", "vanilla_spectral"):
        assert run_trial(cfg, variant, 1.0, 4, 5).sq_loss == 0.0


def test_trial_deterministic():
    cfg = ModelConfig.from_norm(3, 200, 0.1, 0.4, seed=1)
    a = run_trial(cfg, "lepski_global", 1.0, 17, 99)
    b = run_trial(cfg, "lepski_global", 1.0, 17, 99)
    assert a == b and np.float64(a.sq_loss).tobytes() == np.float64(b.sq_loss).tobytes()
    assert run_trial(cfg, "lepski_global", 1.0, 18, 99) != a


def test_trial_failure_recorded(monkeypatch):
    import hmmix.estimators as est

    def boom(*args, **kwargs):
        raise RuntimeError("no convergence")
    monkeypatch.setattr(est, "estimate", boom)
    res = run_trial(ModelConfig(d=1, n=4, delta=0.1, theta=[1.0]), "vanilla_spectral", 1.0, 0, 0)
    assert not res.ok and math.isnan(res.sq_loss)


def test_summary_invalid_above_failure_budget():
    cell = Cell(64, 2, 0.1, 0.5, "vanilla_spectral")
    good = [TrialResult(0.1, 64, True)] * 19
    rep = summarize(cell, good + [TrialResult(math.nan, -1, False)])
    assert rep.valid and rep.failures == 1 and rep.mean_sq_loss == 0.1
    rep = summarize(cell, good[:18] + [TrialResult(math.nan, -1, False)] * 2)
    assert not rep.valid


def test_single_trial_report():
    s = spec(trials=1)
    rep = mc_risk(s, s.cells()[0])
    res = run_trial(cell_config(rep.cell, 11), "vanilla_spectral", s.C, 0, 11, 0.5)
    assert rep.mean_sq_loss == res.sq_loss == rep.q50 == rep.q95
    assert rep.stderr == 0.0


def test_report_repeatable_and_references():
    s = spec(trials=5)
    cell = s.cells()[0]
    a, b = mc_risk(s, cell), mc_risk(s, cell)
    assert a.losses.tobytes() == b.losses.tobytes() and a.mean_sq_loss == b.mean_sq_loss
    assert a.global_rate_reference == global_rate(64, 2, 0.1)
    assert a.q50 <= a.q90 <= a.q95 and a.stderr >= 0.0


def test_zero_theta_zero_noise_report():
    s = spec(theta_norm_sq=[0.0], noise="zero", estimators=["lepski_refined", "known_oracle"])
    for rep in sweep(s):
        assert rep.mean_sq_loss == 0.0


def test_sweep_ordering_and_shape():
    s = spec(n=[128, 64], delta=[0.2, 0.05], estimators=["vanilla_spectral", "lepski_global"])
    reps = sweep(s)
    cells = [r.cell for r in reps]
    assert len(cells) == 8 and cells == sorted(cells)
    assert cells[0] == Cell(64, 2, 0.05, 0.5, "lepski_global")


def test_cells_share_trial_streams():
    # paired seeds: two estimators in the same cell see the same datasets
    s = spec(estimators=["vanilla_spectral", "lepski_global"], trials=4, theta_norm_sq=[4.0])
    reps = {r.cell.estimator: r for r in sweep(s)}
    assert reps["lepski_global"].mean_ell_used <= 64
    cfg = cell_config(reps["vanilla_spectral"].cell, 11)
    direct = [run_trial(cfg, "vanilla_spectral", s.C, t, 11, 4.0).sq_loss for t in range(4)]
    np.testing.assert_array_equal(reps["vanilla_spectral"].losses, direct)


def test_parallel_schedule_matches_serial():
    s = spec(estimators=["lepski_refined", "known_adaptive"], trials=6, n=[64, 128])
    a, b = sweep(s, threads=1), sweep(s, threads=2)
    for x, y in zip(a, b):
        assert x.cell == y.cell
        assert x.losses.tobytes() == y.losses.tobytes()
        assert x.mean_sq_loss == y.mean_sq_loss and x.stderr == y.stderr


def test_thread_env_fallback(monkeypatch):
    monkeypatch.setenv("MML_THREADS", "2")
    s = spec(trials=4)
    assert sweep(s)[0].losses.tobytes() == sweep(s, threads=1)[0].losses.tobytes()


@pytest.mark.parametrize("kw", [dict(trials=0), dict(estimators=["nope"]), dict(d=[100]),
                                dict(delta=[1.0]), dict(theta_norm_sq=[-1.0])])
def test_spec_validation(kw):
    with pytest.raises(DomainError):
        spec(**kw)


def _fake(axis, xs, fn):
    out = []
    for x in xs:
        cell = Cell(**{"n": 1000, "d": 2, "delta": 0.1, "theta_norm_sq": 0.0,
                       "estimator": "known_oracle", axis: x})
        y = fn(x)
        out.append(RiskReport(cell, 1, y, 0.0, y, y, y, 1.0, 0.0, 0.0, True))
    return out


def test_slope_exact_power_laws():
    ns = [2**i for i in range(8, 15)]
    fit = fit_loglog_slope(_fake("n", ns, lambda n: 3.0 / n), "n")
    assert abs(fit.slope + 1) <= 1e-9 and fit.r_squared > 1 - 1e-12
    fit = fit_loglog_slope(_fake("n", ns, lambda n: 0.7 / math.sqrt(n)), "n", stat="median")
    assert abs(fit.slope + 0.5) <= 1e-9
    fit = fit_loglog_slope(_fake("delta", [0.01, 0.02, 0.04], lambda x: x**0.5), "delta")
    assert abs(fit.slope - 0.5) <= 1e-9


def test_slope_drops_nonpositive_points():
    reps = _fake("n", [10, 20, 40, 80], lambda n: 1.0 / n)
    reps[0].mean_sq_loss = 0.0
    assert len(fit_loglog_slope(reps, "n").points) == 3
    reps[1].mean_sq_loss = -1.0
    with pytest.raises(DomainError):
        fit_loglog_slope(reps, "n")


def _table(freq):
    return [(c, 4096, 8, 0.1, 0.0, freq(c)) for c in C_CANDIDATES]


def test_choose_C_all_pass():
    cal = choose_C(_table(lambda c: 0.0))
    assert cal.C == 0.5 and not cal.warning


def test_choose_C_all_fail():
    cal = choose_C(_table(lambda c: 0.5))
    assert cal.C == 8.0 and cal.warning


def test_choose_C_threshold_strict():
    cal = choose_C(_table(lambda c: 0.10 if c < 2 else 0.0999))
    assert cal.C == 2.0


def test_calibration_small_grid_structure():
    s = spec(n=[256], d=[4], delta=[0.1], theta_norm_sq=[0.0, 0.2], trials=10)
    cal = calibrate_C(s)
    assert len(cal.table) == 2 * len(C_CANDIDATES)
    assert cal.C in C_CANDIDATES
    # larger C never selects a finer grid point, so frequencies cannot increase
    for s2 in (0.0, 0.2):
        freqs = [r[5] for r in cal.table if r[4] == s2]
        assert all(a >= b for a, b in zip(freqs, freqs[1:]))


def test_frozen_calibration_file():
    cfg = frozen_calibration()
    assert calibrated_C() == cfg["C"] == 2.0
    assert cfg["trials"] == 200


@pytest.mark.slow
def test_frozen_calibration_reproduces():
    cfg = frozen_calibration()
    s = ExperimentSpec(n=cfg["n"], d=[cfg["d"]], delta=cfg["delta"],
                       theta_norm_sq=cfg["theta_norm_sq"], estimators=["lepski_global"],
                       trials=cfg["trials"], master_seed=7)
    cal = calibrate_C(s)
    assert cal.C == calibrated_C() and not cal.warning


def test_concentration_frozen_chain():
    rep = concentration_check(64, 0.0, 1024, 50)
    assert rep.freq_bracket == rep.freq_upper == rep.freq_deviation == 1.0
    assert rep.mean_norm_sq == 64.0


@pytest.mark.parametrize("delta", [0.01, 0.2, 0.5])
def test_concentration_upper_bound_always(delta):
    assert concentration_check(512, delta, 1024, 200, seed=3).freq_upper == 1.0


def test_concentration_preconditions():
    with pytest.raises(DomainError):
        concentration_check(10, 0.1, 1000, 5)
    with pytest.raises(DomainError):
        concentration_check(4, 0.0, 100, 5, d=8)
    with pytest.raises(DomainError):
        concentration_check(100, 0.7, 100, 5)


def test_concentration_mean_matches_attenuation():
    for delta, k in ((0.01, 64), (0.05, 16), (0.2, 4), (0.5, 2)):
        ell = 128
        rep = concentration_check(ell, delta, ell * k, 10**4, seed=int(1000 * delta) + k)
        assert rep.expected_norm_sq == ell * g_of_delta(delta, k)
        assert abs(rep.mean_norm_sq - rep.expected_norm_sq) <= 4 * rep.stderr_norm_sq


def test_zero_theta_not_worse_than_worst_case():
    n, d, delta = 2**14, 8, 0.05
    s = ExperimentSpec(n=[n], d=[d], delta=[delta],
                       theta_norm_sq=[0.0, worst_case_norm_sq(n, d, delta)],
                       estimators=["known_oracle", "known_adaptive", "plain_oracle",
                                   "lepski_global", "lepski_refined"],
                       trials=200, master_seed=4, C=2.0)
    reps = sweep(s)
    by = {(r.cell.estimator, r.cell.theta_norm_sq): r.mean_sq_loss for r in reps}
    worse = {v: by[(v, 0.0)] / by[(v, s.theta_norm_sq[1])] for v in s.estimators
             if by[(v, 0.0)] > by[(v, s.theta_norm_sq[1])]}
    assert not worse, f"mean loss ratio zero / worst-case norm: {worse}"
