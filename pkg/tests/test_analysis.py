import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpbalance import analysis as an
from gpbalance.control import GainSchedule
from gpbalance.dynamics import furuta_nominal_varying, three_link_nominal
from gpbalance.gp import GpHyperparams, condition
from gpbalance.sim import EpisodeLog, log_columns

import oracles


def synth_log(n, m, t, **cols):
    """Episode log with the named columns filled and everything else zero."""
    names = log_columns(n, m)
    data = np.zeros((len(t), len(names)))
    data[:, 0] = t
    for name, values in cols.items():
        data[:, names.index(name)] = values
    return EpisodeLog(n, m, data)


# --- Lyapunov -----------------------------------------------------------------------


def test_lyapunov_of_negative_identity():
    np.testing.assert_allclose(an.lyapunov_solve(-np.eye(3), 2 * np.eye(3)), np.eye(3), atol=1e-15)


@given(st.integers(0, 10_000))
def test_lyapunov_random_stable_matrix(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 4))
    a -= (np.max(np.linalg.eigvals(a).real) + 0.5) * np.eye(4)
    root = rng.normal(size=(4, 4))
    q = root @ root.T + np.eye(4)
    p = an.lyapunov_solve(a, q)
    assert np.abs(a.T @ p + p @ a + q).max() < 1e-8 * max(1.0, np.abs(p).max())
    np.testing.assert_array_equal(p, p.T)
    assert np.linalg.eigvalsh(p)[0] > 0


def test_lyapunov_rejects_non_hurwitz():
    with pytest.raises(an.AnalysisError):
        an.lyapunov_solve(np.diag([-1.0, 0.0]), np.eye(2))
    with pytest.raises(an.AnalysisError):
        an.lyapunov_solve(-np.eye(2), np.eye(3))


def test_error_system_matrix_and_setup():
    a0 = an.error_system_matrix([10.0, 1000.0], [3.0, 100.0])
    np.testing.assert_array_equal(a0[:2, 2:], np.eye(2))
    np.testing.assert_array_equal(a0[2:, :2], -np.diag([10.0, 1000.0]))
    setup = an.LyapunovSetup.from_gains(GainSchedule.build(1, 1, 10.0, 3.0, 1000.0, 100.0))
    assert setup.residual < 1e-10
    np.testing.assert_array_equal(setup.q_mat, np.eye(4))


def test_scalar_lyapunov_closed_form():
    # x'' = -kp x - kd x: P from the standard second-order solution
    kp, kd = 4.0, 3.0
    p = an.lyapunov_solve(an.error_system_matrix([kp], [kd]), np.eye(2))
    p12 = 1 / (2 * kp)
    p22 = (1 + 2 * p12) / (2 * kd)
    p11 = kp * p22 + kd * p12
    np.testing.assert_allclose(p, [[p11, p12], [p12, p22]], rtol=1e-13)


def _setup():
    return an.LyapunovSetup.from_gains(GainSchedule.build(1, 1, 10.0, 3.0, 1000.0, 100.0))


def test_zero_error_gives_zero_lyapunov_value():
    t = np.linspace(0, 1, 11)
    v = an.lyapunov_values(synth_log(1, 1, t).error_vector, _setup().p_mat)
    np.testing.assert_array_equal(v, 0.0)


def test_decay_rate_of_synthetic_exponential():
    gamma0 = 1.7
    t = np.linspace(0, 4, 1601)
    log = synth_log(1, 1, t, ea1=0.3 * np.exp(-gamma0 * t), eu1=-0.1 * np.exp(-gamma0 * t))
    tr = an.lyapunov_trace(log, _setup())
    assert tr.gamma == pytest.approx(2 * gamma0, rel=1e-2)
    assert tr.under_envelope_fraction == 1.0
    assert tr.fit_window == (0.0, 4.0) and tr.settled


def test_trace_after_disturbance_uses_peak_to_floor_window():
    t = np.linspace(0, 10, 4001)
    floor = 1e-3 * np.sin(7 * t)
    jump = np.where(t >= 5.0, 0.5 * np.exp(-2.0 * (t - 5.0)), 0.0)
    log = synth_log(1, 1, t, ea1=floor + jump)
    setup = _setup()
    tr = an.lyapunov_trace(log, setup, disturbance=5.0)
    p11 = setup.p_mat[0, 0]
    assert tr.floor == pytest.approx(p11 * 1e-6, rel=1e-3)
    assert tr.fit_window[0] == pytest.approx(5.0)
    assert 7.0 < tr.fit_window[1] < 9.0
    assert tr.gamma == pytest.approx(4.0, rel=0.05)
    assert tr.settled and tr.scale >= 1.0


def test_trace_errors():
    with pytest.raises(an.AnalysisError):
        an.lyapunov_trace(synth_log(1, 1, np.array([0.0])), _setup())
    t = np.linspace(0, 1, 11)
    with pytest.raises(an.AnalysisError):
        an.lyapunov_trace(synth_log(1, 1, t, ea1=np.ones(11)), _setup(), disturbance=0.0)
    with pytest.raises(an.AnalysisError):
        an.fit_decay_rate(np.zeros(1), np.ones(1))


# --- tracking statistics -----------------------------------------------------------------


def test_constant_error_statistics():
    t = np.linspace(0, 10, 1001)
    log = synth_log(1, 1, t, ea1=np.full(1001, -0.1))
    s = an.tracking_stats(log, (0.0, 10.0))
    np.testing.assert_allclose(s.mean, [0.1, 0.0], rtol=1e-12)
    np.testing.assert_allclose(s.std, 0.0, atol=1e-12)
    assert s.norm_mean == pytest.approx(0.1) and s.norm_std == pytest.approx(0.0, abs=1e-12)
    assert s.effort == 0.0


def test_effort_of_unit_sine_over_two_pi():
    t = np.arange(0, 2 * math.pi * 1000 + 1) / 1000.0
    t[-1] = 2 * math.pi
    log = synth_log(1, 1, t, u1=np.sin(t))
    s = an.tracking_stats(log, (0.0, 2 * math.pi))
    assert abs(s.effort - math.pi) < 1e-6
    assert s.effort == pytest.approx(oracles.trapezoid(np.sin(t) ** 2, t), rel=1e-13)


def test_steady_window_and_empty_window():
    t = np.linspace(0, 10, 101)
    log = synth_log(2, 1, t)
    assert an.steady_window(log) == (2.0, 10.0)
    assert an.tracking_stats(log).window == (2.0, 10.0)
    with pytest.raises(an.AnalysisError):
        an.tracking_stats(log, (20.0, 30.0))


def test_table_and_csv(tmp_path):
    t = np.linspace(0, 1, 11)
    stats = [an.tracking_stats(synth_log(2, 1, t, ea1=0.2, u1=1.0), tag=tag) for tag in ("EIC", "PEIC")]
    table = an.format_table(stats).splitlines()
    assert table[0].split()[:4] == ["controller", "|e1|", "(rad)", "|e2|"]
    assert "||e||" in table[0] and "int u^T u dt" in table[0]
    assert table[2].startswith("EIC") and table[3].startswith("PEIC")
    assert "0.2000 +- 0.0000" in table[2]
    an.write_stats_csv(tmp_path / "s.csv", stats)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("controller,e1_mean,e2_mean,e3_mean,e1_std")
    assert len(lines) == 3
    assert an.format_table([]) == ""


# --- uncontrolled motion ------------------------------------------------------------------


def test_motion_metric_is_empty_when_square():
    motion = an.uncontrolled_motion_metric(synth_log(1, 1, np.linspace(0, 1, 5)))
    assert motion.empty and "trivial" in motion.notice
    assert motion.max_command() == 0.0 and motion.first_exceed(0.0) is None


def test_motion_metric_reads_null_space_projection():
    t = np.linspace(0, 2, 201)
    log = synth_log(2, 1, t, pa2=0.8 * t, pa_ref2=0.1 * t, ns_cmd=1e-12)
    motion = an.uncontrolled_motion_metric(log)
    np.testing.assert_allclose(motion.pan_error, 0.7 * t)
    assert motion.first_exceed(1.0) == pytest.approx(1.43)  # first tick past 1 / 0.7
    assert motion.max_command() == 1e-12 and motion.max_command(until=-1.0) == 0.0


def test_null_space_command_from_states():
    nominal = three_link_nominal()
    rng = np.random.default_rng(0)
    t = np.linspace(0, 1, 6)
    q = rng.uniform(-0.5, 0.5, (6, 3))
    va = rng.normal(size=(6, 2))
    log = synth_log(2, 1, t, q1=q[:, 0], q2=q[:, 1], q3=q[:, 2], va1=va[:, 0], va2=va[:, 1])
    got = an.nullspace_command_from_states(nominal, log)
    for i in range(6):
        row = nominal.d_bar(q[i])[2:, :2]
        v_n = row / np.linalg.norm(row)  # row space of the 1x2 coupling block
        expected = math.sqrt(max(va[i] @ va[i] - float((v_n @ va[i])[0]) ** 2, 0.0))
        assert got[i] == pytest.approx(expected, abs=1e-12)


# --- error bound ---------------------------------------------------------------------------


def _bound_gp(vartheta, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5, 0.5, (12, 6))
    y = rng.normal(0, 0.1, (12, 2))
    hyp = [GpHyperparams(np.ones(6), 0.2, vartheta), GpHyperparams(np.ones(6), 0.1, vartheta)]
    return condition(x, y, hyp, 1, 1)


GRID = np.array([[a, b] for a in np.linspace(-0.5, 0.5, 5) for b in np.linspace(-0.5, 0.5, 5)])


def test_block_norm_ranges_by_hand():
    nominal = furuta_nominal_varying()
    b = an.block_norm_ranges(nominal, GRID)
    d = [nominal.d_bar(q) for q in GRID]
    assert b["d_a1"] == pytest.approx(min(abs(x[0, 0]) for x in d))
    assert b["d_u2"] == pytest.approx(max(abs(x[1, 1]) for x in d))
    assert b["sigma_m"] == pytest.approx(min(abs(x[1, 0]) for x in d))


def test_bound_report_hand_formulas():
    gp = _bound_gp(0.05)
    nominal = furuta_nominal_varying()
    gains = GainSchedule.build(1, 1, 10.0, 3.0, 1000.0, 100.0)
    rep = an.gp_bound_report(gp, nominal, gains, GRID, 0.9, 0.8, (0.0, 0.001, 0.0, 0.001))
    su = math.sqrt(0.1**2 + 0.05**2)
    assert rep.sigma_u_max == pytest.approx(su)
    assert rep.l_u1 == pytest.approx(su / rep.d_u1)
    assert rep.eta == pytest.approx(0.72)
    # no gain adaptation: Q_Sigma = 0 and d2 = 0, so r1 = 2 d1 lambda_max(P) / lambda_min(Q)
    assert rep.lambda_max_q_sigma == pytest.approx(0.0, abs=1e-12)
    d1 = 0.001 + (1 + rep.d_u2 / rep.sigma_1) * 0.001
    assert rep.d1 == pytest.approx(d1)
    assert rep.r1 == pytest.approx(2 * d1 * rep.lambda_max_p / 1.0)
    assert "eta = eta_a * eta_u" in rep.to_text()


def test_bound_report_grows_with_noise_level():
    nominal = furuta_nominal_varying()
    gains = GainSchedule.build(1, 1, 10.0, 3.0, 1000.0, 100.0, 50.0, 10.0, 500.0, 200.0)
    reps = [an.gp_bound_report(_bound_gp(v), nominal, gains, GRID) for v in (0.01, 0.05, 0.2)]
    for name in ("sigma_a_max", "sigma_u_max", "l_a1", "l_u1", "l_a2", "l_u2", "lambda_max_q_sigma"):
        vals = [getattr(r, name) for r in reps]
        assert vals[0] < vals[1] < vals[2], name


def test_bound_report_flags_failed_gain_condition():
    # large model-error constants make 2 d2 lambda_max(P) exceed lambda_min(Q)
    gains = GainSchedule.build(1, 1, 10.0, 3.0, 1000.0, 100.0)
    rep = an.gp_bound_report(_bound_gp(0.05), furuta_nominal_varying(), gains, GRID, c=(1.0, 1.0, 1.0, 1.0))
    assert 2 * rep.d2 * rep.lambda_max_p > rep.lambda_min_q
    assert rep.r1 == math.inf
    assert any("gain condition" in n for n in rep.notes)


def test_bound_report_input_errors():
    gains = GainSchedule.build(1, 1, 10.0, 3.0, 1000.0, 100.0)
    with pytest.raises(an.AnalysisError):
        an.gp_bound_report(_bound_gp(0.05), furuta_nominal_varying(), gains, GRID, c=(0.1, 0.1))
    with pytest.raises(an.AnalysisError):
        an.gp_bound_report(_bound_gp(0.05), furuta_nominal_varying(), gains, np.zeros((0, 2)))


# --- recovery ------------------------------------------------------------------------------


def test_recovery_time():
    t = np.linspace(0, 10, 1001)
    err = 0.01 * np.ones_like(t)
    err[(t >= 5.0) & (t < 6.5)] = 0.5
    log = synth_log(1, 1, t, ea1=err)
    assert an.recovery_time(log, 5.0) == pytest.approx(1.5)
    assert an.recovery_time(synth_log(1, 1, t, ea1=0.01), 5.0) == 0.0
    err[t >= 5.0] = 0.5
    assert an.recovery_time(synth_log(1, 1, t, ea1=err), 5.0) is None
    with pytest.raises(an.AnalysisError):
        an.recovery_time(log, 0.0)
