import numpy as np
import pytest

from narxmpc.deb import (DebAugmentedState, DebController, deb_step,
                         deb_target, mhe_estimate)
from narxmpc.mpc import OcpConfig
from narxmpc.nnarx import Layer, ModelParams, ffnn_eval, simulate, step
from narxmpc.offset_free import equilibrium_state, find_equilibrium
from narxmpc.scaling import SignalScaling

from test_offset_free import contractive_params, reachable_output


def stable_linear_model(gain_y=0.6, gain_u=0.5, offset=0.05):
    """Scalar linear ARX as a single identity layer; N = 1."""
    layer = Layer(W=np.array([[gain_u]]), U=np.array([[gain_y, 0.0]]),
                  b=np.zeros(1), activation="identity")
    return ModelParams(1, 1, 1, [layer], np.array([[1.0]]), np.array([offset]))


class TestDebStep:
    def test_zero_disturbance_matches_plain_model(self):
        rng = np.random.default_rng(0)
        params = contractive_params(seed=50, N=2, hidden=(4,))
        s = DebAugmentedState(x=rng.uniform(-1, 1, params.state_dim), d=np.zeros(1))
        u = rng.uniform(-1, 1, 1)
        s_next, y = deb_step(params, s, u)
        assert np.allclose(s_next.x, step(params, s.x, u))
        assert np.allclose(y, s.x[2:3])

    def test_constant_offset_shifts_output(self):
        params = contractive_params(seed=51, N=2, hidden=(4,))
        y_t = reachable_output(params, 0.2)
        eq = find_equilibrium(params, y_t, guess_u=np.array([0.0]))
        s = DebAugmentedState(x=eq.x.copy(), d=np.array([0.07]))
        for _ in range(10):
            s, y = deb_step(params, s, eq.u)
            assert y == pytest.approx(y_t + 0.07, abs=1e-9)

    def test_state_part_matches_free_run(self):
        rng = np.random.default_rng(1)
        params = contractive_params(seed=52, N=2, hidden=(4,))
        x0 = rng.uniform(-1, 1, params.state_dim)
        u_seq = rng.uniform(-1, 1, (20, 1))
        ref = simulate(params, x0, u_seq)
        s = DebAugmentedState(x=x0.copy(), d=np.array([0.3]))
        for k in range(20):
            s, _ = deb_step(params, s, u_seq[k])
            assert np.allclose(s.x[2:3], ref[k])
        assert s.d == pytest.approx(np.array([0.3]))


def constant_regime_window(params, u_const, length, rng=None, jitter=0.0):
    """(y, u) rows from the model itself, starting in the constant regime."""
    y0 = reachable_output(params, u_const)
    x = equilibrium_state(y0, u_const, params.lookback)
    ys = [np.atleast_1d(y0)]
    us = []
    rng = rng or np.random.default_rng(3)
    for k in range(length - 1):
        u = np.atleast_1d(u_const + (rng.uniform(-jitter, jitter) if jitter else 0.0))
        ys.append(ffnn_eval(params, x, u))
        x = step(params, x, u)
        us.append(u)
    us.append(us[-1] if us else np.atleast_1d(u_const))
    return np.stack(ys), np.stack(us)


class TestMhe:
    def test_exact_model_estimates_zero(self):
        params = contractive_params(seed=53, N=2, hidden=(4,))
        y_w, u_w = constant_regime_window(params, 0.2, 14, jitter=0.3)
        d_hat = mhe_estimate(params, y_w, u_w, horizon=8, prior_weight=0.0)
        assert np.max(np.abs(d_hat)) <= 1e-8

    def test_recovers_synthetic_constant_offset(self):
        # window long enough for the contaminated initial reconstruction to
        # wash out of the scored tail
        params = contractive_params(seed=54, N=2, hidden=(4,))
        y_w, u_w = constant_regime_window(params, -0.1, 30, jitter=0.3)
        d_hat = mhe_estimate(params, y_w + 0.23, u_w, horizon=8, prior_weight=0.0)
        assert d_hat == pytest.approx(np.array([0.23]), abs=1e-6)

    def test_prior_limit_returns_previous(self):
        params = contractive_params(seed=55, N=2, hidden=(4,))
        y_w, u_w = constant_regime_window(params, 0.0, 10, jitter=0.2)
        d_prev = np.array([0.5])
        d_hat = mhe_estimate(params, y_w + 1.0, u_w, horizon=5,
                             prior_weight=1e12, d_prev=d_prev)
        assert d_hat == pytest.approx(d_prev, abs=1e-9)

    def test_degenerate_window_rejected(self):
        params = contractive_params(seed=56, N=3, hidden=(4,))
        with pytest.raises(ValueError):
            mhe_estimate(params, np.zeros((3, 1)), np.zeros((3, 1)), 5, 1.0)
        with pytest.raises(ValueError):
            mhe_estimate(params, np.zeros((8, 1)), np.zeros((8, 1)), 0, 1.0)


class TestDebTarget:
    def test_zero_offset_reduces_to_plain_equilibrium(self):
        params = contractive_params(seed=57, N=2, hidden=(4,))
        y_t = reachable_output(params, 0.3)
        eq_plain = find_equilibrium(params, y_t, guess_u=np.array([0.0]))
        eq_deb = deb_target(params, y_t, np.zeros(1), guess_u=np.array([0.0]))
        assert eq_deb.u == pytest.approx(eq_plain.u, abs=1e-10)

    def test_linear_surrogate_input_shift(self):
        model = stable_linear_model()
        # steady relation: y = g_y y + g_u_total u + offset with DC gain
        y_ref = np.array([0.4])
        c = 0.06
        eq0 = deb_target(model, y_ref, np.zeros(1), guess_u=np.array([0.0]))
        eqc = deb_target(model, y_ref, np.array([c]), guess_u=np.array([0.0]))
        dc_gain = 0.5 / (1.0 - 0.6)
        assert eqc.u - eq0.u == pytest.approx(np.array([-c / dc_gain]), abs=1e-9)

    def test_residual_contract(self):
        params = contractive_params(seed=58, N=2, hidden=(4,))
        y_t = reachable_output(params, 0.1)
        eq = deb_target(params, y_t, np.array([0.02]), guess_u=np.array([0.0]))
        assert eq.residual <= 1e-8


class TestDebController:
    def test_holds_equilibrium_when_plant_is_model(self):
        params = contractive_params(seed=59, N=2, hidden=(4,))
        y_t = reachable_output(params, 0.2)
        eq = find_equilibrium(params, y_t, guess_u=np.array([0.0]))
        cfg = OcpConfig(horizon=8, u_lo=np.array([-2.0]), u_hi=np.array([2.0]),
                        terminal_tol=1e-6)
        ctl = DebController(params, SignalScaling.identity(1, 1), cfg,
                            mhe_horizon=5, prior_weight=1.0)
        N = params.lookback
        ctl.initialize(np.full((N, 1), float(y_t[0])), np.full((N, 1), float(eq.u[0])))
        x = eq.x.copy()
        for k in range(10):
            y_meas = x[(N - 1) * 2]
            u_k, rec, _ = ctl.step(y_meas, float(y_t[0]), t=float(k))
            assert rec.u == pytest.approx(float(eq.u[0]), abs=1e-5)
            assert rec.d_hat == pytest.approx(0.0, abs=1e-6)
            x = step(params, x, np.atleast_1d(u_k))

    def test_offset_vanishes_without_mismatch(self):
        # exact model: after a setpoint change the loop settles with no bias
        params = contractive_params(seed=60, N=2, hidden=(4,))
        y_a = reachable_output(params, 0.1)
        y_b = reachable_output(params, 0.35)
        eq_a = find_equilibrium(params, y_a, guess_u=np.array([0.0]))
        cfg = OcpConfig(horizon=10, u_lo=np.array([-2.0]), u_hi=np.array([2.0]),
                        terminal_tol=1e-6)
        ctl = DebController(params, SignalScaling.identity(1, 1), cfg,
                            mhe_horizon=5, prior_weight=1.0)
        N = params.lookback
        ctl.initialize(np.full((N, 1), float(y_a[0])), np.full((N, 1), float(eq_a.u[0])))
        x = eq_a.x.copy()
        y_meas = float(y_a[0])
        for k in range(40):
            u_k, rec, _ = ctl.step(y_meas, float(y_b[0]), t=float(k))
            x = step(params, x, np.atleast_1d(u_k))
            y_meas = x[(N - 1) * 2]
        assert abs(y_meas - y_b[0]) <= 1e-4
