import numpy as np
import pytest

from narxmpc.boxes import Box, compute_rpi
from narxmpc.errors import ConfigurationError
from narxmpc.mpc import (Controller, OcpConfig, estimate_disturbance_bound,
                         solve_nominal_ocp, solve_tube_ocp)
from narxmpc.nnarx import build_structural_matrices, ffnn_eval, step
from narxmpc.offset_free import (AugmentedState, AugmentedTarget, Equilibrium,
                                 augmented_step, equilibrium_state,
                                 find_equilibrium, integrator_gain,
                                 linearize_at, make_target, mu_max_linear)
from narxmpc.scaling import SignalScaling
from narxmpc.training import _batch_free_run

from test_nnarx import zero_params
from test_offset_free import contractive_params, reachable_output


def small_cfg(horizon=6, **kw):
    defaults = dict(horizon=horizon, u_lo=np.array([-2.0]), u_hi=np.array([2.0]),
                    terminal_tol=1e-6, max_inner=300)
    defaults.update(kw)
    return OcpConfig(**defaults)


def model_with_target(seed=40, u_bar=0.25, N=2):
    params = contractive_params(seed=seed, N=N, hidden=(5,))
    y_t = reachable_output(params, u_bar)
    eq = find_equilibrium(params, y_t, guess_u=np.array([0.0]))
    target = make_target(params, eq)
    mu_hat = 0.5 * mu_max_linear(*linearize_at(params, eq),
                                 build_structural_matrices(N, 1, 1).C)
    mu = integrator_gain(*linearize_at(params, eq),
                         build_structural_matrices(N, 1, 1).C, mu_hat)
    return params, eq, target, mu


class TestNominalOcp:
    def test_target_is_zero_cost_fixed_point(self):
        params, eq, target, mu = model_with_target()
        cfg = small_cfg()
        chi = AugmentedState(x=eq.x.copy(), xi=eq.u.copy(), theta=np.zeros(1))
        sol = solve_nominal_ocp(params, chi, target, mu, cfg,
                                warm_start=np.zeros(cfg.horizon))
        assert sol.status == "optimal"
        assert sol.objective <= 1e-12
        assert np.max(np.abs(sol.v_seq)) <= 1e-6
        assert sol.eq_residual <= 1e-6

    def test_predicted_trajectory_satisfies_dynamics(self):
        params, eq, target, mu = model_with_target(seed=41)
        cfg = small_cfg()
        chi = AugmentedState(x=eq.x + 0.03, xi=eq.u.copy(), theta=np.zeros(1))
        sol = solve_nominal_ocp(params, chi, target, mu, cfg)
        assert sol.status != "infeasible"
        state = AugmentedState.from_vector(sol.chi_traj[0], params.state_dim, 1)
        for i in range(cfg.horizon):
            state, zeta = augmented_step(params, state, sol.v_seq[i],
                                         eq.y_target, mu)
            assert np.allclose(zeta, sol.zeta_traj[i], atol=1e-10)
            assert np.allclose(state.to_vector(), sol.chi_traj[i + 1], atol=1e-10)

    def test_input_box_respected_when_active(self):
        params, eq, target, mu = model_with_target(seed=42)
        # the unconstrained plan peaks ~0.5 above the equilibrium input, so
        # a 0.3 cap bites but leaves the terminal pin reachable
        cfg = small_cfg(horizon=12, u_lo=np.array([eq.u[0] - 0.3]),
                        u_hi=np.array([eq.u[0] + 0.3]))
        chi = AugmentedState(x=eq.x + 0.05, xi=eq.u.copy(), theta=np.zeros(1))
        sol = solve_nominal_ocp(params, chi, target, mu, cfg)
        u_traj = sol.zeta_traj[:-1, 1]
        assert sol.status == "optimal"
        assert np.all(u_traj <= eq.u[0] + 0.3 + 1e-6)
        assert np.all(u_traj >= eq.u[0] - 0.3 - 1e-6)
        assert u_traj.max() >= eq.u[0] + 0.3 - 1e-3   # the bound is active


def linear_rollout_matrices(params, mu, y_ref, chi0, horizon):
    """Affine prediction chi_i = P_i z + q_i for a zero-hidden-weight model."""
    N, m, p = params.lookback, params.input_dim, params.output_dim
    S = build_structural_matrices(N, m, p)
    n = params.state_dim
    dim = n + 2 * m
    F = np.zeros((dim, dim))
    F[:n, :n] = S.A
    F[:n, n:n + m] = S.B_u
    F[:n, n + m:] = -S.B_u
    F[n:n + m, :n] = -mu @ S.C
    F[n:n + m, n:n + m] = np.eye(m)
    G = np.zeros((dim, m))
    G[:n] = S.B_u
    G[n + m:] = np.eye(m)
    const = np.zeros(dim)
    const[:n] = S.B_x @ params.b0
    const[n:n + m] = mu @ y_ref
    P = [np.zeros((dim, horizon * m))]
    q = [chi0.copy()]
    for i in range(horizon):
        Pi = F @ P[-1]
        Pi[:, i * m:(i + 1) * m] += G
        P.append(Pi)
        q.append(F @ q[-1] + const)
    return P, q


def kkt_oracle(params, mu, target, chi0, cfg):
    """Dense KKT solve of the linear-quadratic transcription."""
    N, m, p = params.lookback, params.input_dim, params.output_dim
    n = params.state_dim
    dim = n + 2 * m
    Np = cfg.horizon
    P, q = linear_rollout_matrices(params, mu, target.eq.y_target, chi0, Np)
    wq = np.sqrt(np.concatenate([cfg.state_weights(N, m, p),
                                 np.full(m, cfg.q_xi), np.full(m, cfg.q_theta)]))
    wr = np.sqrt(np.concatenate([np.full(p, cfg.r_e), np.full(m, cfg.r_u)]))
    Hchi = np.zeros((p + m, dim))
    Hchi[:p, (N - 1) * (m + p):(N - 1) * (m + p) + p] = np.eye(p)
    Hchi[p:, n:n + m] = np.eye(m)
    Hchi[p:, n + m:] = -np.eye(m)
    rows_M, rows_c = [], []
    for i in range(Np + 1):
        rows_M.append(wq[:, None] * P[i])
        rows_c.append(wq * (target.chi - q[i]))
    zeta_rows = []
    for i in range(Np):
        Mz = Hchi @ P[i]
        Mz[p:, i * m:(i + 1) * m] += np.eye(m)
        cz = target.zeta - Hchi @ q[i]
        zeta_rows.append((wr[:, None] * Mz, wr * cz))
    for Mz, cz in zeta_rows:
        rows_M.append(Mz)
        rows_c.append(cz)
    rows_M.append(zeta_rows[-1][0])
    rows_c.append(zeta_rows[-1][1])
    M = np.vstack(rows_M)
    c = np.concatenate(rows_c)
    E = P[Np]
    d = target.chi - q[Np]
    H = 2 * M.T @ M
    g = -2 * M.T @ c
    K = np.block([[H, E.T], [E, np.zeros((dim, dim))]])
    rhs = np.concatenate([-g, d])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    z = sol[:Np * m]
    return z, float(np.sum((M @ z - c) ** 2))


def linear_surrogate(N=1, offset=0.2):
    params = zero_params(N=N, b0=[offset])
    x_eq = equilibrium_state([offset], [0.3], N)
    eq = Equilibrium(x=x_eq, u=np.array([0.3]), y_target=np.array([offset]),
                     residual=0.0)
    return params, eq


class TestKktOracle:
    @pytest.mark.parametrize("horizon", [2, 5])
    def test_linear_quadratic_matches_kkt(self, horizon):
        # zero hidden weights make the dynamics affine; reach the terminal
        # point by construction so the pinned problem is feasible
        params, eq = linear_surrogate()
        mu = np.array([[0.2]])
        cfg = small_cfg(horizon=horizon, u_lo=np.array([-50.0]),
                        u_hi=np.array([50.0]), terminal_tol=1e-8)
        rng = np.random.default_rng(7)
        chi0 = np.concatenate([eq.x + rng.uniform(-0.1, 0.1, params.state_dim),
                               eq.u + 0.05, np.zeros(1)])
        v_star = rng.uniform(-0.2, 0.2, (horizon, 1))
        state = AugmentedState.from_vector(chi0, params.state_dim, 1)
        for i in range(horizon):
            state, _ = augmented_step(params, state, v_star[i], eq.y_target, mu)
        target = AugmentedTarget(eq=eq, chi=state.to_vector(), v=np.zeros(1),
                                 zeta=np.concatenate([eq.y_target, eq.u]))
        z_star, obj_star = kkt_oracle(params, mu, target, chi0, cfg)
        sol = solve_nominal_ocp(params,
                                AugmentedState.from_vector(chi0, params.state_dim, 1),
                                target, mu, cfg)
        assert sol.status != "infeasible"
        assert np.max(np.abs(sol.v_seq.ravel() - z_star)) <= 1e-6
        assert sol.objective == pytest.approx(obj_star, abs=1e-6)


class TestTubeOcp:
    def test_degenerate_tube_matches_nominal(self):
        # singleton error set pins the free initial state to the measurement
        rng = np.random.default_rng(8)
        agree = 0
        for trial in range(20):
            params, eq, target, mu = model_with_target(seed=100 + trial)
            cfg = small_cfg(horizon=10)
            x_k = eq.x + rng.uniform(-0.02, 0.02, params.state_dim)
            xi_k = eq.u + rng.uniform(-0.01, 0.01, 1)
            theta_k = rng.uniform(-0.01, 0.01, 1)
            chi = AugmentedState(x=x_k.copy(), xi=xi_k.copy(), theta=theta_k.copy())
            nom = solve_nominal_ocp(params, chi, target, mu, cfg)
            tube = solve_tube_ocp(params, x_k, xi_k, theta_k, target, mu,
                                  Box.singleton(np.zeros(params.state_dim)), cfg)
            assert nom.status != "infeasible" and tube.status != "infeasible"
            assert abs(nom.objective - tube.objective) <= 1e-6
            agree += 1
        assert agree == 20

    def test_initial_state_stays_in_box(self):
        params, eq, target, mu = model_with_target(seed=43)
        omega = compute_rpi(params.lookback, 1, 1, 0.02)
        cfg = small_cfg(horizon=8)
        x_k = eq.x + 0.05
        sol = solve_tube_ocp(params, x_k, eq.u, np.zeros(1), target, mu, omega, cfg)
        assert sol.status != "infeasible"
        assert omega.translate(x_k).contains(sol.x0, tol=1e-12)

    def test_empty_tightened_box_rejected(self):
        params, eq, target, mu = model_with_target(seed=44)
        huge = compute_rpi(params.lookback, 1, 1, 5.0)
        cfg = small_cfg()
        with pytest.raises(ConfigurationError):
            solve_tube_ocp(params, eq.x, eq.u, np.zeros(1), target, mu, huge, cfg)


class TestWarmStart:
    def test_shifted_sequence_feasible_next_step(self):
        params, eq, target, mu = model_with_target(seed=45)
        cfg = small_cfg(horizon=8)
        chi = AugmentedState(x=eq.x + 0.03, xi=eq.u.copy(), theta=np.zeros(1))
        sol = solve_nominal_ocp(params, chi, target, mu, cfg)
        assert sol.status != "infeasible"
        # undisturbed plant = model: next state is the one-step prediction
        chi_next = AugmentedState.from_vector(sol.chi_traj[1], params.state_dim, 1)
        shifted = np.concatenate([sol.v_seq[1:].ravel(), np.zeros(1)])
        from narxmpc.mpc import _OcpAssembler
        asm = _OcpAssembler(params, mu, target, cfg, chi_next.xi, chi_next.theta,
                            x0_fixed=chi_next.x, x0_box=None,
                            state_box=cfg.state_box(params.lookback, 1, 1))
        ev = asm.evaluate(shifted, False)
        assert float(np.max(np.abs(ev.c))) <= 1e-5
        assert float(np.max(np.clip(ev.h, 0, None))) <= 1e-9


class TestController:
    def test_plant_equals_model_holds_equilibrium(self):
        params, eq, target, mu = model_with_target(seed=46)
        cfg = small_cfg(horizon=6)
        ctl = Controller(params, SignalScaling.identity(1, 1), mu, cfg)
        N = params.lookback
        y0 = float(eq.y_target[0])
        u0 = float(eq.u[0])
        ctl.initialize(np.full((N, 1), y0), np.full((N, 1), u0), y0)
        x = eq.x.copy()
        for k in range(8):
            y_meas = x[(N - 1) * 2]
            u_k, rec, sol = ctl.step(y_meas, y0, t=float(k))
            assert rec.u == pytest.approx(u0, abs=1e-6)
            assert rec.v == pytest.approx(sol.v_seq[0, 0])
            x = step(params, x, np.atleast_1d(u_k))

    def test_receding_horizon_identity_and_log(self):
        params, eq, target, mu = model_with_target(seed=47)
        cfg = small_cfg(horizon=12)
        ctl = Controller(params, SignalScaling.identity(1, 1), mu, cfg)
        N = params.lookback
        ctl.initialize(np.full((N, 1), float(eq.y_target[0])),
                       np.full((N, 1), float(eq.u[0])), float(eq.y_target[0]))
        x = eq.x + 0.02
        for k in range(10):
            y_meas = x[(N - 1) * 2]
            u_k, rec, sol = ctl.step(y_meas, float(eq.y_target[0]), t=float(k))
            assert rec.feasible == 1
            # applied optimizer output is the first element of the sequence
            assert rec.v == pytest.approx(sol.v_seq[0, 0])
            # applied input reconstructs from the logged controller states
            u_expect = np.clip(rec.xi + rec.v - rec.theta, cfg.u_lo[0], cfg.u_hi[0])
            assert rec.u == pytest.approx(float(u_expect), abs=1e-12)
            x = step(params, x, np.atleast_1d(u_k))
        assert abs(x[(N - 1) * 2] - eq.y_target[0]) < 0.02


class TestDisturbanceBound:
    def test_model_as_its_own_plant(self):
        params = contractive_params(seed=48, N=2, hidden=(4,))
        scaling = SignalScaling.identity(1, 1)

        def rollout(u_batch):
            # start each trajectory in the constant regime of its first
            # input so the measured window determines the state exactly
            outs = []
            for r in range(u_batch.shape[0]):
                u = u_batch[r]
                y0 = reachable_output(params, u[0])
                x = equilibrium_state(y0, u[0], params.lookback)
                y = np.zeros((u.shape[0], 1))
                y[0] = y0
                for k in range(u.shape[0] - 1):
                    y[k + 1] = ffnn_eval(params, x, u[k])
                    x = step(params, x, u[k])
                outs.append(y)
            return np.stack(outs)

        w, w_phys = estimate_disturbance_bound(rollout, params, scaling,
                                               num_traj=3, traj_len=40, seed=5,
                                               input_bounds=(-0.5, 0.5))
        assert w <= 1e-12

    def test_max_is_monotone_in_trajectories(self):
        params = contractive_params(seed=49, N=2, hidden=(4,))
        scaling = SignalScaling.identity(1, 1)
        perturbed = params.copy()
        perturbed.b0 = perturbed.b0 + 0.01

        def rollout(u_batch):
            sy = np.zeros((u_batch.shape[0], u_batch.shape[1], 1))
            preds, _ = _batch_free_run(perturbed, u_batch, sy)
            out = np.zeros_like(sy)
            out[:, perturbed.lookback:] = preds
            return out

        w_small = estimate_disturbance_bound(rollout, params, scaling, 2, 30, 5,
                                             (-0.5, 0.5))[0]
        w_large = estimate_disturbance_bound(rollout, params, scaling, 6, 30, 5,
                                             (-0.5, 0.5))[0]
        assert w_large >= w_small
        assert w_small > 0
