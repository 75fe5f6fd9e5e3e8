"""Optimal control problems and the receding-horizon controller.

Single-shooting transcription over the optimizer's output sequence (plus,
in tube mode, the free initial nominal state), with analytic sensitivities
chained through the horizon.  The terminal equality pins the augmented
state to its target; state and input boxes enter as inequality rows; the
tube variant tightens the state box by the invariant error set and lets
the initial nominal state float inside a box around the measurement.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, pontryagin_subtract
from .errors import ConfigurationError
from .nnarx import (ModelParams, ffnn_eval, ffnn_jacobian, u_slot_indices,
                    y_slot_indices, state_from_window)
from .offset_free import (AugmentedState, AugmentedTarget,
                          find_equilibrium, make_target)
from .nlp import NlpEval, NlpProblem, NlpResult, NlpSettings, solve_nlp
from .scaling import SignalScaling
from .training import _batch_free_run, generate_mprs


@dataclass
class OcpConfig:
    """Horizon, weights, constraint boxes (scaled units) and solver knobs."""

    horizon: int = 50
    r_e: float = 10.0
    r_u: float = 0.1
    q_xi: float = 1.0
    q_theta: float = 1e-5
    q_x: np.ndarray | None = None          # per-coordinate state weights
    u_lo: np.ndarray = field(default_factory=lambda: np.array([-1.0]))
    u_hi: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    x_lo: np.ndarray | None = None
    x_hi: np.ndarray | None = None
    terminal_tol: float = 1e-6
    penalty_init: float = 1e4
    max_outer: int = 24
    max_inner: int = 200
    grad_tol: float = 1e-9
    warm_start: str = "shift"              # shift | hold | cold

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.r_e <= 0 or self.q_xi <= 0:
            raise ValueError("output-error and integrator weights must be positive")
        if self.r_u < 0 or self.q_theta < 0:
            raise ValueError("weights must be nonnegative")
        self.u_lo = np.atleast_1d(np.asarray(self.u_lo, dtype=float))
        self.u_hi = np.atleast_1d(np.asarray(self.u_hi, dtype=float))
        if np.any(self.u_hi <= self.u_lo):
            raise ValueError("input box must have positive width")

    def state_weights(self, N: int, m: int, p: int) -> np.ndarray:
        if self.q_x is not None:
            return np.asarray(self.q_x, dtype=float)
        w = np.empty(N * (m + p))
        w[y_slot_indices(N, m, p)] = self.r_e
        w[u_slot_indices(N, m, p)] = self.r_u
        return w

    def state_box(self, N: int, m: int, p: int) -> Box:
        if self.x_lo is not None and self.x_hi is not None:
            return Box(self.x_lo, self.x_hi)
        return default_state_box(N, m, p, self.u_lo, self.u_hi)

    def nlp_settings(self) -> NlpSettings:
        return NlpSettings(penalty_init=self.penalty_init,
                           constraint_tol=self.terminal_tol,
                           max_outer=self.max_outer,
                           max_inner=self.max_inner,
                           grad_tol=self.grad_tol)


def default_state_box(N: int, m: int, p: int, u_lo, u_hi,
                      y_margin: float = 1.1) -> Box:
    """Output slots span the trained range widened 10%, input slots the
    input box; everything in scaled units where the data maps to [-1, 1]."""
    n = N * (m + p)
    lo = np.empty(n)
    hi = np.empty(n)
    ys = y_slot_indices(N, m, p).reshape(N, p)
    us = u_slot_indices(N, m, p).reshape(N, m)
    for i in range(N):
        lo[ys[i]] = -y_margin
        hi[ys[i]] = y_margin
        lo[us[i]] = u_lo
        hi[us[i]] = u_hi
    return Box(lo, hi)


@dataclass
class OcpSolution:
    v_seq: np.ndarray                 # (horizon, m)
    x0: np.ndarray | None             # chosen initial nominal state (tube)
    chi_traj: np.ndarray              # (horizon+1, n+2m)
    zeta_traj: np.ndarray             # (horizon+1, p+m), last row held
    objective: float
    status: str
    eq_residual: float
    iterations: int
    solve_time_ms: float = 0.0
    final_penalty: float = 0.0


class _OcpAssembler:
    """Shared rollout/sensitivity machinery behind both OCP variants."""

    def __init__(self, params: ModelParams, mu: np.ndarray, target: AugmentedTarget,
                 cfg: OcpConfig, xi0: np.ndarray, theta0: np.ndarray,
                 x0_fixed: np.ndarray | None, x0_box: Box | None,
                 state_box: Box):
        self.params = params
        self.mu = np.atleast_2d(np.asarray(mu, dtype=float))
        self.target = target
        self.cfg = cfg
        self.xi0 = np.atleast_1d(xi0).astype(float)
        self.theta0 = np.atleast_1d(theta0).astype(float)
        self.x0_fixed = x0_fixed
        self.x0_box = x0_box
        self.state_box = state_box
        N, m, p = params.lookback, params.input_dim, params.output_dim
        self.N, self.m, self.p = N, m, p
        self.n = params.state_dim
        self.blk = m + p
        self.Np = cfg.horizon
        self.n_v = self.Np * m
        self.n_vars = self.n_v + (0 if x0_fixed is not None else self.n)
        self.wq = np.sqrt(np.concatenate([cfg.state_weights(N, m, p),
                                          np.full(m, cfg.q_xi),
                                          np.full(m, cfg.q_theta)]))
        self.wr = np.sqrt(np.concatenate([np.full(p, cfg.r_e), np.full(m, cfg.r_u)]))
        self.y_base = (N - 1) * self.blk

    # decision layout: [v_0, ..., v_{Np-1}, (x0)]
    def split(self, z):
        v = z[:self.n_v].reshape(self.Np, self.m)
        x0 = self.x0_fixed if self.x0_fixed is not None else z[self.n_v:]
        return v, x0

    def bounds(self):
        lo = np.full(self.n_vars, -np.inf)
        hi = np.full(self.n_vars, np.inf)
        if self.x0_fixed is None:
            lo[self.n_v:] = self.x0_box.lo
            hi[self.n_v:] = self.x0_box.hi
        return lo, hi

    def evaluate(self, z, with_jac: bool) -> NlpEval:
        par, cfg = self.params, self.cfg
        N, m, p, n, blk, Np = self.N, self.m, self.p, self.n, self.blk, self.Np
        v, x0 = self.split(z)
        y_ref = self.target.eq.y_target
        chi_bar = self.target.chi
        zeta_bar = self.target.zeta

        x, xi, th = np.asarray(x0, dtype=float), self.xi0.copy(), self.theta0.copy()
        dim_chi = n + 2 * m
        rows_stage = (Np + 1) * (dim_chi + p + m)
        r = np.empty(rows_stage)
        J = np.zeros((rows_stage, self.n_vars)) if with_jac else None
        n_ineq = Np * 2 * (n + m)
        h = np.empty(n_ineq)
        Jh = np.zeros((n_ineq, self.n_vars)) if with_jac else None

        if with_jac:
            Tx = np.zeros((n, self.n_vars))
            if self.x0_fixed is None:
                Tx[:, self.n_v:] = np.eye(n)
            Txi = np.zeros((m, self.n_vars))
            Tth = np.zeros((m, self.n_vars))

        chi_traj = np.empty((Np + 1, dim_chi))
        zeta_traj = np.empty((Np + 1, p + m))
        pos = 0
        pos_h = 0
        last_zeta_rows = None
        for i in range(Np):
            u_i = xi + v[i] - th
            y_i = x[self.y_base:self.y_base + p]
            chi_traj[i] = np.concatenate([x, xi, th])
            zeta = np.concatenate([y_i, u_i])
            zeta_traj[i] = zeta
            # stage residuals
            r[pos:pos + dim_chi] = self.wq * (chi_traj[i] - chi_bar)
            r[pos + dim_chi:pos + dim_chi + p + m] = self.wr * (zeta - zeta_bar)
            if with_jac:
                dy = Tx[self.y_base:self.y_base + p]
                du = Txi - Tth
                cols = slice(i * m, (i + 1) * m)
                Tchi = np.vstack([Tx, Txi, Tth])
                J[pos:pos + dim_chi] = self.wq[:, None] * Tchi
                Jz_top = self.wr[:p, None] * dy
                Jz_bot = self.wr[p:, None] * du
                J[pos + dim_chi:pos + dim_chi + p] = Jz_top
                J[pos + dim_chi + p:pos + dim_chi + p + m] = Jz_bot
                J[pos + dim_chi + p:pos + dim_chi + p + m, cols] += np.diag(self.wr[p:])
                last_zeta_rows = (np.vstack([Jz_top, Jz_bot]).copy(), cols)
            pos += dim_chi + p + m
            # inequality rows: state box then input box (both directions)
            h[pos_h:pos_h + n] = x - self.state_box.hi
            h[pos_h + n:pos_h + 2 * n] = self.state_box.lo - x
            h[pos_h + 2 * n:pos_h + 2 * n + m] = u_i - cfg.u_hi
            h[pos_h + 2 * n + m:pos_h + 2 * n + 2 * m] = cfg.u_lo - u_i
            if with_jac:
                Jh[pos_h:pos_h + n] = Tx
                Jh[pos_h + n:pos_h + 2 * n] = -Tx
                du_full = du.copy()
                du_full[:, cols] += np.eye(m)
                Jh[pos_h + 2 * n:pos_h + 2 * n + m] = du_full
                Jh[pos_h + 2 * n + m:pos_h + 2 * n + 2 * m] = -du_full
            pos_h += 2 * (n + m)
            # dynamics
            eta = ffnn_eval(par, x, u_i)
            if with_jac:
                Jx_eta, Ju_eta = ffnn_jacobian(par, x, u_i)
                du_full = (Txi - Tth)
                deta = Jx_eta @ Tx + Ju_eta @ du_full
                deta[:, cols] += Ju_eta
                Tx_new = np.empty_like(Tx)
                Tx_new[:n - blk] = Tx[blk:]
                Tx_new[n - blk:n - blk + p] = deta
                Tx_new[n - blk + p:] = du_full
                Tx_new[n - blk + p:, cols] += np.eye(m)
                Txi = Txi - self.mu @ Tx[self.y_base:self.y_base + p]
                Tx = Tx_new
                Tth = np.zeros((m, self.n_vars))
                Tth[:, cols] = np.eye(m)
            xi = xi + self.mu @ (y_ref - y_i)
            x = np.concatenate([x[blk:], eta, u_i])
            th = v[i].copy()
        # terminal stage: state cost plus the last output cost held
        chi_traj[Np] = np.concatenate([x, xi, th])
        zeta_traj[Np] = zeta_traj[Np - 1]
        r[pos:pos + dim_chi] = self.wq * (chi_traj[Np] - chi_bar)
        r[pos + dim_chi:pos + dim_chi + p + m] = self.wr * (zeta_traj[Np] - zeta_bar)
        if with_jac:
            Tchi = np.vstack([Tx, Txi, Tth])
            J[pos:pos + dim_chi] = self.wq[:, None] * Tchi
            Jz, cols = last_zeta_rows
            J[pos + dim_chi:pos + dim_chi + p + m] = Jz
            J[pos + dim_chi + p:pos + dim_chi + p + m, cols] += np.diag(self.wr[p:])
        c = chi_traj[Np] - chi_bar
        Jc = np.vstack([Tx, Txi, Tth]) if with_jac else None
        self._last_traj = (chi_traj, zeta_traj)
        return NlpEval(r=r, J=J, c=c, Jc=Jc, h=h, Jh=Jh)

    def problem(self) -> NlpProblem:
        lo, hi = self.bounds()
        return NlpProblem(n_vars=self.n_vars, evaluate=self.evaluate,
                          lower=lo, upper=hi)

    def decode(self, result: NlpResult) -> OcpSolution:
        v, x0 = self.split(result.z)
        self.evaluate(result.z, False)
        chi_traj, zeta_traj = self._last_traj
        return OcpSolution(
            v_seq=v.copy(),
            x0=None if self.x0_fixed is not None else np.asarray(x0).copy(),
            chi_traj=chi_traj,
            zeta_traj=zeta_traj,
            objective=result.objective,
            status=result.status,
            eq_residual=result.eq_residual,
            iterations=result.inner_iterations,
            final_penalty=result.history[-1][0] if result.history else 0.0,
        )


def _default_warm(Np: int, m: int) -> np.ndarray:
    return np.zeros(Np * m)


def solve_nominal_ocp(params: ModelParams, chi_k: AugmentedState,
                      target: AugmentedTarget, mu, cfg: OcpConfig,
                      warm_start: np.ndarray | None = None,
                      penalty_start: float | None = None) -> OcpSolution:
    """Tracking problem with the initial augmented state fixed to chi_k."""
    asm = _OcpAssembler(params, mu, target, cfg, chi_k.xi, chi_k.theta,
                        x0_fixed=np.asarray(chi_k.x, dtype=float),
                        x0_box=None, state_box=cfg.state_box(
                            params.lookback, params.input_dim, params.output_dim))
    z0 = warm_start if warm_start is not None else _default_warm(cfg.horizon, params.input_dim)
    settings = cfg.nlp_settings()
    if penalty_start is not None:
        settings.penalty_init = max(settings.penalty_init, penalty_start)
    res = solve_nlp(asm.problem(), z0, settings)
    return asm.decode(res)


def solve_tube_ocp(params: ModelParams, x_k: np.ndarray, xi_k, theta_k,
                   target: AugmentedTarget, mu, omega: Box, cfg: OcpConfig,
                   warm_start: np.ndarray | None = None,
                   penalty_start: float | None = None) -> OcpSolution:
    """Robust variant: initial nominal state floats in a box around x_k and
    the state constraint is tightened by the invariant error set."""
    N, m, p = params.lookback, params.input_dim, params.output_dim
    state_box = cfg.state_box(N, m, p)
    tightened = pontryagin_subtract(state_box, omega)
    if tightened.is_empty:
        raise ConfigurationError("tightened state box is empty; the disturbance "
                                 "bound exceeds the state constraint width")
    x_k = np.asarray(x_k, dtype=float)
    asm = _OcpAssembler(params, mu, target, cfg, xi_k, theta_k,
                        x0_fixed=None, x0_box=omega.translate(x_k),
                        state_box=tightened)
    if warm_start is None:
        z0 = np.concatenate([_default_warm(cfg.horizon, m), x_k])
    elif warm_start.shape[0] == asm.n_vars:
        z0 = warm_start
    else:
        z0 = np.concatenate([warm_start, x_k])
    settings = cfg.nlp_settings()
    if penalty_start is not None:
        settings.penalty_init = max(settings.penalty_init, penalty_start)
    res = solve_nlp(asm.problem(), z0, settings)
    return asm.decode(res)


# ----------------------------------------------------------------------
# Disturbance-bound estimation
# ----------------------------------------------------------------------

def estimate_disturbance_bound(plant_rollout, params: ModelParams,
                               scaling: SignalScaling, num_traj: int,
                               traj_len: int, seed: int, input_bounds,
                               levels: int = 12, dwell=(5, 30)):
    """Worst open-loop output mismatch between plant and model.

    plant_rollout maps a batch of physical input trajectories (R, T, m) to
    the measured outputs (R, T, p).  Both simulations start from the same
    measured initial window; the bound is the max absolute error in scaled
    units.  Returns (w_scaled, w_physical_per_output).
    """
    if num_traj < 1 or traj_len < params.lookback + 2:
        raise ValueError("need num_traj >= 1 and traj_len > lookback + 1")
    m = params.input_dim
    u_batch = np.stack([
        generate_mprs(levels, dwell, traj_len, input_bounds, seed + 1000 * i)
        for i in range(num_traj)
    ])
    y_batch = plant_rollout(u_batch)
    if y_batch.ndim == 2:
        y_batch = y_batch[:, :, None]
    su = scaling.scale_u(u_batch)
    sy = scaling.scale_y(y_batch)
    preds, _ = _batch_free_run(params, su, sy)
    err = np.abs(preds - sy[:, params.lookback:])
    w_scaled = float(np.max(err))
    return w_scaled, w_scaled * scaling.y_half


# ----------------------------------------------------------------------
# Receding-horizon controller
# ----------------------------------------------------------------------

@dataclass
class StepRecord:
    """One closed-loop log row (physical y/u; controller states scaled)."""

    k: int
    t: float
    y_ref: float
    y_plant: float
    y_nominal: float
    u: float
    v: float
    xi: float
    theta: float
    objective: float
    solver_status: str
    solve_time_ms: float
    feasible: int
    d_hat: float | None = None


class Controller:
    """Stateful offset-free MPC: integrator + difference block + OCP.

    One logical thread of execution; distinct instances are independent.
    External units are physical, everything inside is scaled.
    """

    def __init__(self, params: ModelParams, scaling: SignalScaling, mu,
                 cfg: OcpConfig, mode: str = "nominal", omega: Box | None = None):
        if mode not in ("nominal", "tube"):
            raise ValueError("mode must be 'nominal' or 'tube'")
        if mode == "tube" and omega is None:
            raise ValueError("tube mode needs the invariant error set")
        self.params = params
        self.scaling = scaling
        self.mu = np.atleast_2d(np.asarray(mu, dtype=float))
        self.cfg = cfg
        self.mode = mode
        self.omega = omega
        N, m, p = params.lookback, params.input_dim, params.output_dim
        self.N, self.m, self.p = N, m, p
        self.y_hist: list[np.ndarray] = []
        self.u_hist: list[np.ndarray] = []
        self.xi = np.zeros(m)
        self.theta = np.zeros(m)
        self.warm: np.ndarray | None = None
        self.k = 0
        self._targets: dict[tuple, AugmentedTarget] = {}
        self._last_solution: OcpSolution | None = None
        self._penalty_warm: float | None = None
        if mode == "tube":
            # fail fast if the tube eats the whole state box
            tight = pontryagin_subtract(cfg.state_box(N, m, p), omega)
            if tight.is_empty:
                raise ConfigurationError("tightened state box is empty")

    def initialize(self, y_window, u_window, y_ref):
        """Seed the history with N past (y, u) pairs and set the integrator
        to the model's equilibrium input for the initial reference."""
        y_window = np.atleast_2d(np.asarray(y_window, dtype=float).T).T if np.ndim(y_window) == 1 else np.asarray(y_window, float)
        u_window = np.atleast_2d(np.asarray(u_window, dtype=float).T).T if np.ndim(u_window) == 1 else np.asarray(u_window, float)
        if len(y_window) != self.N or len(u_window) != self.N:
            raise ValueError(f"need exactly {self.N} past samples")
        self.y_hist = [self.scaling.scale_y(v) for v in y_window]
        self.u_hist = [self.scaling.scale_u(v) for v in u_window]
        target = self._target_for(float(np.atleast_1d(y_ref)[0]))
        self.xi = target.eq.u.copy()
        self.theta = np.zeros(self.m)
        self.warm = None
        self.k = 0
        self._penalty_warm = None

    def _target_for(self, y_ref_physical: float) -> AugmentedTarget:
        key = (round(y_ref_physical, 9),)
        if key not in self._targets:
            y_s = self.scaling.scale_y(np.atleast_1d(y_ref_physical))
            guess = self.xi if np.any(self.xi) else None
            eq = find_equilibrium(self.params, y_s, guess_u=guess,
                                  input_box=(self.cfg.u_lo, self.cfg.u_hi),
                                  output_range=(-np.ones(self.p), np.ones(self.p)))
            self._targets[key] = make_target(self.params, eq)
        return self._targets[key]

    def step(self, y_measured, y_ref, t: float = None):
        """One online iteration; returns (applied physical input, record)."""
        y_ref = float(np.atleast_1d(y_ref)[0])
        y_meas_s = self.scaling.scale_y(np.atleast_1d(y_measured))
        self.y_hist.append(y_meas_s)
        self.y_hist = self.y_hist[-self.N:]
        x_k = state_from_window(np.array(self.y_hist), np.array(self.u_hist))
        target = self._target_for(y_ref)

        tic = time.perf_counter()
        if self.mode == "nominal":
            sol = solve_nominal_ocp(self.params, AugmentedState(x_k, self.xi, self.theta),
                                    target, self.mu, self.cfg, warm_start=self.warm,
                                    penalty_start=self._penalty_warm)
        else:
            sol = solve_tube_ocp(self.params, x_k, self.xi, self.theta,
                                 target, self.mu, self.omega, self.cfg,
                                 warm_start=self.warm,
                                 penalty_start=self._penalty_warm)
        solve_ms = (time.perf_counter() - tic) * 1000.0
        self._penalty_warm = sol.final_penalty

        feasible = sol.status != "infeasible"
        if feasible:
            v = sol.v_seq[0].copy()
        else:
            v = self.theta.copy()   # hold the difference block: pure integral action
        u_s = np.clip(self.xi + v - self.theta, self.cfg.u_lo, self.cfg.u_hi)
        u_phys = self.scaling.unscale_u(u_s)

        if self.mode == "tube" and feasible:
            y_nom_s = sol.x0[(self.N - 1) * (self.m + self.p)]
            y_nominal = float(self.scaling.unscale_y(np.atleast_1d(y_nom_s))[0])
        else:
            y_nominal = float(np.atleast_1d(y_measured)[0])

        record = StepRecord(
            k=self.k,
            t=float(self.k if t is None else t),
            y_ref=y_ref,
            y_plant=float(np.atleast_1d(y_measured)[0]),
            y_nominal=y_nominal,
            u=float(np.atleast_1d(u_phys)[0]),
            v=float(v[0]),
            xi=float(self.xi[0]),
            theta=float(self.theta[0]),
            objective=sol.objective,
            solver_status=sol.status,
            solve_time_ms=solve_ms,
            feasible=int(feasible),
        )

        # advance the controller memory (integrator uses the measured output)
        self.xi = self.xi + self.mu @ (target.eq.y_target - y_meas_s)
        self.theta = v
        self.u_hist.append(np.atleast_1d(u_s))
        self.u_hist = self.u_hist[-self.N:]
        self._last_solution = sol
        self.warm = self._next_warm(sol, feasible)
        self.k += 1
        return u_phys, record, sol

    def _next_warm(self, sol: OcpSolution, feasible: bool):
        if self.cfg.warm_start == "cold":
            return None
        if self.cfg.warm_start == "hold" and self.warm is not None:
            return self.warm
        v_shift = np.vstack([sol.v_seq[1:], np.zeros((1, self.m))]).ravel()
        if self.mode == "nominal":
            return v_shift
        x0_next = sol.chi_traj[1][:self.params.state_dim]
        return np.concatenate([v_shift, x0_next])
