"""Baseline offset-free controller with a constant output-disturbance model.

The model is augmented with a fictitious constant offset d on the output;
a moving-horizon least-squares fit estimates d from the recent window, the
steady-state target is shifted by the estimate, and a standard tracking
problem with a terminal pin drives the state there.  Because the model
state is just measured input-output history, the estimator only has to
produce d: the state needs no reconstruction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .mpc import OcpConfig, StepRecord
from .nnarx import (ModelParams, ffnn_eval, ffnn_jacobian, initial_state,
                    simulate, state_from_window, step)
from .offset_free import Equilibrium, find_equilibrium
from .nlp import NlpEval, NlpProblem, solve_nlp
from .scaling import SignalScaling


@dataclass
class DebAugmentedState:
    """Model state plus the constant output offset."""

    x: np.ndarray
    d: np.ndarray


def deb_step(params: ModelParams, s: DebAugmentedState, u):
    """(next state, measured output Cx + d); the offset is frozen."""
    N, m, p = params.lookback, params.input_dim, params.output_dim
    y = s.x[(N - 1) * (m + p):(N - 1) * (m + p) + p] + s.d
    x_next = step(params, s.x, u)
    return DebAugmentedState(x=x_next, d=s.d.copy()), y


def mhe_estimate(params: ModelParams, y_window, u_window, horizon: int,
                 prior_weight: float, d_prev=None):
    """Least-squares output-offset estimate over the last `horizon` samples.

    The model is propagated open loop from the head of the window; the
    offset minimizing sum ||y_j - y_model_j - d||^2 + prior ||d - d_prev||^2
    has the closed form of a weighted mean.  Returns (x_now, d_hat).
    """
    y_window = np.atleast_2d(np.asarray(y_window, dtype=float).T).T if np.ndim(y_window) == 1 else np.asarray(y_window, float)
    u_window = np.atleast_2d(np.asarray(u_window, dtype=float).T).T if np.ndim(u_window) == 1 else np.asarray(u_window, float)
    N, p = params.lookback, params.output_dim
    L = len(y_window)
    if horizon < 1:
        raise ValueError("estimation horizon must be >= 1")
    if L != len(u_window) or L < N + 1:
        raise ValueError(f"window must hold at least {N + 1} matched samples")
    d_prev = np.zeros(p) if d_prev is None else np.atleast_1d(np.asarray(d_prev, dtype=float))
    x = initial_state(u_window, y_window, N)
    preds = simulate(params, x, u_window[N - 1:L - 1])   # model outputs at times N..L-1
    resid = y_window[N:] - preds
    use = resid[-min(horizon, len(resid)):]
    d_hat = (use.sum(axis=0) + prior_weight * d_prev) / (len(use) + prior_weight)
    return d_hat


def deb_target(params: ModelParams, y_target, d_hat, guess_u=None,
               input_box=None) -> Equilibrium:
    """Equilibrium at the offset-corrected setpoint, so Cx + d = y_target."""
    y_target = np.atleast_1d(np.asarray(y_target, dtype=float))
    d_hat = np.atleast_1d(np.asarray(d_hat, dtype=float))
    return find_equilibrium(params, y_target - d_hat, guess_u=guess_u,
                            input_box=input_box)


class _DebOcp:
    """Tracking problem over the input sequence with a terminal state pin."""

    def __init__(self, params: ModelParams, x0, eq: Equilibrium, cfg: OcpConfig):
        self.params = params
        self.x0 = np.asarray(x0, dtype=float)
        self.eq = eq
        self.cfg = cfg
        N, m, p = params.lookback, params.input_dim, params.output_dim
        self.N, self.m, self.p = N, m, p
        self.n = params.state_dim
        self.blk = m + p
        self.Np = cfg.horizon
        self.n_vars = self.Np * m
        self.wx = np.sqrt(cfg.state_weights(N, m, p))
        self.wu = np.sqrt(np.full(m, cfg.r_u))

    def evaluate(self, z, with_jac: bool) -> NlpEval:
        par = self.params
        Np, n, m, blk = self.Np, self.n, self.m, self.blk
        u = z.reshape(Np, m)
        x = self.x0.copy()
        rows = (Np + 1) * (n + m)
        r = np.empty(rows)
        J = np.zeros((rows, self.n_vars)) if with_jac else None
        if with_jac:
            Tx = np.zeros((n, self.n_vars))
        pos = 0
        for i in range(Np):
            r[pos:pos + n] = self.wx * (x - self.eq.x)
            r[pos + n:pos + n + m] = self.wu * (u[i] - self.eq.u)
            if with_jac:
                J[pos:pos + n] = self.wx[:, None] * Tx
                J[pos + n:pos + n + m, i * m:(i + 1) * m] = np.diag(self.wu)
            pos += n + m
            eta = ffnn_eval(par, x, u[i])
            if with_jac:
                Jx, Ju = ffnn_jacobian(par, x, u[i])
                deta = Jx @ Tx
                deta[:, i * m:(i + 1) * m] += Ju
                Tx_new = np.empty_like(Tx)
                Tx_new[:n - blk] = Tx[blk:]
                Tx_new[n - blk:n - blk + self.p] = deta
                Tx_new[n - blk + self.p:] = 0.0
                Tx_new[n - blk + self.p:, i * m:(i + 1) * m] = np.eye(m)
                Tx = Tx_new
            x = np.concatenate([x[blk:], eta, u[i]])
        r[pos:pos + n] = self.wx * (x - self.eq.x)
        r[pos + n:pos + n + m] = self.wu * (u[-1] - self.eq.u)
        if with_jac:
            J[pos:pos + n] = self.wx[:, None] * Tx
            J[pos + n:pos + n + m, (Np - 1) * m:] = np.diag(self.wu)
        c = x - self.eq.x
        Jc = Tx if with_jac else None
        self._x_final = x
        return NlpEval(r=r, J=J, c=c, Jc=Jc)

    def problem(self) -> NlpProblem:
        lo = np.tile(self.cfg.u_lo, self.Np)
        hi = np.tile(self.cfg.u_hi, self.Np)
        return NlpProblem(n_vars=self.n_vars, evaluate=self.evaluate,
                          lower=lo, upper=hi)


class DebController:
    """Stateful baseline controller; same logging contract as the main one."""

    def __init__(self, params: ModelParams, scaling: SignalScaling,
                 cfg: OcpConfig, mhe_horizon: int = 10, prior_weight: float = 1.0):
        self.params = params
        self.scaling = scaling
        self.cfg = cfg
        self.mhe_horizon = mhe_horizon
        self.prior_weight = prior_weight
        N, m, p = params.lookback, params.input_dim, params.output_dim
        self.N, self.m, self.p = N, m, p
        self.window = N + mhe_horizon + 1
        self.y_hist: list = []
        self.u_hist: list = []
        self.d_hat = np.zeros(p)
        self.warm: np.ndarray | None = None
        self.k = 0
        self._penalty_warm: float | None = None

    def initialize(self, y_window, u_window, y_ref=None):
        y_window = np.atleast_2d(np.asarray(y_window, dtype=float).T).T if np.ndim(y_window) == 1 else np.asarray(y_window, float)
        u_window = np.atleast_2d(np.asarray(u_window, dtype=float).T).T if np.ndim(u_window) == 1 else np.asarray(u_window, float)
        self.y_hist = [self.scaling.scale_y(v) for v in y_window]
        self.u_hist = [self.scaling.scale_u(v) for v in u_window]
        self.d_hat = np.zeros(self.p)
        self.warm = None
        self.k = 0
        self._penalty_warm = None

    def step(self, y_measured, y_ref, t: float = None):
        y_ref = float(np.atleast_1d(y_ref)[0])
        y_meas_s = self.scaling.scale_y(np.atleast_1d(y_measured))
        self.y_hist.append(y_meas_s)
        self.y_hist = self.y_hist[-self.window:]
        x_k = state_from_window(np.array(self.y_hist[-self.N:]),
                                np.array(self.u_hist[-self.N:]))

        # estimator update once the window holds one full prediction;
        # u_hist entries end at their paired y instant, the estimator wants
        # rows (u_t applied during [t, t+1), y_t), so shift by one sample
        L = min(len(self.y_hist), len(self.u_hist))
        if L >= self.N + 1:
            u_arr = np.array(self.u_hist[-L:])
            u_rows = np.vstack([u_arr[1:], u_arr[-1:]])
            self.d_hat = mhe_estimate(self.params, np.array(self.y_hist[-L:]),
                                      u_rows, self.mhe_horizon,
                                      self.prior_weight, self.d_hat)

        y_ref_s = self.scaling.scale_y(np.atleast_1d(y_ref))
        eq = deb_target(self.params, y_ref_s, self.d_hat,
                        guess_u=self.warm[:self.m] if self.warm is not None else None,
                        input_box=(self.cfg.u_lo, self.cfg.u_hi))

        tic = time.perf_counter()
        ocp = _DebOcp(self.params, x_k, eq, self.cfg)
        z0 = self.warm if self.warm is not None else np.tile(eq.u, self.cfg.horizon)
        settings = self.cfg.nlp_settings()
        if self._penalty_warm is not None:
            settings.penalty_init = max(settings.penalty_init, self._penalty_warm)
        res = solve_nlp(ocp.problem(), z0, settings)
        solve_ms = (time.perf_counter() - tic) * 1000.0
        if res.history:
            self._penalty_warm = res.history[-1][0]

        feasible = res.status != "infeasible"
        u_plan = res.z.reshape(self.cfg.horizon, self.m)
        u_s = u_plan[0] if feasible else np.clip(eq.u, self.cfg.u_lo, self.cfg.u_hi)
        u_s = np.clip(u_s, self.cfg.u_lo, self.cfg.u_hi)
        u_phys = self.scaling.unscale_u(u_s)

        record = StepRecord(
            k=self.k,
            t=float(self.k if t is None else t),
            y_ref=y_ref,
            y_plant=float(np.atleast_1d(y_measured)[0]),
            y_nominal=float(np.atleast_1d(y_measured)[0]),
            u=float(np.atleast_1d(u_phys)[0]),
            v=float(u_s[0]),
            xi=0.0,
            theta=0.0,
            objective=res.objective,
            solver_status=res.status,
            solve_time_ms=solve_ms,
            feasible=int(feasible),
            d_hat=float(self.d_hat[0]),
        )

        self.u_hist.append(np.atleast_1d(u_s))
        self.u_hist = self.u_hist[-self.window:]
        self.warm = np.vstack([u_plan[1:], eq.u[None, :]]).ravel()
        self.k += 1
        return u_phys, record, res
