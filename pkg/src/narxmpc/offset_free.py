"""Offset-free control structure around the learned model.

An integrator on the output tracking error plus a first-difference block on
the optimizer's output wrap the model into an augmented system whose
steady state pins the tracking error to zero.  This module provides the
equilibrium solver, the linearization-based stability checks, the
integrator-gain synthesis, and the augmented one-step dynamics.

All quantities live in the model's scaled units.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (EquilibriumNotFound, InfeasibleEquilibrium, InvalidPlant,
                     NumericalFailure, SynthesisFailure)
from .nnarx import (ModelParams, build_structural_matrices, ffnn_eval,
                    ffnn_jacobian, jacobians, step)


@dataclass(frozen=True)
class Equilibrium:
    """Fixed point of the model transition with prescribed output."""

    x: np.ndarray
    u: np.ndarray
    y_target: np.ndarray
    residual: float


def equilibrium_state(y_target, u_bar, lookback: int) -> np.ndarray:
    """State of a constant regime: every block holds (y_target, u_bar)."""
    y_target = np.atleast_1d(np.asarray(y_target, dtype=float))
    u_bar = np.atleast_1d(np.asarray(u_bar, dtype=float))
    return np.tile(np.concatenate([y_target, u_bar]), lookback)


def _u_injection(N: int, m: int, p: int) -> np.ndarray:
    """d(equilibrium state)/d(u_bar): identity into every input slot."""
    blk = m + p
    S = np.zeros((N * blk, m))
    for i in range(N):
        S[i * blk + p:(i + 1) * blk, :] = np.eye(m)
    return S


def find_equilibrium(params: ModelParams, y_target, guess_u=None,
                     input_box=None, output_range=None,
                     tol: float = 1e-10, max_iter: int = 100) -> Equilibrium:
    """Solve for the input sustaining a constant output y_target.

    The autoregressive structure collapses the n-dimensional fixed-point
    condition to m equations in u alone: with every past sample pinned to
    (y_target, u), only eta(x(u), u) = y_target remains.  Damped Newton
    with the analytic Jacobian.
    """
    N, m, p = params.lookback, params.input_dim, params.output_dim
    y_target = np.atleast_1d(np.asarray(y_target, dtype=float))
    if output_range is not None:
        lo, hi = output_range
        if np.any(y_target < lo) or np.any(y_target > hi):
            warnings.warn("setpoint outside the trained output range; extrapolating",
                          stacklevel=2)
    u = np.zeros(m) if guess_u is None else np.atleast_1d(np.asarray(guess_u, dtype=float)).copy()
    S_u = _u_injection(N, m, p)

    def residual(u_val):
        x = equilibrium_state(y_target, u_val, N)
        return ffnn_eval(params, x, u_val) - y_target, x

    g, x = residual(u)
    norm_g = float(np.linalg.norm(g, np.inf))
    for _ in range(max_iter):
        if norm_g <= tol:
            break
        Jx, Ju = ffnn_jacobian(params, x, u)
        J = Jx @ S_u + Ju
        try:
            du = np.linalg.solve(J, -g)
        except np.linalg.LinAlgError as exc:
            raise EquilibriumNotFound(f"singular equilibrium Jacobian: {exc}") from exc
        scale = 1.0
        while scale >= 1e-8:
            g_new, x_new = residual(u + scale * du)
            if float(np.linalg.norm(g_new, np.inf)) < norm_g:
                break
            scale *= 0.5
        u = u + scale * du
        g, x = residual(u)
        norm_g = float(np.linalg.norm(g, np.inf))
    if norm_g > tol:
        raise EquilibriumNotFound(
            f"no equilibrium for target {y_target}: residual {norm_g:.3e} after {max_iter} iterations")
    if input_box is not None:
        lo, hi = input_box
        if np.any(u < np.asarray(lo) - 1e-9) or np.any(u > np.asarray(hi) + 1e-9):
            raise InfeasibleEquilibrium(
                f"equilibrium input {u} violates the input constraints {input_box}")
    return Equilibrium(x=equilibrium_state(y_target, u, N), u=u,
                       y_target=y_target, residual=norm_g)


def linearize_at(params: ModelParams, eq: Equilibrium):
    """Transition Jacobians at the equilibrium point."""
    return jacobians(params, eq.x, eq.u)


def schur_check(A: np.ndarray):
    """(is_schur, spectral_radius) with a strict 1 - 1e-9 threshold."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    try:
        radius = float(np.max(np.abs(np.linalg.eigvals(A))))
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigenvalue computation failed: {exc}") from exc
    return radius < 1.0 - 1e-9, radius


def integrator_gain(A_delta: np.ndarray, B_delta: np.ndarray, C: np.ndarray,
                    mu_hat: float) -> np.ndarray:
    """Gain mu_hat * inverse(DC gain) of the linearized model."""
    n = A_delta.shape[0]
    try:
        X = np.linalg.solve(np.eye(n) - A_delta, B_delta)
    except np.linalg.LinAlgError as exc:
        raise InvalidPlant(f"I - A_delta is singular: {exc}") from exc
    G = C @ X
    if np.linalg.cond(G) > 1e12:
        raise InvalidPlant("DC gain is singular (invariant zero at 1)")
    return mu_hat * np.linalg.inv(G)


def integral_loop_matrix(A_delta: np.ndarray, B_delta: np.ndarray, C: np.ndarray,
                         mu: np.ndarray) -> np.ndarray:
    """Linearized (x, xi) closed loop under pure integral action.

    With the optimizer output frozen at the difference-block state the
    correction term vanishes, u = xi, and the difference block decouples,
    so only this sub-map decides local stability.
    """
    n, m = B_delta.shape
    top = np.hstack([A_delta, B_delta])
    bot = np.hstack([-np.asarray(mu) @ C, np.eye(m)])
    return np.vstack([top, bot])


def mu_max_linear(A_delta: np.ndarray, B_delta: np.ndarray, C: np.ndarray,
                  resolution: float = 1e-3, cap: float = 1.0) -> float:
    """Largest stable normalized integrator gain for a linear model.

    Bisection: each candidate is renormalized through the DC gain and the
    spectral radius of the integral loop is tested strictly below one.
    """

    def stable(mu_hat: float) -> bool:
        mu = integrator_gain(A_delta, B_delta, C, mu_hat)
        ok, _ = schur_check(integral_loop_matrix(A_delta, B_delta, C, mu))
        return ok

    if stable(cap):
        return cap
    lo = cap / 2.0
    while not stable(lo):
        lo /= 2.0
        if lo < 1e-6:
            raise SynthesisFailure("no stable integrator gain found down to 1e-6")
    hi = min(2.0 * lo, cap)
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if stable(mid):
            lo = mid
        else:
            hi = mid
    return lo


def estimate_mu_max(params: ModelParams, eq: Equilibrium,
                    resolution: float = 1e-3, cap: float = 1.0) -> float:
    """mu_max_linear applied to the model linearized at the equilibrium."""
    A_d, B_d = linearize_at(params, eq)
    S = build_structural_matrices(params.lookback, params.input_dim, params.output_dim)
    return mu_max_linear(A_d, B_d, S.C, resolution=resolution, cap=cap)


# ----------------------------------------------------------------------
# Augmented system
# ----------------------------------------------------------------------

@dataclass
class AugmentedState:
    """(model state, integrator state, difference-block memory)."""

    x: np.ndarray
    xi: np.ndarray
    theta: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.xi, self.theta])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n: int, m: int) -> "AugmentedState":
        vec = np.asarray(vec, dtype=float)
        return cls(x=vec[:n].copy(), xi=vec[n:n + m].copy(), theta=vec[n + m:n + 2 * m].copy())


def selectors(n: int, m: int):
    """Extraction matrices (S_x, S_xi, S_theta) for the augmented state."""
    dim = n + 2 * m
    S_x = np.zeros((n, dim))
    S_x[:, :n] = np.eye(n)
    S_xi = np.zeros((m, dim))
    S_xi[:, n:n + m] = np.eye(m)
    S_th = np.zeros((m, dim))
    S_th[:, n + m:] = np.eye(m)
    return S_x, S_xi, S_th


@dataclass(frozen=True)
class AugmentedTarget:
    """Steady target of the augmented system for a given setpoint.

    At the target the correction term is zero and the integrator carries
    the whole input, so chi = (x_eq, u_eq, 0) with optimizer target v = 0.
    """

    eq: Equilibrium
    chi: np.ndarray
    v: np.ndarray
    zeta: np.ndarray


def make_target(params: ModelParams, eq: Equilibrium) -> AugmentedTarget:
    m = params.input_dim
    chi = np.concatenate([eq.x, eq.u, np.zeros(m)])
    return AugmentedTarget(eq=eq, chi=chi, v=np.zeros(m),
                           zeta=np.concatenate([eq.y_target, eq.u]))


def augmented_step(params: ModelParams, chi: AugmentedState, v, y_target, mu):
    """One step of the augmented dynamics; returns (chi_next, zeta).

    u = xi + (v - theta); the integrator accumulates the output error and
    the difference block memorizes v.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    y_target = np.atleast_1d(np.asarray(y_target, dtype=float))
    N, m, p = params.lookback, params.input_dim, params.output_dim
    u = chi.xi + v - chi.theta
    y = chi.x[(N - 1) * (m + p):(N - 1) * (m + p) + p]
    x_next = step(params, chi.x, u)
    xi_next = chi.xi + np.asarray(mu) @ (y_target - y)
    chi_next = AugmentedState(x=x_next, xi=xi_next, theta=v.copy())
    zeta = np.concatenate([y, u])
    return chi_next, zeta


def export_equilibrium_table(params: ModelParams, y_values, path,
                             guess_u=None, input_box=None):
    """CSV of setpoint, input, residual and local spectral radius."""
    with open(path, "w") as fh:
        fh.write("y_target,u_eq,residual,spectral_radius\n")
        u = guess_u
        for y in y_values:
            eq = find_equilibrium(params, y, guess_u=u, input_box=input_box)
            u = eq.u
            _, radius = schur_check(linearize_at(params, eq)[0])
            fh.write(f"{float(np.atleast_1d(y)[0])!r},{float(eq.u[0])!r},"
                     f"{eq.residual!r},{radius!r}\n")
