"""Water-heating benchmark plant.

A gas burner heats a metal plate which heats the water in a constant-level
tank; the controlled output is the outlet water temperature T, the input is
the gas flow rate w_c, and the inlet temperature T_i and water flow rate w
act as disturbances.  Continuous-time energy balances, integrated with a
fixed-step classical Runge-Kutta scheme and a zero-order hold on inputs.

All routines accept floats or equally shaped numpy arrays for the state,
so batches of independent trajectories can be integrated in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationFailure


@dataclass(frozen=True)
class PlantParams:
    """Physical parameters; defaults are the benchmark values."""

    a_t: float = math.pi / 4.0          # tank cross-section [m^2]
    rho_w: float = 997.8                # water density [kg/m^3]
    c_w: float = 4180.0                 # water specific heat [J/(kg K)]
    m_m: float = 617.32                 # metal plate mass [kg]
    c_m: float = 481.0                  # metal specific heat [J/(kg K)]
    sigma_rad: float = 5.67e-8          # radiation coefficient [W/(m^2 K^4)]
    k_lm: float = 3326.4                # metal-water heat exchange [kg/(s^3 K)]
    t_flame: float = 1200.0             # flame temperature [K]
    k_f: float = 8.0                    # flame-metal heat exchange [m^2 s/kg]
    z_w: float = 2.0                    # water level [m]
    w_nom: float = 1.0                  # nominal water flow rate [kg/s]
    t_in_nom: float = 298.0             # nominal inlet temperature [K]

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValueError(f"plant parameter {name} must be positive")


def _deriv(T, Tm, wc, Ti, w, pp: PlantParams):
    dT = (w * (Ti - T) + pp.k_lm * pp.a_t / pp.c_w * (Tm - T)) / (pp.rho_w * pp.a_t * pp.z_w)
    dTm = (-pp.k_lm * pp.a_t * (Tm - T)
           + pp.sigma_rad * pp.k_f * wc * (pp.t_flame ** 4 - Tm ** 4)) / (pp.m_m * pp.c_m)
    return dT, dTm


def plant_deriv(state, wc, d, params: PlantParams = PlantParams()):
    """Right-hand side (dT/dt, dTm/dt) of the energy balances.

    state = (T, Tm), d = (T_i, w).  Raises ValueError on nonpositive
    absolute temperatures.
    """
    T, Tm = state
    Ti, w = d
    if np.any(np.asarray(T) <= 0) or np.any(np.asarray(Tm) <= 0):
        raise ValueError("temperatures must be positive")
    return _deriv(T, Tm, wc, Ti, w, params)


def step_rk4(state, wc, d, dt: float, substeps: int = 1, params: PlantParams = PlantParams()):
    """Advance the plant by dt seconds with input and disturbance held.

    Classical RK4 with internal step dt/substeps.
    """
    if dt <= 0 or substeps < 1:
        raise ValueError("dt must be positive and substeps >= 1")
    T, Tm = state
    Ti, w = d
    h = dt / substeps
    for _ in range(substeps):
        k1T, k1M = _deriv(T, Tm, wc, Ti, w, params)
        k2T, k2M = _deriv(T + 0.5 * h * k1T, Tm + 0.5 * h * k1M, wc, Ti, w, params)
        k3T, k3M = _deriv(T + 0.5 * h * k2T, Tm + 0.5 * h * k2M, wc, Ti, w, params)
        k4T, k4M = _deriv(T + h * k3T, Tm + h * k3M, wc, Ti, w, params)
        T = T + h / 6.0 * (k1T + 2.0 * k2T + 2.0 * k3T + k4T)
        Tm = Tm + h / 6.0 * (k1M + 2.0 * k2M + 2.0 * k3M + k4M)
    if np.any(np.asarray(T) <= 0) or np.any(np.asarray(Tm) <= 0):
        raise IntegrationFailure("plant state left the positive-temperature region")
    return T, Tm


def simulate_plant(x0, u_seq, d_seq, tau_s: float, substeps: int = 120,
                   params: PlantParams = PlantParams()):
    """Sampled state trajectory (T_k, Tm_k) at instants k = 0..K-1.

    u_seq has K rows (scalars or batch arrays); sample k is taken before
    input k acts, so the row-k state is the plant state at time k * tau_s.
    d_seq rows are (T_i, w) pairs, matched to u_seq.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    d_seq = np.asarray(d_seq, dtype=float)
    if len(u_seq) != len(d_seq):
        raise ValueError("input and disturbance sequences must have equal length")
    T, Tm = x0
    T_out, Tm_out = [], []
    for k in range(len(u_seq)):
        T_out.append(np.array(T, dtype=float, copy=True))
        Tm_out.append(np.array(Tm, dtype=float, copy=True))
        T, Tm = step_rk4((T, Tm), u_seq[k], (d_seq[k][0], d_seq[k][1]), tau_s, substeps, params)
    return np.array(T_out), np.array(Tm_out)


def sample_trajectory(x0, u_seq, d_seq, tau_s: float, substeps: int = 120,
                      params: PlantParams = PlantParams()) -> np.ndarray:
    """Measured output sequence y_k = T_k; length equals the input length."""
    if len(u_seq) == 0:
        return np.zeros(0)
    T_out, _ = simulate_plant(x0, u_seq, d_seq, tau_s, substeps, params)
    return T_out


def steady_state(wc: float, d, params: PlantParams = PlantParams(),
                 guess=(320.0, 420.0), tol: float = 1e-11, max_iter: int = 200):
    """Equilibrium (T, Tm) for constant input and disturbance; damped Newton."""
    Ti, w = d
    T, Tm = guess
    kappa = params.k_lm * params.a_t / params.c_w
    mass = params.rho_w * params.a_t * params.z_w
    mcm = params.m_m * params.c_m
    for _ in range(max_iter):
        f1, f2 = _deriv(T, Tm, wc, Ti, w, params)
        res = math.hypot(f1, f2)
        if res <= tol:
            return T, Tm
        # analytic Jacobian of the right-hand side
        j11 = -(w + kappa) / mass
        j12 = kappa / mass
        j21 = params.k_lm * params.a_t / mcm
        j22 = (-params.k_lm * params.a_t - 4.0 * params.sigma_rad * params.k_f * wc * Tm ** 3) / mcm
        det = j11 * j22 - j12 * j21
        dT = (-f1 * j22 + f2 * j12) / det
        dTm = (-f2 * j11 + f1 * j21) / det
        scale = 1.0
        while scale > 1e-6:
            Tn, Tmn = T + scale * dT, Tm + scale * dTm
            if Tn > 0 and Tmn > 0:
                g1, g2 = _deriv(Tn, Tmn, wc, Ti, w, params)
                if math.hypot(g1, g2) < res:
                    break
            scale *= 0.5
        T, Tm = T + scale * dT, Tm + scale * dTm
    raise IntegrationFailure("steady-state Newton iteration did not converge")


def input_for_temperature(T_target: float, d, params: PlantParams = PlantParams(),
                          wc_bounds=(0.01, 0.5), tol: float = 1e-10) -> float:
    """Constant gas flow whose steady outlet temperature equals T_target.

    Bisection; the steady T is monotone increasing in w_c.
    """
    lo, hi = wc_bounds

    def err(wc):
        return steady_state(wc, d, params)[0] - T_target

    e_lo, e_hi = err(lo), err(hi)
    if e_lo > 0 or e_hi < 0:
        raise ValueError(f"target {T_target} K not reachable within wc bounds {wc_bounds}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        e = err(mid)
        if abs(e) <= tol or (hi - lo) < 1e-14:
            return mid
        if e > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)
