"""Small dense NLP solver for the single-shooting optimal control problems.

The problems are nonlinear least squares with a few equality constraints
(initial/terminal pins), inequality rows (state and input boxes evaluated
along the trajectory) and optional bounds directly on decision variables.

Strategy: Levenberg-Marquardt steps on the penalized objective

    ||r(z)||^2 + omega * ( ||c(z)||^2 + ||max(h(z), 0)||^2 )

with bound handling by projection plus an active-set split of the normal
equations, and an outer loop that doubles omega until the constraint
residual meets the tolerance.  Violated inequality rows enter the
Gauss-Newton matrix like ordinary residuals, inactive ones drop out.
Deterministic given the starting point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalFailure


@dataclass
class NlpEval:
    """One evaluation of the problem functions at a point.

    objective = ||r||^2; equalities c(z) = 0; inequalities h(z) <= 0.
    Jacobians are only required when requested.
    """

    r: np.ndarray
    J: np.ndarray | None = None
    c: np.ndarray | None = None
    Jc: np.ndarray | None = None
    h: np.ndarray | None = None
    Jh: np.ndarray | None = None


@dataclass
class NlpProblem:
    n_vars: int
    evaluate: Callable[[np.ndarray, bool], NlpEval]
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None


@dataclass
class NlpSettings:
    penalty_init: float = 1e4
    constraint_tol: float = 1e-6
    max_outer: int = 24
    max_inner: int = 200
    grad_tol: float = 1e-10
    step_tol: float = 1e-14
    lm_init: float = 1e-8
    lm_max: float = 1e12


@dataclass
class NlpResult:
    z: np.ndarray
    objective: float
    eq_residual: float
    ineq_violation: float
    status: str                      # optimal | max-iter | infeasible
    outer_rounds: int = 0
    inner_iterations: int = 0
    history: list = field(default_factory=list)


def _penalized_value(ev: NlpEval, omega: float) -> float:
    val = float(ev.r @ ev.r)
    if ev.c is not None and ev.c.size:
        val += omega * float(ev.c @ ev.c)
    if ev.h is not None and ev.h.size:
        viol = np.clip(ev.h, 0.0, None)
        val += omega * float(viol @ viol)
    return val


def _violation(ev: NlpEval) -> tuple[float, float]:
    ceq = float(np.max(np.abs(ev.c))) if ev.c is not None and ev.c.size else 0.0
    cin = float(np.max(np.clip(ev.h, 0.0, None))) if ev.h is not None and ev.h.size else 0.0
    return ceq, cin


def _stacked(ev: NlpEval, omega: float):
    sq = math.sqrt(omega)
    rs = [ev.r]
    Js = [ev.J]
    if ev.c is not None and ev.c.size:
        rs.append(sq * ev.c)
        Js.append(sq * ev.Jc)
    if ev.h is not None and ev.h.size:
        active = ev.h > 0.0
        if np.any(active):
            rs.append(sq * ev.h[active])
            Js.append(sq * ev.Jh[active])
    return np.concatenate(rs), np.vstack(Js)


def _inner_lm(problem: NlpProblem, z: np.ndarray, omega: float, lo, hi,
              st: NlpSettings):
    """Projected Levenberg-Marquardt until stationarity or budget."""
    ev = problem.evaluate(z, True)
    phi = _penalized_value(ev, omega)
    if not math.isfinite(phi):
        raise NumericalFailure("objective is not finite at the starting point")
    lam = st.lm_init
    converged = False
    iters = 0
    n = problem.n_vars
    for _ in range(st.max_inner):
        iters += 1
        r, J = _stacked(ev, omega)
        g = 2.0 * (J.T @ r)
        pg = z - np.clip(z - g, lo, hi)
        if float(np.max(np.abs(pg))) <= st.grad_tol * (1.0 + abs(phi)):
            converged = True
            break
        at_lo = z <= lo + 1e-12
        at_hi = z >= hi - 1e-12
        free = ~((at_lo & (g > 0)) | (at_hi & (g < 0)))
        if not np.any(free):
            converged = True
            break
        JtJ = J.T @ J
        accepted = False
        while lam <= st.lm_max:
            A = JtJ[np.ix_(free, free)] + lam * np.eye(int(free.sum()))
            try:
                d_free = np.linalg.solve(A, -0.5 * g[free])
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            d = np.zeros(n)
            d[free] = d_free
            z_new = np.clip(z + d, lo, hi)
            if float(np.max(np.abs(z_new - z))) <= st.step_tol * (1.0 + float(np.max(np.abs(z)))):
                converged = True
                break
            ev_new = problem.evaluate(z_new, False)
            phi_new = _penalized_value(ev_new, omega)
            if math.isfinite(phi_new) and phi_new < phi:
                z = z_new
                phi = phi_new
                lam = max(lam / 3.0, 1e-12)
                ev = problem.evaluate(z, True)
                accepted = True
                break
            lam *= 4.0
        if converged or not accepted:
            break
    return z, ev, iters, converged


def solve_nlp(problem: NlpProblem, z0: np.ndarray,
              settings: NlpSettings = NlpSettings()) -> NlpResult:
    """Penalty-scheduled solve; see the module docstring.

    Returns the best point found with status optimal / max-iter /
    infeasible; raises NumericalFailure only if the problem cannot be
    evaluated at all.
    """
    lo = problem.lower if problem.lower is not None else np.full(problem.n_vars, -np.inf)
    hi = problem.upper if problem.upper is not None else np.full(problem.n_vars, np.inf)
    z = np.clip(np.asarray(z0, dtype=float).copy(), lo, hi)
    omega = settings.penalty_init
    total_iters = 0
    rounds = 0
    last_converged = False
    prev_viol = math.inf
    stalled = 0
    history = []
    ev = problem.evaluate(z, False)
    for _ in range(settings.max_outer):
        rounds += 1
        z, ev, iters, last_converged = _inner_lm(problem, z, omega, lo, hi, settings)
        total_iters += iters
        ceq, cin = _violation(ev)
        viol = max(ceq, cin)
        history.append((omega, viol))
        if viol <= settings.constraint_tol:
            break
        # constant (unfixable) violations: stop escalating the penalty
        if viol >= prev_viol * 0.999:
            stalled += 1
            if stalled >= 3:
                break
        else:
            stalled = 0
        prev_viol = viol
        omega *= 2.0
    ceq, cin = _violation(ev)
    viol = max(ceq, cin)
    if viol > settings.constraint_tol:
        status = "infeasible"
    elif last_converged:
        status = "optimal"
    else:
        status = "max-iter"
    return NlpResult(z=z, objective=float(ev.r @ ev.r), eq_residual=ceq,
                     ineq_violation=cin, status=status, outer_rounds=rounds,
                     inner_iterations=total_iters, history=history)
