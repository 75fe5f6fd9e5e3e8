"""Closed-loop execution of a scenario against the true plant, plus log
file I/O, metrics extraction and the log re-validation used by check-log.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioSpec
from .mpc import StepRecord
from .plant import PlantParams, input_for_temperature, steady_state, step_rk4

LOG_COLUMNS = ["k", "t", "y_ref", "y_plant", "y_nominal", "u", "v", "xi",
               "theta", "objective", "solver_status", "solve_time_ms",
               "feasible_flag", "d_hat"]


def sample_profiles(scenario: ScenarioSpec, tau_s: float):
    """Per-sample reference and disturbance arrays."""
    K = scenario.n_samples(tau_s)
    refs = np.empty(K)
    dist = np.empty((K, 2))
    for k in range(K):
        t = k * tau_s
        y_ref = scenario.reference[0][1]
        for t0, y in scenario.reference:
            if t >= t0:
                y_ref = y
        refs[k] = y_ref
        ti, w = scenario.disturbance[0][1:]
        for t0, ti_c, w_c in scenario.disturbance:
            if t >= t0:
                ti, w = ti_c, w_c
        dist[k] = (ti, w)
    return refs, dist


def run_closed_loop(controller, plant_params: PlantParams, refs: np.ndarray,
                    dist: np.ndarray, tau_s: float, substeps: int,
                    x0_plant=None, init_u: float | None = None):
    """Drive the plant with the controller over the sampled scenario.

    The plant starts at (or near) the steady state matching the first
    reference; the controller is initialized with a constant history at
    that operating point.  Returns the list of per-step records.
    """
    d0 = (dist[0][0], dist[0][1])
    if init_u is None:
        init_u = input_for_temperature(refs[0], d0, plant_params)
    if x0_plant is None:
        x0_plant = steady_state(init_u, d0, plant_params)
    N = controller.N
    y0 = x0_plant[0]
    controller.initialize(np.full((N, 1), y0), np.full((N, 1), init_u), refs[0])
    T, Tm = x0_plant
    records: list[StepRecord] = []
    for k in range(len(refs)):
        u_k, rec, _ = controller.step(T, refs[k], t=k * tau_s)
        records.append(rec)
        T, Tm = step_rk4((T, Tm), float(np.atleast_1d(u_k)[0]),
                         (dist[k][0], dist[k][1]), tau_s, substeps, plant_params)
    return records


# ----------------------------------------------------------------------
# Log CSV
# ----------------------------------------------------------------------

def write_log_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([
                r.k, repr(float(r.t)), repr(float(r.y_ref)), repr(float(r.y_plant)),
                repr(float(r.y_nominal)), repr(float(r.u)), repr(float(r.v)),
                repr(float(r.xi)), repr(float(r.theta)), repr(float(r.objective)),
                r.solver_status, repr(float(r.solve_time_ms)), r.feasible,
                "" if r.d_hat is None else repr(float(r.d_hat)),
            ])


def read_log_csv(path) -> list[StepRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:13] != LOG_COLUMNS[:13]:
            raise ValueError(f"{path}: unexpected log schema {reader.fieldnames}")
        for row in reader:
            records.append(StepRecord(
                k=int(row["k"]), t=float(row["t"]), y_ref=float(row["y_ref"]),
                y_plant=float(row["y_plant"]), y_nominal=float(row["y_nominal"]),
                u=float(row["u"]), v=float(row["v"]), xi=float(row["xi"]),
                theta=float(row["theta"]), objective=float(row["objective"]),
                solver_status=row["solver_status"],
                solve_time_ms=float(row["solve_time_ms"]),
                feasible=int(row["feasible_flag"]),
                d_hat=float(row["d_hat"]) if row.get("d_hat") else None,
            ))
    return records


# ----------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------

@dataclass
class PlateauMetrics:
    index: int
    t_start: float
    y_ref: float
    ss_error: float
    settling_time: float    # seconds from plateau start; nan if never settles


@dataclass
class RunMetrics:
    plateaus: list = field(default_factory=list)
    max_input: float = 0.0
    min_input: float = 0.0
    input_violations: int = 0
    infeasible_steps: int = 0
    tube_containment: float = float("nan")
    mean_solve_ms: float = 0.0
    max_solve_ms: float = 0.0


def split_plateaus(records):
    """Index ranges over which the reference is constant."""
    groups = []
    start = 0
    for i in range(1, len(records) + 1):
        if i == len(records) or records[i].y_ref != records[start].y_ref:
            groups.append((start, i))
            start = i
    return groups


def compute_metrics(records, tau_s: float, band: float = 0.1,
                    u_bounds=(0.05, 0.18), tube_halfwidth: float | None = None) -> RunMetrics:
    out = RunMetrics()
    err = np.array([r.y_plant - r.y_ref for r in records])
    for idx, (a, b) in enumerate(split_plateaus(records)):
        # steady-state error: the asymptotic tail, not the recovery slope
        tail = max(3, min(8, (b - a) // 6))
        ss = float(np.mean(np.abs(err[max(a, b - tail):b])))
        settle = float("nan")
        for j in range(a, b):
            if np.all(np.abs(err[j:b]) <= band):
                settle = (j - a) * tau_s
                break
        out.plateaus.append(PlateauMetrics(index=idx, t_start=records[a].t,
                                           y_ref=records[a].y_ref,
                                           ss_error=ss, settling_time=settle))
    u = np.array([r.u for r in records])
    out.max_input = float(u.max())
    out.min_input = float(u.min())
    out.input_violations = int(np.sum((u < u_bounds[0] - 1e-9) | (u > u_bounds[1] + 1e-9)))
    out.infeasible_steps = int(sum(1 for r in records if not r.feasible))
    if tube_halfwidth is not None:
        inside = [abs(r.y_plant - r.y_nominal) <= tube_halfwidth + 1e-9 and r.feasible
                  for r in records]
        out.tube_containment = float(np.mean(inside))
    times = np.array([r.solve_time_ms for r in records])
    out.mean_solve_ms = float(times.mean())
    out.max_solve_ms = float(times.max())
    return out


def write_metrics_csv(path, metrics: RunMetrics):
    """Deterministic metric summary (timings go to a separate file)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "plateau", "value"])
        for pl in metrics.plateaus:
            w.writerow(["y_ref", pl.index, repr(pl.y_ref)])
            w.writerow(["ss_error_K", pl.index, repr(pl.ss_error)])
            w.writerow(["settling_time_s", pl.index, repr(pl.settling_time)])
        w.writerow(["max_input", "", repr(metrics.max_input)])
        w.writerow(["min_input", "", repr(metrics.min_input)])
        w.writerow(["input_violations", "", metrics.input_violations])
        w.writerow(["infeasible_steps", "", metrics.infeasible_steps])
        if not math.isnan(metrics.tube_containment):
            w.writerow(["tube_containment", "", repr(metrics.tube_containment)])


def write_timing_csv(path, metrics: RunMetrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["mean_solve_ms", repr(metrics.mean_solve_ms)])
        w.writerow(["max_solve_ms", repr(metrics.max_solve_ms)])


# ----------------------------------------------------------------------
# Log re-validation
# ----------------------------------------------------------------------

def check_log(records, u_bounds=(0.05, 0.18), scaling=None,
              u_box_scaled=None) -> list[str]:
    """Re-validate a closed-loop log; returns a list of problem strings.

    With the model's scaling available the applied-input identity
    u = clip(xi + v - theta) is re-checked in scaled units.
    """
    problems = []
    for i, r in enumerate(records):
        if r.k != i:
            problems.append(f"row {i}: non-contiguous step index {r.k}")
        if not (u_bounds[0] - 1e-9 <= r.u <= u_bounds[1] + 1e-9):
            problems.append(f"row {i}: input {r.u} outside bounds {u_bounds}")
        if r.feasible not in (0, 1):
            problems.append(f"row {i}: bad feasible flag {r.feasible}")
    ts = [r.t for r in records]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        problems.append("time column is not strictly increasing")
    if scaling is not None:
        lo, hi = (-1.0, 1.0) if u_box_scaled is None else u_box_scaled
        for i, r in enumerate(records):
            u_s = float(scaling.scale_u(np.atleast_1d(r.u))[0])
            ref = float(np.clip(r.xi + r.v - r.theta, lo, hi))
            if abs(u_s - ref) > 1e-6:
                problems.append(f"row {i}: applied input violates the "
                                f"integrator/difference identity by {abs(u_s - ref):.2e}")
    return problems
