"""Command-line entry points: generate-data, train, synthesize, run,
compare, check-log.

Exit codes: 0 success, 2 at least one infeasible controller step during a
run, 3 training or synthesis failure.
"""

from __future__ import annotations

import configparser
import csv
import os
import sys
from dataclasses import dataclass

import click
import numpy as np

from .boxes import Box, compute_rpi, rpi_output_halfwidth
from .config import ExperimentConfig, load_config
from .deb import DebController
from .errors import NarxMpcError, TrainingFailure
from .mpc import (Controller, OcpConfig, default_state_box,
                  estimate_disturbance_bound)
from .nnarx import (build_structural_matrices, deltaiss_margin, load_model,
                    save_model)
from .offset_free import (estimate_mu_max, export_equilibrium_table,
                          find_equilibrium, integrator_gain, linearize_at,
                          schur_check)
from .plant import simulate_plant, steady_state
from .plots import save_compare_figure, save_run_figure, save_training_figure
from .report import compare_logs, write_comparison
from .scenarios import (check_log, compute_metrics, read_log_csv,
                        run_closed_loop, sample_profiles, write_log_csv,
                        write_metrics_csv, write_timing_csv)
from .training import (ArchSpec, Dataset, TrainConfig, fit_index,
                       free_run_outputs, generate_mprs, make_dataset, train,
                       write_training_log)


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write_dataset_csv(path, tau_s, u, y):
    u = np.atleast_2d(np.asarray(u, float).T).T if np.ndim(u) == 1 else np.asarray(u, float)
    y = np.atleast_2d(np.asarray(y, float).T).T if np.ndim(y) == 1 else np.asarray(y, float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"u_{i + 1}" for i in range(u.shape[1])]
                   + [f"y_{i + 1}" for i in range(y.shape[1])])
        for k in range(len(u)):
            w.writerow([repr(k * tau_s)] + [repr(float(v)) for v in u[k]]
                       + [repr(float(v)) for v in y[k]])


def _read_dataset_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        m = sum(1 for h in header if h.startswith("u_"))
        p = sum(1 for h in header if h.startswith("y_"))
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows)
    return data[:, 1:1 + m], data[:, 1 + m:1 + m + p]


def _write_plant_csv(path, tau_s, u, d, T, Tm):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "w_c", "T_i", "w", "T", "T_m"])
        for k in range(len(u)):
            w.writerow([repr(k * tau_s), repr(float(u[k])), repr(float(d[k][0])),
                        repr(float(d[k][1])), repr(float(T[k])), repr(float(Tm[k]))])


@click.group()
def main():
    """Learned-model predictive control toolkit for the water heater."""


@main.command("generate-data")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the data seed")
def cmd_generate_data(config_path, out_dir, seed):
    """Excite the plant and write train/validation/test trajectory CSVs."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg.data.seed = seed
    dc = cfg.data
    if dc.train_length < 1 or dc.eval_length < 1:
        raise click.ClickException("trajectory lengths must be positive")
    _ensure_dir(out_dir)
    d_nom = (cfg.plant.t_in_nom, cfg.plant.w_nom)
    x0 = steady_state(dc.init_wc, d_nom, cfg.plant)
    bounds = (dc.u_min, dc.u_max)

    u_train = generate_mprs(dc.mprs_levels, (dc.dwell_min, dc.dwell_max),
                            dc.train_length, bounds, dc.seed)
    d_seq = np.tile(d_nom, (dc.train_length, 1))
    T_arr, Tm_arr = simulate_plant(x0, u_train[:, 0], d_seq, dc.tau_s,
                                   dc.substeps, cfg.plant)
    _write_dataset_csv(os.path.join(out_dir, "train.csv"), dc.tau_s, u_train, T_arr)
    _write_plant_csv(os.path.join(out_dir, "train_plant.csv"), dc.tau_s,
                     u_train[:, 0], d_seq, T_arr, Tm_arr)

    n_eval = dc.n_val + dc.n_test
    u_eval = np.stack([
        generate_mprs(dc.mprs_levels, (dc.dwell_min, dc.dwell_max),
                      dc.eval_length, bounds, dc.seed + 1 + i)[:, 0]
        for i in range(n_eval)
    ], axis=1)  # (K, R)
    x0_b = (np.full(n_eval, x0[0]), np.full(n_eval, x0[1]))
    d_eval = np.tile(d_nom, (dc.eval_length, 1))
    T_b, _ = simulate_plant(x0_b, u_eval, d_eval, dc.tau_s, dc.substeps, cfg.plant)
    for i in range(dc.n_val):
        _write_dataset_csv(os.path.join(out_dir, f"val_{i:02d}.csv"),
                           dc.tau_s, u_eval[:, i], T_b[:, i])
    for i in range(dc.n_test):
        _write_dataset_csv(os.path.join(out_dir, f"test_{i:02d}.csv"),
                           dc.tau_s, u_eval[:, dc.n_val + i], T_b[:, dc.n_val + i])
    click.echo(f"training trajectory: {dc.train_length} samples, "
               f"T in [{T_arr.min():.2f}, {T_arr.max():.2f}] K")
    click.echo(f"wrote {dc.n_val} validation + {dc.n_test} test trajectories "
               f"of {dc.eval_length} samples to {out_dir}")


def _load_dataset(data_dir, cfg: ExperimentConfig) -> Dataset:
    u, y = _read_dataset_csv(os.path.join(data_dir, "train.csv"))
    val, test = [], []
    for name in sorted(os.listdir(data_dir)):
        if name.startswith("val_") and name.endswith(".csv"):
            val.append(_read_dataset_csv(os.path.join(data_dir, name)))
        if name.startswith("test_") and name.endswith(".csv"):
            test.append(_read_dataset_csv(os.path.join(data_dir, name)))
    ts = cfg.training
    return make_dataset(u, y, ts.subseq_len, ts.n_train, ts.seed,
                        val_trajectories=val, test_trajectories=test)


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the training seed")
@click.option("--plot/--no-plot", default=True)
def cmd_train(config_path, data_dir, out_dir, seed, plot):
    """Fit the model, report FIT and the contraction margin, save the model."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg.training.seed = seed
    ts = cfg.training
    _ensure_dir(out_dir)
    try:
        dataset = _load_dataset(data_dir, cfg)
    except FileNotFoundError as exc:
        raise click.ClickException(f"dataset not found: {exc}")
    arch = ArchSpec(lookback=ts.lookback, hidden=tuple(np.atleast_1d(ts.hidden)),
                    activation=ts.activation)
    tc = TrainConfig(learning_rate=ts.learning_rate, max_epochs=ts.max_epochs,
                     rho_reg=ts.rho_reg, patience=ts.patience, seed=ts.seed,
                     washout=ts.washout, batch_size=ts.batch_size,
                     margin_eps=ts.margin_eps)
    log_path = os.path.join(out_dir, "training_log.csv")
    try:
        result = train(dataset, arch, tc)
    except TrainingFailure as exc:
        click.echo(f"training failed: {exc} (log: {log_path})", err=True)
        sys.exit(3)
    write_training_log(log_path, result.log)
    if plot:
        save_training_figure(result.log, os.path.join(out_dir, "training.png"))
    model_path = os.path.join(out_dir, "model.txt")
    save_model(model_path, result.params, result.scaling)

    margin = deltaiss_margin(result.params)
    fits = []
    for u, y in dataset.part("test"):
        y_model, y_true = free_run_outputs(result.params, result.scaling, u, y)
        fits.append(fit_index(y_model, y_true))
    click.echo(f"best validation MSE {result.best_val_mse:.3e} at epoch {result.best_epoch}")
    click.echo(f"test FIT: {', '.join(f'{f:.1f}%' for f in fits)}")
    click.echo(f"contraction margin: {margin:.4f} "
               f"({'certified' if margin < 0 else 'NOT certified'})")
    click.echo(f"model written to {model_path}")


def _array_str(a) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(a).ravel())


def _parse_array(s) -> np.ndarray:
    return np.array([float(v) for v in s.split()])


@dataclass
class ControllerBundle:
    mode: str
    mu: np.ndarray
    mu_hat: float
    mu_max: float
    w_scaled: float
    w_physical: float
    omega: Box
    ocp: OcpConfig
    mhe_horizon: int
    mhe_prior: float


def save_controller_file(path, bundle: ControllerBundle):
    cp = configparser.ConfigParser()
    cp["synthesis"] = {
        "mode": bundle.mode,
        "mu_hat": repr(bundle.mu_hat),
        "mu_max": repr(bundle.mu_max),
        "w_check_scaled": repr(bundle.w_scaled),
        "w_check_physical": repr(bundle.w_physical),
        "mu": _array_str(bundle.mu),
        "mu_rows": str(bundle.mu.shape[0]),
    }
    cp["rpi"] = {"lo": _array_str(bundle.omega.lo), "hi": _array_str(bundle.omega.hi)}
    o = bundle.ocp
    cp["ocp"] = {
        "horizon": str(o.horizon), "r_e": repr(o.r_e), "r_u": repr(o.r_u),
        "q_xi": repr(o.q_xi), "q_theta": repr(o.q_theta),
        "terminal_tol": repr(o.terminal_tol), "penalty_init": repr(o.penalty_init),
        "max_outer": str(o.max_outer), "max_inner": str(o.max_inner),
        "u_lo": _array_str(o.u_lo), "u_hi": _array_str(o.u_hi),
        "x_lo": _array_str(o.x_lo), "x_hi": _array_str(o.x_hi),
    }
    cp["estimator"] = {"mhe_horizon": str(bundle.mhe_horizon),
                       "mhe_prior": repr(bundle.mhe_prior)}
    with open(path, "w") as fh:
        cp.write(fh)


def load_controller_file(path) -> ControllerBundle:
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    syn = cp["synthesis"]
    rows = int(syn["mu_rows"])
    mu = _parse_array(syn["mu"]).reshape(rows, rows)
    o = cp["ocp"]
    ocp = OcpConfig(
        horizon=int(o["horizon"]), r_e=float(o["r_e"]), r_u=float(o["r_u"]),
        q_xi=float(o["q_xi"]), q_theta=float(o["q_theta"]),
        terminal_tol=float(o["terminal_tol"]), penalty_init=float(o["penalty_init"]),
        max_outer=int(o["max_outer"]), max_inner=int(o["max_inner"]),
        u_lo=_parse_array(o["u_lo"]), u_hi=_parse_array(o["u_hi"]),
        x_lo=_parse_array(o["x_lo"]), x_hi=_parse_array(o["x_hi"]),
    )
    est = cp["estimator"]
    return ControllerBundle(
        mode=syn["mode"], mu=mu, mu_hat=float(syn["mu_hat"]),
        mu_max=float(syn["mu_max"]), w_scaled=float(syn["w_check_scaled"]),
        w_physical=float(syn["w_check_physical"]),
        omega=Box(_parse_array(cp["rpi"]["lo"]), _parse_array(cp["rpi"]["hi"])),
        ocp=ocp, mhe_horizon=int(est["mhe_horizon"]), mhe_prior=float(est["mhe_prior"]),
    )


@main.command("synthesize")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the mismatch-estimation seed")
def cmd_synthesize(config_path, model_path, out_dir, seed):
    """Offline phase: integrator gain, disturbance bound, invariant set."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg.controller.w_check_seed = seed
    cs = cfg.controller
    _ensure_dir(out_dir)
    params, scaling = load_model(model_path)
    N, m, p = params.lookback, params.input_dim, params.output_dim
    S = build_structural_matrices(N, m, p)
    u_lo_s = np.atleast_1d(scaling.scale_u(cfg.data.u_min))
    u_hi_s = np.atleast_1d(scaling.scale_u(cfg.data.u_max))

    refs = [y for _, y in cfg.scenario.reference]
    y_center = float(np.mean(refs))
    try:
        eq = find_equilibrium(params, scaling.scale_y(np.atleast_1d(y_center)),
                              input_box=(u_lo_s, u_hi_s))
        is_schur, radius = schur_check(linearize_at(params, eq)[0])
        if not is_schur:
            click.echo(f"synthesis refused: local dynamics not contractive at "
                       f"{y_center:.1f} K (spectral radius {radius:.4f} >= 1)", err=True)
            sys.exit(3)
        mu_max = estimate_mu_max(params, eq)
        mu_hat = cs.mu_hat if cs.mu_hat is not None else 0.5 * mu_max
        if not 0.0 < mu_hat < mu_max:
            click.echo(f"warning: mu_hat {mu_hat} outside the stable range "
                       f"(0, {mu_max:.3f})", err=True)
        A_d, B_d = linearize_at(params, eq)
        mu = integrator_gain(A_d, B_d, S.C, mu_hat)
    except NarxMpcError as exc:
        click.echo(f"synthesis failed: {exc}", err=True)
        sys.exit(3)

    if cs.w_check_source == "value":
        w_scaled = cs.w_check_value
    else:
        dc = cfg.data
        d_nom = (cfg.plant.t_in_nom, cfg.plant.w_nom)
        x0 = steady_state(dc.init_wc, d_nom, cfg.plant)

        def plant_rollout(u_batch):
            R, K, _ = u_batch.shape
            x0_b = (np.full(R, x0[0]), np.full(R, x0[1]))
            d_seq = np.tile(d_nom, (K, 1))
            T_b, _ = simulate_plant(x0_b, u_batch[:, :, 0].T, d_seq,
                                    dc.tau_s, dc.substeps, cfg.plant)
            return T_b.T[:, :, None]

        w_scaled, _ = estimate_disturbance_bound(
            plant_rollout, params, scaling, cs.w_check_trajectories,
            cs.w_check_length, cs.w_check_seed, (dc.u_min, dc.u_max))
    w_physical = float(w_scaled * scaling.y_half[0])
    omega = compute_rpi(N, m, p, w_scaled)

    x_box = default_state_box(N, m, p, u_lo_s, u_hi_s, y_margin=cs.y_margin)
    ocp = OcpConfig(horizon=cs.horizon, r_e=cs.r_e, r_u=cs.r_u, q_xi=cs.q_xi,
                    q_theta=cs.q_theta, u_lo=u_lo_s, u_hi=u_hi_s,
                    x_lo=x_box.lo, x_hi=x_box.hi, terminal_tol=cs.terminal_tol,
                    penalty_init=cs.penalty_init, max_outer=cs.max_outer,
                    max_inner=cs.max_inner)
    bundle = ControllerBundle(mode=cs.mode, mu=mu, mu_hat=float(mu_hat),
                              mu_max=float(mu_max), w_scaled=float(w_scaled),
                              w_physical=w_physical, omega=omega, ocp=ocp,
                              mhe_horizon=cs.mhe_horizon, mhe_prior=cs.mhe_prior)
    ctrl_path = os.path.join(out_dir, "controller.txt")
    save_controller_file(ctrl_path, bundle)

    y_lo = scaling.unscale_y(np.array([-0.9]))[0]
    y_hi = scaling.unscale_y(np.array([0.9]))[0]
    grid = [scaling.scale_y(np.atleast_1d(v)) for v in np.linspace(y_lo, y_hi, 10)]
    # diagnostic table: report inputs even where they fall outside the box
    export_equilibrium_table(params, grid, os.path.join(out_dir, "equilibria.csv"))

    report_path = os.path.join(out_dir, "synthesis_report.txt")
    with open(report_path, "w") as fh:
        fh.write(f"spectral radius at {y_center:.1f} K: {radius:.6f}\n")
        fh.write(f"largest stable normalized gain: {mu_max:.4f}\n")
        fh.write(f"selected mu_hat: {mu_hat:.4f}\n")
        fh.write(f"integrator gain mu: {float(mu[0, 0]):.4f}\n")
        fh.write(f"mismatch bound: {w_scaled:.5f} scaled ({w_physical:.4f} K)\n")
        fh.write(f"output tube half-width: {float(rpi_output_halfwidth(omega, N, m, p)[0]):.5f} scaled\n")
    click.echo(open(report_path).read().rstrip())
    click.echo(f"controller written to {ctrl_path}")


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--controller", "controller_path", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["nominal", "tube", "deb"]), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--plot/--no-plot", default=True)
def cmd_run(config_path, model_path, controller_path, mode, out_dir, plot):
    """Online phase: execute the scenario against the true plant."""
    cfg = load_config(config_path)
    _ensure_dir(out_dir)
    params, scaling = load_model(model_path)
    bundle = load_controller_file(controller_path)
    mode = mode or bundle.mode
    if mode == "deb":
        controller = DebController(params, scaling, bundle.ocp,
                                   mhe_horizon=bundle.mhe_horizon,
                                   prior_weight=bundle.mhe_prior)
    elif mode == "tube":
        controller = Controller(params, scaling, bundle.mu, bundle.ocp,
                                mode="tube", omega=bundle.omega)
    else:
        controller = Controller(params, scaling, bundle.mu, bundle.ocp, mode="nominal")

    refs, dist = sample_profiles(cfg.scenario, cfg.data.tau_s)
    records = run_closed_loop(controller, cfg.plant, refs, dist,
                              cfg.data.tau_s, cfg.data.substeps)
    log_path = os.path.join(out_dir, f"closed_loop_{mode}.csv")
    write_log_csv(log_path, records)
    tube_hw = bundle.w_physical if mode == "tube" else None
    metrics = compute_metrics(records, cfg.data.tau_s,
                              u_bounds=(cfg.data.u_min, cfg.data.u_max),
                              tube_halfwidth=tube_hw)
    write_metrics_csv(os.path.join(out_dir, f"metrics_{mode}.csv"), metrics)
    write_timing_csv(os.path.join(out_dir, f"timing_{mode}.csv"), metrics)
    if plot:
        save_run_figure(records, os.path.join(out_dir, f"run_{mode}.png"),
                        tube_halfwidth=tube_hw,
                        u_bounds=(cfg.data.u_min, cfg.data.u_max))
    for pl in metrics.plateaus:
        settle = "never" if np.isnan(pl.settling_time) else f"{pl.settling_time:.0f} s"
        click.echo(f"plateau {pl.index} ({pl.y_ref:g} K): steady-state error "
                   f"{pl.ss_error:.4f} K, settling {settle}")
    click.echo(f"input range [{metrics.min_input:.4f}, {metrics.max_input:.4f}] kg/s, "
               f"{metrics.input_violations} violations, "
               f"{metrics.infeasible_steps} infeasible steps")
    if mode == "tube":
        click.echo(f"tube containment: {100 * metrics.tube_containment:.1f}%")
    click.echo(f"solve time mean {metrics.mean_solve_ms:.1f} ms / "
               f"max {metrics.max_solve_ms:.1f} ms")
    click.echo(f"log written to {log_path}")
    if metrics.infeasible_steps > 0:
        sys.exit(2)


@main.command("compare")
@click.argument("logs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--plot/--no-plot", default=True)
def cmd_compare(logs, config_path, out_dir, plot):
    """Aligned metric table across several run logs."""
    _ensure_dir(out_dir)
    tau_s, u_bounds = 120.0, (0.05, 0.18)
    if config_path:
        cfg = load_config(config_path)
        tau_s, u_bounds = cfg.data.tau_s, (cfg.data.u_min, cfg.data.u_max)
    try:
        rows, columns, table = compare_logs(list(logs), tau_s=tau_s, u_bounds=u_bounds)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    text = write_comparison(rows, columns, table,
                            os.path.join(out_dir, "comparison.csv"),
                            os.path.join(out_dir, "comparison.txt"))
    if plot:
        record_sets = [read_log_csv(p) for p in logs]
        save_compare_figure(record_sets, columns, os.path.join(out_dir, "compare.png"))
    click.echo(text.rstrip())


@main.command("check-log")
@click.argument("log", type=click.Path(exists=True))
@click.option("--model", "model_path", default=None, type=click.Path(exists=True))
@click.option("--u-min", type=float, default=0.05)
@click.option("--u-max", type=float, default=0.18)
def cmd_check_log(log, model_path, u_min, u_max):
    """Re-validate the invariants of a closed-loop log."""
    records = read_log_csv(log)
    scaling = None
    u_box = None
    if model_path:
        _, scaling = load_model(model_path)
        u_box = (float(scaling.scale_u(np.atleast_1d(u_min))[0]),
                 float(scaling.scale_u(np.atleast_1d(u_max))[0]))
    problems = check_log(records, u_bounds=(u_min, u_max), scaling=scaling,
                         u_box_scaled=u_box)
    if problems:
        for msg in problems:
            click.echo(msg, err=True)
        sys.exit(1)
    click.echo(f"{log}: {len(records)} rows, all invariants hold")


if __name__ == "__main__":
    main()
