"""Figure rendering for the report path; PNG files next to the CSVs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_run_figure(records, path, tube_halfwidth: float | None = None,
                    u_bounds=(0.05, 0.18)):
    """Tracking and input panels for one closed-loop run."""
    t = np.array([r.t for r in records]) / 3600.0
    y = np.array([r.y_plant for r in records])
    ref = np.array([r.y_ref for r in records])
    u = np.array([r.u for r in records])
    fig, (ax_y, ax_u) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    if tube_halfwidth is not None:
        nom = np.array([r.y_nominal for r in records])
        ax_y.fill_between(t, nom - tube_halfwidth, nom + tube_halfwidth,
                          alpha=0.25, color="C1", label="tube")
    ax_y.plot(t, ref, "k--", lw=1, label="reference")
    ax_y.plot(t, y, "C0", lw=1.5, label="plant output")
    ax_y.set_ylabel("T [K]")
    ax_y.legend(loc="best", fontsize=8)
    ax_y.grid(alpha=0.3)
    ax_u.step(t, u, where="post", color="C2", lw=1.2, label="gas flow")
    for b in u_bounds:
        ax_u.axhline(b, color="r", ls=":", lw=1)
    ax_u.set_ylabel("w_c [kg/s]")
    ax_u.set_xlabel("t [h]")
    ax_u.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_compare_figure(record_sets, labels, path):
    """Overlay outputs and inputs of several runs."""
    fig, (ax_y, ax_u) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    first = record_sets[0]
    t0 = np.array([r.t for r in first]) / 3600.0
    ax_y.plot(t0, [r.y_ref for r in first], "k--", lw=1, label="reference")
    for recs, label in zip(record_sets, labels):
        t = np.array([r.t for r in recs]) / 3600.0
        ax_y.plot(t, [r.y_plant for r in recs], lw=1.2, label=label)
        ax_u.step(t, [r.u for r in recs], where="post", lw=1.0, label=label)
    ax_y.set_ylabel("T [K]")
    ax_y.legend(loc="best", fontsize=8)
    ax_y.grid(alpha=0.3)
    ax_u.set_ylabel("w_c [kg/s]")
    ax_u.set_xlabel("t [h]")
    ax_u.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_training_figure(log_rows, path):
    """Loss curves and the contraction margin over epochs."""
    epochs = [r[0] for r in log_rows]
    fig, (ax_l, ax_m) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    ax_l.semilogy(epochs, [r[1] for r in log_rows], label="train MSE")
    ax_l.semilogy(epochs, [r[2] for r in log_rows], label="validation MSE")
    ax_l.set_ylabel("simulation MSE")
    ax_l.legend(fontsize=8)
    ax_l.grid(alpha=0.3)
    ax_m.plot(epochs, [r[3] for r in log_rows], color="C3")
    ax_m.axhline(0.0, color="k", lw=0.8)
    ax_m.set_ylabel("weight-condition margin")
    ax_m.set_xlabel("epoch")
    ax_m.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
