"""Neural NARX identification with offset-free nominal and tube MPC."""

from .boxes import Box, compute_rpi, minkowski_add, pontryagin_subtract
from .mpc import (Controller, OcpConfig, OcpSolution, estimate_disturbance_bound,
                  solve_nominal_ocp, solve_tube_ocp)
from .nnarx import (ModelParams, Layer, build_structural_matrices, deltaiss_margin,
                    ffnn_eval, jacobians, load_model, save_model, simulate, step)
from .offset_free import (AugmentedState, AugmentedTarget, Equilibrium,
                          augmented_step, estimate_mu_max, find_equilibrium,
                          integrator_gain, schur_check)
from .plant import PlantParams, plant_deriv, sample_trajectory, step_rk4
from .scaling import SignalScaling
from .training import (ArchSpec, Dataset, TrainConfig, fit_index,
                       generate_mprs, loss_and_gradient, make_dataset, train)

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "AugmentedState", "AugmentedTarget", "Box", "Controller",
    "Dataset", "Equilibrium", "Layer", "ModelParams", "OcpConfig",
    "OcpSolution", "PlantParams", "SignalScaling", "TrainConfig",
    "augmented_step", "build_structural_matrices", "compute_rpi",
    "deltaiss_margin", "estimate_disturbance_bound", "estimate_mu_max",
    "ffnn_eval", "find_equilibrium", "fit_index", "generate_mprs",
    "integrator_gain", "jacobians", "load_model", "loss_and_gradient",
    "make_dataset", "minkowski_add", "plant_deriv", "pontryagin_subtract",
    "sample_trajectory", "save_model", "schur_check", "simulate",
    "solve_nominal_ocp", "solve_tube_ocp", "step", "step_rk4", "train",
]
