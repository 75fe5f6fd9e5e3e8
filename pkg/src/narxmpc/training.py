"""Dataset generation and simulation-error training of the NARX network.

Training minimizes the free-run (simulation) mean square error over
fixed-length subsequences cut from a long excitation experiment, with a
hinge regularizer that pushes the contraction certificate of the weights
below zero.  Gradients are reverse-accumulated through the unrolled
simulation; subsequences of equal length are evaluated as one batch and
reductions always run in fixed index order, so results are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingFailure
from .nnarx import (ACTIVATIONS, Layer, ModelParams, deltaiss_margin,
                    spectral_norm_vectors)
from .scaling import SignalScaling


# ----------------------------------------------------------------------
# Excitation signal and dataset assembly
# ----------------------------------------------------------------------

def generate_mprs(levels: int, dwell_range, length: int, bounds, seed: int) -> np.ndarray:
    """Multilevel pseudo-random signal: piecewise constant, per-channel.

    levels equally spaced values in [lo, hi], dwell times drawn uniformly
    from dwell_range (inclusive, in steps).  Deterministic given the seed.
    """
    lo = np.atleast_1d(np.asarray(bounds[0], dtype=float))
    hi = np.atleast_1d(np.asarray(bounds[1], dtype=float))
    if np.any(hi <= lo):
        raise ValueError("bounds must satisfy lo < hi")
    d_min, d_max = int(dwell_range[0]), int(dwell_range[1])
    if levels < 2 or d_min < 1 or d_max < d_min or length < 1:
        raise ValueError("need levels >= 2, 1 <= dwell_min <= dwell_max, length >= 1")
    rng = np.random.default_rng(seed)
    m = lo.shape[0]
    out = np.empty((length, m))
    for c in range(m):
        grid = np.linspace(lo[c], hi[c], levels)
        pos = 0
        while pos < length:
            dwell = int(rng.integers(d_min, d_max + 1))
            value = grid[int(rng.integers(levels))]
            out[pos:pos + dwell, c] = value
            pos += dwell
    return out


@dataclass
class Dataset:
    """Subsequences plus disjoint train/validation/test index sets."""

    subsequences: list
    train_idx: list[int]
    val_idx: list[int]
    test_idx: list[int]

    def __post_init__(self):
        for u, y in self.subsequences:
            if len(u) != len(y):
                raise ValueError("every subsequence needs equal input/output length")
        all_idx = self.train_idx + self.val_idx + self.test_idx
        if len(set(all_idx)) != len(all_idx):
            raise ValueError("partitions must be disjoint")

    def part(self, which: str):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[which]
        return [self.subsequences[i] for i in idx]


def make_dataset(u_traj, y_traj, subseq_len: int, n_train: int, seed: int,
                 val_trajectories=(), test_trajectories=()) -> Dataset:
    """Cut n_train random-offset subsequences from one long experiment.

    Validation and test partitions come from separately supplied,
    physically independent trajectories, used whole.
    """
    u_traj = np.atleast_2d(np.asarray(u_traj, dtype=float).T).T if np.ndim(u_traj) == 1 else np.asarray(u_traj, dtype=float)
    y_traj = np.atleast_2d(np.asarray(y_traj, dtype=float).T).T if np.ndim(y_traj) == 1 else np.asarray(y_traj, dtype=float)
    if len(u_traj) != len(y_traj):
        raise ValueError("trajectory inputs/outputs must have equal length")
    if subseq_len > len(u_traj):
        raise ValueError("trajectory shorter than the requested subsequence length")
    if n_train < 1:
        raise ValueError("need at least one training subsequence")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, len(u_traj) - subseq_len + 1, size=n_train)
    subs = [(u_traj[o:o + subseq_len].copy(), y_traj[o:o + subseq_len].copy()) for o in offsets]
    for u, y in val_trajectories:
        subs.append((np.atleast_2d(np.asarray(u, float).T).T if np.ndim(u) == 1 else np.asarray(u, float),
                     np.atleast_2d(np.asarray(y, float).T).T if np.ndim(y) == 1 else np.asarray(y, float)))
    n_val = len(val_trajectories)
    for u, y in test_trajectories:
        subs.append((np.atleast_2d(np.asarray(u, float).T).T if np.ndim(u) == 1 else np.asarray(u, float),
                     np.atleast_2d(np.asarray(y, float).T).T if np.ndim(y) == 1 else np.asarray(y, float)))
    return Dataset(
        subsequences=subs,
        train_idx=list(range(n_train)),
        val_idx=list(range(n_train, n_train + n_val)),
        test_idx=list(range(n_train + n_val, len(subs))),
    )


# ----------------------------------------------------------------------
# Free-run simulation machinery (batched over subsequences)
# ----------------------------------------------------------------------

def _batch_initial_state(u: np.ndarray, y: np.ndarray, N: int) -> np.ndarray:
    """Vectorized initial-state builder; u, y are (S, T, m/p)."""
    blocks = []
    for i in range(1, N + 1):
        blocks.append(y[:, i - 1])
        blocks.append(u[:, max(i - 2, 0)])
    return np.concatenate(blocks, axis=1)


def _batch_free_run(params: ModelParams, u: np.ndarray, y: np.ndarray, store: bool = False):
    """Simulate each subsequence from its measured initial window.

    Returns predictions for times N..T-1, shape (S, T-N, p), plus the
    per-step intermediates needed for backpropagation when store=True.
    """
    N, m, p = params.lookback, params.input_dim, params.output_dim
    S, T = u.shape[0], u.shape[1]
    if T < N + 1:
        raise ValueError(f"subsequence length {T} too short for lookback {N}")
    x = _batch_initial_state(u, y, N)
    blk = m + p
    preds = np.empty((S, T - N, p))
    trace = [] if store else None
    for k in range(N - 1, T - 1):
        uk = u[:, k]
        h = x
        acts = []
        for layer in params.layers:
            fn = ACTIVATIONS[layer.activation][0]
            a = uk @ layer.W.T + h @ layer.U.T + layer.b
            h_new = fn(a)
            if store:
                acts.append((h, a))
            h = h_new
        y_hat = h @ params.U0.T + params.b0
        if store:
            trace.append((x, uk, acts, h))
        preds[:, k - (N - 1)] = y_hat
        x = np.concatenate([x[:, blk:], y_hat, uk], axis=1)
    return preds, trace


def simulation_mse(params: ModelParams, subsequences, washout: int = 0) -> float:
    """Mean over subsequences of the per-subsequence free-run MSE."""
    total = 0.0
    for group_u, group_y in _group_by_length(subsequences):
        preds, _ = _batch_free_run(params, group_u, group_y)
        target = group_y[:, params.lookback:]
        err = preds[:, washout:] - target[:, washout:]
        total += float(np.sum(np.mean(err ** 2, axis=(1, 2))))
    return total / len(subsequences)


def _group_by_length(subsequences):
    """Stack equal-length subsequences, preserving first-seen order."""
    groups: dict[int, list] = {}
    order = []
    for u, y in subsequences:
        T = len(u)
        if T not in groups:
            groups[T] = []
            order.append(T)
        groups[T].append((u, y))
    for T in order:
        us = np.stack([np.atleast_2d(np.asarray(u, float).T).T if np.ndim(u) == 1 else u for u, _ in groups[T]])
        ys = np.stack([np.atleast_2d(np.asarray(y, float).T).T if np.ndim(y) == 1 else y for _, y in groups[T]])
        yield us, ys


def loss_and_gradient(params: ModelParams, batch, rho_reg: float = 0.0,
                      washout: int = 0, margin_eps: float = 0.02):
    """Simulation-error loss plus contraction hinge, with full gradient.

    batch is a list of (u, y) subsequences in scaled units.  The gradient is
    returned as a ModelParams-shaped structure.  Subsequences must be at
    least lookback + washout + 1 long.
    """
    N, m, p = params.lookback, params.input_dim, params.output_dim
    for u, _ in batch:
        if len(u) < N + washout + 1:
            raise ValueError(f"subsequence of length {len(u)} too short "
                             f"(need >= {N + washout + 1})")
    grad = _zero_grads(params)
    loss = 0.0
    count = len(batch)
    for group_u, group_y in _group_by_length(batch):
        preds, trace = _batch_free_run(params, group_u, group_y, store=True)
        target = group_y[:, N:]
        err = preds[:, washout:] - target[:, washout:]
        loss += float(np.sum(np.mean(err ** 2, axis=(1, 2))))
        _backprop(params, grad, group_u, preds, target, trace, washout, count)
    loss /= count

    if rho_reg > 0.0:
        hinge, hinge_grads = _margin_hinge(params, margin_eps)
        if hinge > 0.0:
            loss += rho_reg * hinge
            for (gU, layer_idx) in hinge_grads:
                if layer_idx < 0:
                    grad.U0 += rho_reg * gU
                else:
                    grad.layers[layer_idx].U += rho_reg * gU
    return loss, grad


def _zero_grads(params: ModelParams) -> ModelParams:
    return ModelParams(
        params.lookback, params.input_dim, params.output_dim,
        [Layer(np.zeros_like(l.W), np.zeros_like(l.U), np.zeros_like(l.b), l.activation)
         for l in params.layers],
        np.zeros_like(params.U0), np.zeros_like(params.b0),
    )


def _backprop(params, grad, u, preds, target, trace, washout, n_subseq):
    """Reverse accumulation through the unrolled free run (one group)."""
    N, m, p = params.lookback, params.input_dim, params.output_dim
    S, T = u.shape[0], u.shape[1]
    blk = m + p
    n = params.state_dim
    scored = T - N - washout
    scale = 2.0 / (scored * p * n_subseq)
    g_x = np.zeros((S, n))
    for k in range(T - 2, N - 2, -1):
        x, uk, acts, h_last = trace[k - (N - 1)]
        i_pred = k - (N - 1)
        # gradient on this step's predicted output: scoring + next-state slot
        g_y = g_x[:, (N - 1) * blk:(N - 1) * blk + p].copy()
        if i_pred >= washout:
            g_y += scale * (preds[:, i_pred] - target[:, i_pred])
        # shift the state gradient one block into the past
        g_x_prev = np.zeros((S, n))
        g_x_prev[:, blk:] = g_x[:, :n - blk]
        # through the output layer and the hidden stack
        grad.U0 += g_y.T @ h_last
        grad.b0 += g_y.sum(axis=0)
        g_h = g_y @ params.U0
        for l in range(len(params.layers) - 1, -1, -1):
            layer = params.layers[l]
            h_in, a = acts[l]
            g_a = g_h * ACTIVATIONS[layer.activation][1](a)
            grad.layers[l].W += g_a.T @ uk
            grad.layers[l].b += g_a.sum(axis=0)
            grad.layers[l].U += g_a.T @ h_in
            g_h = g_a @ layer.U
        g_x = g_x_prev
        g_x += g_h  # layer-1 input is the state itself
    return


def _margin_hinge(params: ModelParams, margin_eps: float):
    """Hinge value max(0, margin + eps) and d margin / d U_l pieces."""
    mats = [(params.U0, -1)] + [(l.U, i) for i, l in enumerate(params.layers)]
    sigmas, vecs = [], []
    for M, _ in mats:
        s, uvec, vvec = spectral_norm_vectors(M)
        sigmas.append(s)
        vecs.append((uvec, vvec))
    M_layers = len(params.layers)
    prod_lip = 1.0
    for layer in params.layers:
        prod_lip *= ACTIVATIONS[layer.activation][2]
    margin = float(np.prod(sigmas)) - 1.0 / (prod_lip * math.sqrt(M_layers))
    hinge = margin + margin_eps
    if hinge <= 0.0:
        return 0.0, []
    grads = []
    for i, (M, layer_idx) in enumerate(mats):
        rest = float(np.prod([s for j, s in enumerate(sigmas) if j != i]))
        uvec, vvec = vecs[i]
        grads.append((rest * np.outer(uvec, vvec), layer_idx))
    return hinge, grads


# ----------------------------------------------------------------------
# FIT index
# ----------------------------------------------------------------------

def fit_index(y_pred, y_true) -> float:
    """100 * (1 - residual norm sum / deviation-from-mean norm sum)."""
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=float).T).T if np.ndim(y_pred) == 1 else np.asarray(y_pred, float)
    y_true = np.atleast_2d(np.asarray(y_true, dtype=float).T).T if np.ndim(y_true) == 1 else np.asarray(y_true, float)
    if y_pred.shape != y_true.shape:
        raise ValueError("sequences must have equal shape")
    avg = y_true.mean(axis=0)
    den = np.sum(np.linalg.norm(y_true - avg, axis=1))
    if den <= 0.0:
        raise ValueError("reference sequence is constant; FIT undefined")
    num = np.sum(np.linalg.norm(y_pred - y_true, axis=1))
    return 100.0 * (1.0 - num / den)


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------

@dataclass
class ArchSpec:
    lookback: int = 5
    hidden: tuple = (30,)
    activation: str = "tanh"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 1500
    rho_reg: float = 0.05
    patience: int = 200
    seed: int = 0
    washout: int = 10
    batch_size: int = 40
    margin_eps: float = 0.02
    lr_patience: int = 25
    lr_decay_ratio: float = 0.995
    lr_min: float = 1e-6
    # Gauss-Newton refinement of the final weights; exact least-squares
    # polish, affordable for small networks only
    polish: bool = False
    polish_iterations: int = 60

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.washout < 0:
            raise ValueError("washout must be nonnegative")


@dataclass
class TrainResult:
    params: ModelParams
    scaling: SignalScaling
    log: list = field(default_factory=list)   # (epoch, train_mse, val_mse, margin)
    best_epoch: int = -1
    best_val_mse: float = math.inf


def _flatten(params: ModelParams) -> np.ndarray:
    parts = []
    for l in params.layers:
        parts += [l.W.ravel(), l.U.ravel(), l.b.ravel()]
    parts += [params.U0.ravel(), params.b0.ravel()]
    return np.concatenate(parts)


def _unflatten(flat: np.ndarray, template: ModelParams) -> ModelParams:
    out = template.copy()
    pos = 0
    for l in out.layers:
        for arr in (l.W, l.U, l.b):
            arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
    for arr in (out.U0, out.b0):
        arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return out


def _init_params(arch: ArchSpec, m: int, p: int, rng: np.random.Generator) -> ModelParams:
    n = arch.lookback * (m + p)
    layers = []
    prev = n
    for width in arch.hidden:
        aW = math.sqrt(6.0 / (width + m)) * 0.5
        aU = math.sqrt(6.0 / (width + prev)) * 0.5
        layers.append(Layer(
            W=rng.uniform(-aW, aW, (width, m)),
            U=rng.uniform(-aU, aU, (width, prev)),
            b=np.zeros(width),
            activation=arch.activation,
        ))
        prev = width
    a0 = math.sqrt(6.0 / (p + prev)) * 0.25
    return ModelParams(arch.lookback, m, p,
                       layers, rng.uniform(-a0, a0, (p, prev)), np.zeros(p))


def train(dataset: Dataset, arch: ArchSpec, cfg: TrainConfig,
          scaling: SignalScaling | None = None) -> TrainResult:
    """Fit the network by simulation error; returns the best-validation model.

    Signals are affinely normalized using the training partition's extrema
    unless an explicit scaling is supplied; the scaling travels with the
    returned model.
    """
    train_subs = dataset.part("train")
    if not train_subs:
        raise ValueError("training partition is empty")
    m = np.atleast_2d(np.asarray(train_subs[0][0]).T).T.shape[-1] if np.ndim(train_subs[0][0]) == 1 else train_subs[0][0].shape[-1]
    p = np.atleast_2d(np.asarray(train_subs[0][1]).T).T.shape[-1] if np.ndim(train_subs[0][1]) == 1 else train_subs[0][1].shape[-1]
    if scaling is None:
        scaling = SignalScaling.from_data(
            np.concatenate([np.atleast_2d(np.asarray(u, float).T).T if np.ndim(u) == 1 else u for u, _ in train_subs]),
            np.concatenate([np.atleast_2d(np.asarray(y, float).T).T if np.ndim(y) == 1 else y for _, y in train_subs]),
        )

    def scaled(part):
        return [(scaling.scale_u(u), scaling.scale_y(y)) for u, y in part]

    s_train = scaled(train_subs)
    s_val = scaled(dataset.part("val")) or s_train

    rng = np.random.default_rng(cfg.seed)
    params = _init_params(arch, m, p, rng)

    theta = _flatten(params)
    adam_m = np.zeros_like(theta)
    adam_v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    lr = cfg.learning_rate

    batches = [s_train[i:i + cfg.batch_size] for i in range(0, len(s_train), cfg.batch_size)]

    result = TrainResult(params=params.copy(), scaling=scaling)
    window_ref = math.inf
    stall_val = 0
    for epoch in range(cfg.max_epochs):
        epoch_loss = 0.0
        for batch in batches:
            params = _unflatten(theta, params)
            loss, grad = loss_and_gradient(params, batch, cfg.rho_reg,
                                           cfg.washout, cfg.margin_eps)
            if not math.isfinite(loss):
                raise TrainingFailure(f"loss diverged at epoch {epoch}", epoch)
            g = _flatten(grad)
            t += 1
            adam_m = beta1 * adam_m + (1 - beta1) * g
            adam_v = beta2 * adam_v + (1 - beta2) * g * g
            m_hat = adam_m / (1 - beta1 ** t)
            v_hat = adam_v / (1 - beta2 ** t)
            theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
            epoch_loss += loss * len(batch)
        epoch_loss /= len(s_train)

        params = _unflatten(theta, params)
        val_mse = simulation_mse(params, s_val, cfg.washout)
        margin = deltaiss_margin(params)
        result.log.append((epoch, epoch_loss, val_mse, margin))

        if val_mse < result.best_val_mse:
            result.best_val_mse = val_mse
            result.best_epoch = epoch
            result.params = params.copy()
            stall_val = 0
        else:
            stall_val += 1
            if stall_val >= cfg.patience:
                break

        # halve the step size whenever a window passes without enough
        # relative improvement (shrinks the late-phase oscillation)
        if epoch % cfg.lr_patience == cfg.lr_patience - 1:
            if epoch_loss > window_ref * cfg.lr_decay_ratio and lr > cfg.lr_min:
                lr = max(lr * 0.5, cfg.lr_min)
            window_ref = epoch_loss

    if cfg.polish:
        polished = _polish(result.params, s_train, cfg)
        val_mse = simulation_mse(polished, s_val, cfg.washout)
        if val_mse < result.best_val_mse:
            result.params = polished
            result.best_val_mse = val_mse
    return result


def _stacked_residuals(params: ModelParams, subsequences, washout: int) -> np.ndarray:
    """All scored prediction errors, scaled so ||r||^2 is the mean loss."""
    parts = []
    total = 0
    for group_u, group_y in _group_by_length(subsequences):
        preds, _ = _batch_free_run(params, group_u, group_y)
        err = preds[:, washout:] - group_y[:, params.lookback:][:, washout:]
        scored = err.shape[1] * err.shape[2]
        parts.append((err.reshape(err.shape[0], -1), scored))
        total += err.shape[0]
    rows = []
    for err, scored in parts:
        rows.append((err / math.sqrt(scored * total)).ravel())
    return np.concatenate(rows)


def _polish(params: ModelParams, subsequences, cfg: TrainConfig) -> ModelParams:
    """Levenberg-Marquardt refinement with finite-difference Jacobians."""
    from .nlp import NlpEval, NlpProblem, NlpSettings, solve_nlp

    template = params.copy()
    theta0 = _flatten(params)
    h = 1e-7

    def evaluate(theta, with_jac):
        model = _unflatten(theta, template)
        r = _stacked_residuals(model, subsequences, cfg.washout)
        if not with_jac:
            return NlpEval(r=r)
        J = np.empty((r.size, theta.size))
        for j in range(theta.size):
            tp = theta.copy()
            tp[j] += h
            rp = _stacked_residuals(_unflatten(tp, template), subsequences, cfg.washout)
            tm = theta.copy()
            tm[j] -= h
            rm = _stacked_residuals(_unflatten(tm, template), subsequences, cfg.washout)
            J[:, j] = (rp - rm) / (2 * h)
        return NlpEval(r=r, J=J)

    problem = NlpProblem(n_vars=theta0.size, evaluate=evaluate)
    settings = NlpSettings(max_inner=cfg.polish_iterations, max_outer=1,
                           grad_tol=1e-14)
    res = solve_nlp(problem, theta0, settings)
    return _unflatten(res.z, template)


def free_run_outputs(params: ModelParams, scaling: SignalScaling, u_raw, y_raw,
                     scaled: bool = False):
    """Open-loop simulation of one trajectory, initialized from its head.

    Returns (y_model, y_true) aligned over times lookback..T-1, in raw
    units unless scaled=True.
    """
    u = np.atleast_2d(np.asarray(u_raw, float).T).T if np.ndim(u_raw) == 1 else np.asarray(u_raw, float)
    y = np.atleast_2d(np.asarray(y_raw, float).T).T if np.ndim(y_raw) == 1 else np.asarray(y_raw, float)
    su, sy = scaling.scale_u(u), scaling.scale_y(y)
    preds, _ = _batch_free_run(params, su[None], sy[None])
    y_model_s = preds[0]
    y_true_s = sy[params.lookback:]
    if scaled:
        return y_model_s, y_true_s
    return scaling.unscale_y(y_model_s), scaling.unscale_y(y_true_s)


def write_training_log(path, rows):
    """CSV log: epoch, train_mse, val_mse, margin."""
    with open(path, "w") as fh:
        fh.write("epoch,train_mse,val_mse,margin\n")
        for epoch, tr, va, mg in rows:
            fh.write(f"{epoch},{float(tr)!r},{float(va)!r},{float(mg)!r}\n")
