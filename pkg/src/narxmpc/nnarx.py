"""Neural NARX model in nonminimal state-space form.

The state stacks the last N (output, previous-input) pairs,

    x = [z_1', ..., z_N']',    z_i = [y_(k-N+i)', u_(k-N-1+i)']',

so the transition is a block shift that appends (eta(x, u), u) as the new
last block, where eta is a small feed-forward network.  Everything here is
a pure function of its arguments; arrays with leading batch dimensions are
accepted wherever it makes sense (row-vector convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scaling import SignalScaling

# activation tag -> (function, derivative, Lipschitz constant); all entries
# must be zero-centered so the origin stays an equilibrium of the zero model
ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2, 1.0),
    "identity": (lambda a: a, lambda a: np.ones_like(a), 1.0),
}


@dataclass
class Layer:
    """One hidden layer: sigma(W u + U h_prev + b)."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    activation: str = "tanh"


@dataclass
class ModelParams:
    """All network weights plus the structural dimensions.

    Attributes
    ----------
    lookback : int
        Number N of past (y, u) pairs in the state.
    input_dim, output_dim : int
        m and p.  The state dimension is n = N (m + p).
    layers : list of Layer
        Hidden layers; layer 1 reads the state, later layers read the
        previous layer, and every layer also reads the current input.
    U0, b0 : arrays
        Affine output layer mapping the last hidden layer to p outputs.
    """

    lookback: int
    input_dim: int
    output_dim: int
    layers: list[Layer] = field(default_factory=list)
    U0: np.ndarray = None
    b0: np.ndarray = None

    def __post_init__(self):
        if min(self.lookback, self.input_dim, self.output_dim) < 1:
            raise ValueError("lookback, input_dim and output_dim must be >= 1")
        if not self.layers:
            raise ValueError("at least one hidden layer is required")
        n = self.state_dim
        prev = n
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            width = layer.b.shape[0]
            if layer.W.shape != (width, self.input_dim):
                raise ValueError(f"layer {i + 1}: W must be ({width}, {self.input_dim})")
            if layer.U.shape != (width, prev):
                raise ValueError(f"layer {i + 1}: U must be ({width}, {prev})")
            prev = width
        if self.U0.shape != (self.output_dim, prev):
            raise ValueError(f"U0 must be ({self.output_dim}, {prev})")
        if self.b0.shape != (self.output_dim,):
            raise ValueError(f"b0 must be ({self.output_dim},)")

    @property
    def state_dim(self) -> int:
        return self.lookback * (self.input_dim + self.output_dim)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.lookback,
            self.input_dim,
            self.output_dim,
            [Layer(l.W.copy(), l.U.copy(), l.b.copy(), l.activation) for l in self.layers],
            self.U0.copy(),
            self.b0.copy(),
        )


@dataclass(frozen=True)
class StructuralMatrices:
    """Explicit A, B_u, B_x, C of the nonminimal realization."""

    A: np.ndarray
    B_u: np.ndarray
    B_x: np.ndarray
    C: np.ndarray


def build_structural_matrices(N: int, m: int, p: int) -> StructuralMatrices:
    """Assemble the block-shift realization matrices for given dimensions."""
    if min(N, m, p) < 1:
        raise ValueError("dimensions must be >= 1")
    blk = m + p
    n = N * blk
    A = np.zeros((n, n))
    for i in range(N - 1):
        A[i * blk:(i + 1) * blk, (i + 1) * blk:(i + 2) * blk] = np.eye(blk)
    B_u = np.zeros((n, m))
    B_u[(N - 1) * blk + p:, :] = np.eye(m)
    B_x = np.zeros((n, p))
    B_x[(N - 1) * blk:(N - 1) * blk + p, :] = np.eye(p)
    C = np.zeros((p, n))
    C[:, (N - 1) * blk:(N - 1) * blk + p] = np.eye(p)
    return StructuralMatrices(A=A, B_u=B_u, B_x=B_x, C=C)


def y_slot_indices(N: int, m: int, p: int) -> np.ndarray:
    """State indices holding past outputs, block by block."""
    blk = m + p
    return np.concatenate([np.arange(i * blk, i * blk + p) for i in range(N)])


def u_slot_indices(N: int, m: int, p: int) -> np.ndarray:
    """State indices holding past inputs, block by block."""
    blk = m + p
    return np.concatenate([np.arange(i * blk + p, (i + 1) * blk) for i in range(N)])


def state_from_window(y_window: np.ndarray, u_window: np.ndarray) -> np.ndarray:
    """Pack N past outputs and N past inputs (oldest first) into a state.

    `u_window[j]` must be the input that was held during the interval ending
    at the instant of `y_window[j]`.
    """
    y_window = np.atleast_2d(np.asarray(y_window, dtype=float))
    u_window = np.atleast_2d(np.asarray(u_window, dtype=float))
    if y_window.shape[0] != u_window.shape[0]:
        raise ValueError("windows must have equal length")
    return np.concatenate(
        [np.concatenate([y_window[i], u_window[i]]) for i in range(y_window.shape[0])]
    )


def initial_state(u_seq: np.ndarray, y_seq: np.ndarray, lookback: int) -> np.ndarray:
    """State at sample N-1 of a trajectory whose rows pair (u_k, y_k).

    Convention: y_k is measured at instant k, u_k is applied over [k, k+1).
    The input preceding the window is unknown and is backfilled with u_0.
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    y_seq = np.atleast_2d(np.asarray(y_seq, dtype=float))
    N = lookback
    if len(u_seq) < N or len(y_seq) < N:
        raise ValueError(f"need at least {N} samples to build the state")
    u_window = np.vstack([u_seq[:1], u_seq[: N - 1]])
    return state_from_window(y_seq[:N], u_window)


def current_output(x: np.ndarray, N: int, m: int, p: int) -> np.ndarray:
    """The output stored in the newest block of the state."""
    base = (N - 1) * (m + p)
    return np.asarray(x)[..., base:base + p]


def previous_input(x: np.ndarray, N: int, m: int, p: int) -> np.ndarray:
    """The input stored in the newest block of the state."""
    base = (N - 1) * (m + p) + p
    return np.asarray(x)[..., base:base + m]


def ffnn_eval(params: ModelParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Evaluate the regression function eta(x, u); batched over leading axes."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != params.state_dim or u.shape[-1] != params.input_dim:
        raise ValueError("state/input dimension mismatch")
    h = x
    for layer in params.layers:
        act = ACTIVATIONS[layer.activation][0]
        h = act(u @ layer.W.T + h @ layer.U.T + layer.b)
    return h @ params.U0.T + params.b0


def ffnn_jacobian(params: ModelParams, x: np.ndarray, u: np.ndarray):
    """d eta / d x (p, n) and d eta / d u (p, m) at a single point."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h = x
    Jx = np.eye(params.state_dim)
    Ju = np.zeros((params.state_dim, params.input_dim))
    for layer in params.layers:
        fn, deriv, _ = ACTIVATIONS[layer.activation]
        a = u @ layer.W.T + h @ layer.U.T + layer.b
        d = deriv(a)[:, None]
        Jx = d * (layer.U @ Jx)
        Ju = d * (layer.U @ Ju + layer.W)
        h = fn(a)
    return params.U0 @ Jx, params.U0 @ Ju


def step(params: ModelParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One transition A x + B_u u + B_x eta(x, u), done structurally."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    y_next = ffnn_eval(params, x, u)
    blk = params.input_dim + params.output_dim
    return np.concatenate([x[..., blk:], y_next, u], axis=-1)


def simulate(params: ModelParams, x0: np.ndarray, u_seq: np.ndarray) -> np.ndarray:
    """Free-run rollout; returns the output after each of the K steps."""
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if len(u_seq) == 0:
        raise ValueError("input sequence must be nonempty")
    x = np.asarray(x0, dtype=float)
    out = np.empty((len(u_seq), params.output_dim))
    for k, u in enumerate(u_seq):
        y = ffnn_eval(params, x, u)
        blk = params.input_dim + params.output_dim
        x = np.concatenate([x[blk:], y, u])
        out[k] = y
    return out


def jacobians(params: ModelParams, x: np.ndarray, u: np.ndarray):
    """State and input Jacobians of the full transition map."""
    S = build_structural_matrices(params.lookback, params.input_dim, params.output_dim)
    Jx, Ju = ffnn_jacobian(params, x, u)
    return S.A + S.B_x @ Jx, S.B_u + S.B_x @ Ju


def spectral_norm(M: np.ndarray, tol: float = 1e-10, max_iter: int = 500) -> float:
    """Largest singular value by power iteration on M'M.

    Deterministic all-ones start; tolerance on the relative change of the
    Rayleigh estimate.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] < M.shape[1]:
        M = M.T
    v = np.ones(M.shape[1]) / math.sqrt(M.shape[1])
    sigma = 0.0
    for _ in range(max_iter):
        w = M @ v
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        v_new = M.T @ (w / nw)
        nv = float(np.linalg.norm(v_new))
        if nv == 0.0:
            return 0.0
        v = v_new / nv
        if abs(nw - sigma) <= tol * max(nw, 1e-30):
            sigma = nw
            break
        sigma = nw
    return float(np.linalg.norm(M @ v))


def spectral_norm_vectors(M: np.ndarray, tol: float = 1e-10, max_iter: int = 500):
    """Power iteration returning (sigma, left vector, right vector).

    Needed for the gradient of the largest singular value; zero matrices
    yield zero vectors (a valid subgradient choice).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    rows, cols = M.shape
    v = np.ones(cols) / math.sqrt(cols)
    sigma = 0.0
    for _ in range(max_iter):
        w = M @ v
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0, np.zeros(rows), np.zeros(cols)
        v_new = M.T @ (w / nw)
        nv = float(np.linalg.norm(v_new))
        if nv == 0.0:
            return 0.0, np.zeros(rows), np.zeros(cols)
        v = v_new / nv
        if abs(nw - sigma) <= tol * max(nw, 1e-30):
            sigma = nw
            break
        sigma = nw
    w = M @ v
    sigma = float(np.linalg.norm(w))
    u = w / sigma if sigma > 0 else np.zeros(rows)
    return sigma, u, v


def deltaiss_margin(params: ModelParams) -> float:
    """Certificate value: negative means the contraction condition holds.

    Product of the spectral norms of all inter-layer weight matrices minus
    1 / (product of activation Lipschitz constants * sqrt(M)).
    """
    M = len(params.layers)
    prod_norms = spectral_norm(params.U0)
    prod_lip = 1.0
    for layer in params.layers:
        prod_norms *= spectral_norm(layer.U)
        prod_lip *= ACTIVATIONS[layer.activation][2]
    return prod_norms - 1.0 / (prod_lip * math.sqrt(M))


# ----------------------------------------------------------------------
# Model file I/O: a line-oriented text format, 17 significant digits so
# save -> load round-trips bit-exactly.
# ----------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_matrix(fh, name: str, M: np.ndarray):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    fh.write(f"{name} {M.shape[0]} {M.shape[1]}\n")
    for row in M:
        fh.write(" ".join(_fmt(v) for v in row) + "\n")


class _LineReader:
    def __init__(self, fh):
        self.lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        self.pos = 0

    def next(self) -> str:
        ln = self.lines[self.pos]
        self.pos += 1
        return ln


def _read_matrix(rd: _LineReader, name: str) -> np.ndarray:
    head = rd.next().split()
    if head[0] != name:
        raise ValueError(f"model file: expected section {name!r}, got {head[0]!r}")
    rows, cols = int(head[1]), int(head[2])
    M = np.empty((rows, cols))
    for i in range(rows):
        M[i] = [float(v) for v in rd.next().split()]
    return M


def save_model(path, params: ModelParams, scaling: SignalScaling):
    """Write weights, dimensions, activation tags and scaling constants."""
    with open(path, "w") as fh:
        fh.write("narxmpc-model 1\n")
        fh.write(f"lookback {params.lookback}\n")
        fh.write(f"input_dim {params.input_dim}\n")
        fh.write(f"output_dim {params.output_dim}\n")
        fh.write(f"hidden_layers {len(params.layers)}\n")
        for i, layer in enumerate(params.layers, start=1):
            fh.write(f"activation_{i} {layer.activation}\n")
        for i, layer in enumerate(params.layers, start=1):
            _write_matrix(fh, f"W_{i}", layer.W)
            _write_matrix(fh, f"U_{i}", layer.U)
            _write_matrix(fh, f"b_{i}", layer.b[None, :])
        _write_matrix(fh, "U_0", params.U0)
        _write_matrix(fh, "b_0", params.b0[None, :])
        _write_matrix(fh, "u_center", scaling.u_center[None, :])
        _write_matrix(fh, "u_half", scaling.u_half[None, :])
        _write_matrix(fh, "y_center", scaling.y_center[None, :])
        _write_matrix(fh, "y_half", scaling.y_half[None, :])


def load_model(path) -> tuple[ModelParams, SignalScaling]:
    with open(path) as fh:
        rd = _LineReader(fh)
    magic = rd.next().split()
    if magic[0] != "narxmpc-model":
        raise ValueError("not a model file")
    meta = {}
    for _ in range(4):
        key, val = rd.next().split()
        meta[key] = int(val)
    acts = []
    for _ in range(meta["hidden_layers"]):
        _, tag = rd.next().split()
        acts.append(tag)
    layers = []
    for i in range(1, meta["hidden_layers"] + 1):
        W = _read_matrix(rd, f"W_{i}")
        U = _read_matrix(rd, f"U_{i}")
        b = _read_matrix(rd, f"b_{i}")[0]
        layers.append(Layer(W=W, U=U, b=b, activation=acts[i - 1]))
    U0 = _read_matrix(rd, "U_0")
    b0 = _read_matrix(rd, "b_0")[0]
    params = ModelParams(meta["lookback"], meta["input_dim"], meta["output_dim"], layers, U0, b0)
    scaling = SignalScaling(
        u_center=_read_matrix(rd, "u_center")[0],
        u_half=_read_matrix(rd, "u_half")[0],
        y_center=_read_matrix(rd, "y_center")[0],
        y_half=_read_matrix(rd, "y_half")[0],
    )
    return params, scaling
