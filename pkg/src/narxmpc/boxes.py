"""Axis-aligned interval sets and the robust positively invariant set.

Boxes are all this control scheme needs: the disturbance set is an
infinity-norm ball confined to the newest output slot of the state, the
shift matrix is a 0/1 selection, so every Minkowski sum along the way stays
a box and the set arithmetic below is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnarx import build_structural_matrices, y_slot_indices


@dataclass(frozen=True)
class Box:
    """Per-coordinate intervals [lo_i, hi_i]; may be flagged empty."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=float)))
        if self.lo.shape != self.hi.shape:
            raise ValueError("lo and hi must have the same shape")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.lo > self.hi + 1e-15))

    @classmethod
    def singleton(cls, point) -> "Box":
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(point.copy(), point.copy())

    @classmethod
    def symmetric(cls, radius, dim: int | None = None) -> "Box":
        r = np.atleast_1d(np.asarray(radius, dtype=float))
        if dim is not None and r.shape[0] == 1:
            r = np.full(dim, r[0])
        return cls(-r, r.copy())

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        """Membership test for one point (n,) or a batch (K, n)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.all(pts >= self.lo - tol, axis=1) & np.all(pts <= self.hi + tol, axis=1)
        return ok if np.ndim(points) > 1 else bool(ok[0])

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if self.is_empty:
            raise ValueError("cannot sample from an empty box")
        return rng.uniform(self.lo, self.hi, size=(count, self.dim))

    def translate(self, point) -> "Box":
        point = np.asarray(point, dtype=float)
        return Box(self.lo + point, self.hi + point)


def minkowski_add(a: Box, b: Box) -> Box:
    """{x + y : x in a, y in b}; exact for boxes."""
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    return Box(a.lo + b.lo, a.hi + b.hi)


def pontryagin_subtract(a: Box, b: Box) -> Box:
    """{x : x + b subset of a}; empty result is flagged, not raised."""
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    return Box(a.lo - b.lo, a.hi - b.hi)


def box_linear_image(M: np.ndarray, box: Box) -> Box:
    """Tightest box containing M * box (exact when M selects coordinates)."""
    M = np.asarray(M, dtype=float)
    pos = np.clip(M, 0.0, None)
    neg = np.clip(M, None, 0.0)
    return Box(pos @ box.lo + neg @ box.hi, pos @ box.hi + neg @ box.lo)


def disturbance_box(N: int, m: int, p: int, w_check: float) -> Box:
    """Additive-uncertainty set: amplitude w_check on the newest output slot."""
    if w_check < 0:
        raise ValueError("disturbance amplitude must be nonnegative")
    n = N * (m + p)
    r = np.zeros(n)
    base = (N - 1) * (m + p)
    r[base:base + p] = w_check
    return Box(-r, r)


def compute_rpi(N: int, m: int, p: int, w_check: float) -> Box:
    """Invariant set of the shift-driven error dynamics e+ = A e + w.

    The shift matrix is nilpotent, so the infinite Minkowski sum of mapped
    disturbance sets terminates after N terms and is computed exactly.
    """
    S = build_structural_matrices(N, m, p)
    W = disturbance_box(N, m, p, w_check)
    omega = Box.singleton(np.zeros(N * (m + p)))
    Aj = np.eye(N * (m + p))
    for _ in range(N):
        omega = minkowski_add(omega, box_linear_image(Aj, W))
        Aj = S.A @ Aj
    return omega


def rpi_output_halfwidth(omega: Box, N: int, m: int, p: int) -> np.ndarray:
    """Per-output half-width of C * omega (the output tube)."""
    base = (N - 1) * (m + p)
    return omega.hi[base:base + p].copy()


def rpi_invariance_check(omega: Box, N: int, m: int, p: int, w_check: float,
                         samples: int = 10_000, seed: int = 0) -> bool:
    """Sampled test that A e + w stays inside omega."""
    S = build_structural_matrices(N, m, p)
    W = disturbance_box(N, m, p, w_check)
    rng = np.random.default_rng(seed)
    e = omega.sample(rng, samples)
    w = np.zeros_like(e)
    ys = y_slot_indices(N, m, p)[-p:]
    w[:, ys] = rng.uniform(-w_check, w_check, size=(samples, p))
    nxt = e @ S.A.T + w
    return bool(np.all(omega.contains(nxt, tol=1e-12)))
