"""Affine input/output scaling between physical and normalized units.

The network is trained on signals mapped to roughly [-1, 1]; the scaling
constants travel with the model so every external interface speaks
physical units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SignalScaling:
    """Per-channel affine maps: scaled = (raw - center) / half."""

    u_center: np.ndarray
    u_half: np.ndarray
    y_center: np.ndarray
    y_half: np.ndarray

    def __post_init__(self):
        for name in ("u_half", "y_half"):
            if np.any(getattr(self, name) <= 0):
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def identity(cls, m: int, p: int) -> "SignalScaling":
        return cls(np.zeros(m), np.ones(m), np.zeros(p), np.ones(p))

    @classmethod
    def from_data(cls, u: np.ndarray, y: np.ndarray) -> "SignalScaling":
        """Fit so the extrema of the supplied trajectories map to +/-1."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        u_lo, u_hi = u.min(axis=0), u.max(axis=0)
        y_lo, y_hi = y.min(axis=0), y.max(axis=0)
        if np.any(u_hi <= u_lo) or np.any(y_hi <= y_lo):
            raise ValueError("cannot fit scaling to constant data")
        return cls(
            u_center=0.5 * (u_lo + u_hi),
            u_half=0.5 * (u_hi - u_lo),
            y_center=0.5 * (y_lo + y_hi),
            y_half=0.5 * (y_hi - y_lo),
        )

    # raw <-> scaled, elementwise over trailing channel axis
    def scale_u(self, u):
        return (np.asarray(u, dtype=float) - self.u_center) / self.u_half

    def unscale_u(self, u):
        return np.asarray(u, dtype=float) * self.u_half + self.u_center

    def scale_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_center) / self.y_half

    def unscale_y(self, y):
        return np.asarray(y, dtype=float) * self.y_half + self.y_center
