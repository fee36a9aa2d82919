"""Robot-frame action parameterization shared by the simulator, extractor and loop.

Flat layout (``n`` intermediate waypoints)::

    [w_interaction(3), w_mid(3*n), w_end(3), theta_ypr(3), g, t_close_frac, t_open_frac]

With a single midpoint the continuous block is 13 values and the vector is 15 long.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Vec3 = tuple[float, float, float]

# minimum gap kept between the close and open schedule fractions
SCHEDULE_GAP = 0.02


def _vec3(v) -> Vec3:
    x, y, z = (float(c) for c in v)
    return (x, y, z)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Prior:
    w_interaction: Vec3
    w_mid: tuple[Vec3, ...]
    w_end: Vec3
    theta_ypr: Vec3
    g: float
    t_close_frac: float
    t_open_frac: float

    def __post_init__(self):
        object.__setattr__(self, "w_interaction", _vec3(self.w_interaction))
        object.__setattr__(self, "w_mid", tuple(_vec3(w) for w in self.w_mid))
        object.__setattr__(self, "w_end", _vec3(self.w_end))
        object.__setattr__(self, "theta_ypr", _vec3(self.theta_ypr))
        object.__setattr__(self, "g", float(self.g))
        object.__setattr__(self, "t_close_frac", float(self.t_close_frac))
        object.__setattr__(self, "t_open_frac", float(self.t_open_frac))

    @property
    def n_mid(self) -> int:
        return len(self.w_mid)

    @property
    def continuous_dim(self) -> int:
        return 3 * (2 + self.n_mid) + 3 + 1

    @property
    def dim(self) -> int:
        return self.continuous_dim + 2

    def to_vector(self) -> np.ndarray:
        parts = [self.w_interaction, *self.w_mid, self.w_end, self.theta_ypr]
        flat = [c for p in parts for c in p]
        flat += [self.g, self.t_close_frac, self.t_open_frac]
        return np.asarray(flat, dtype=float)

    @classmethod
    def from_vector(cls, v, n_mid: int = 1) -> "Prior":
        v = np.asarray(v, dtype=float)
        expected = 3 * (2 + n_mid) + 6
        if v.shape != (expected,):
            raise ValueError(f"expected a vector of length {expected}, got shape {v.shape}")
        mids = tuple(tuple(v[3 + 3 * i: 6 + 3 * i]) for i in range(n_mid))
        o = 3 + 3 * n_mid
        return cls(
            w_interaction=tuple(v[0:3]),
            w_mid=mids,
            w_end=tuple(v[o:o + 3]),
            theta_ypr=tuple(v[o + 3:o + 6]),
            g=v[o + 6],
            t_close_frac=v[o + 7],
            t_open_frac=v[o + 8],
        )

    def clamped(self) -> "Prior":
        """Return a copy with gripper, schedule and angles forced into valid ranges."""
        g = min(max(self.g, 0.0), 1.0)
        tc = min(max(self.t_close_frac, 0.0), 1.0 - SCHEDULE_GAP)
        to = min(max(self.t_open_frac, tc + SCHEDULE_GAP), 1.0)
        ypr = tuple(wrap_angle(a) for a in self.theta_ypr)
        return Prior(self.w_interaction, self.w_mid, self.w_end, ypr, g, tc, to)

    def apply_residual(self, delta) -> "Prior":
        """Prior plus residual, re-clamped."""
        return Prior.from_vector(self.to_vector() + np.asarray(delta, dtype=float), self.n_mid).clamped()

    def waypoints(self) -> list[Vec3]:
        return [self.w_interaction, *self.w_mid, self.w_end]
