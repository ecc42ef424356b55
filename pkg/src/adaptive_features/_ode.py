"""Fixed-step explicit integrators shared by the flow modules."""

from __future__ import annotations

from typing import Callable

import numpy as np


def rk4_step(field: Callable[[np.ndarray], np.ndarray], y: np.ndarray, dt: float) -> np.ndarray:
    k1 = field(y)
    k2 = field(y + (0.5 * dt) * k1)
    k3 = field(y + (0.5 * dt) * k2)
    k4 = field(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def euler_step(field: Callable[[np.ndarray], np.ndarray], y: np.ndarray, dt: float) -> np.ndarray:
    return y + dt * field(y)


STEPPERS = {"rk4": rk4_step, "euler": euler_step}
