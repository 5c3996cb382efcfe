"""Small numeric helpers shared across modules."""
from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]. Works elementwise on arrays."""
    w = np.mod(-np.asarray(a) + np.pi, TWO_PI)
    return -(w - np.pi)


def unit(v, axis=-1, eps=1e-12):
    """Normalize vector(s); returns (unit, norm). Zero vectors stay zero."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    safe = np.where(n > eps, n, 1.0)
    return v / safe, np.squeeze(n, axis=axis)
