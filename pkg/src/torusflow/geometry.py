"""Geometry of the flat torus [0, L)^d.

All operations act componentwise on float64 arrays of any shape, so a whole
batch of configurations can be pushed through at once. Points live in the
half-open box [0, L)^d with opposite faces identified; tangent vectors are
ordinary vectors in R^d because the torus is flat.

Conventions:

* ``wrap`` is the canonical representative map, x - floor(x/L)*L.
* ``torus_log(a, b)`` is the displacement from ``a`` to the nearest periodic
  image of ``b``; components lie in [-L/2, L/2).
* ``torus_exp(a, v)`` walks from ``a`` along ``v`` and re-wraps.
* ``torus_distance`` is the Euclidean norm of the log, which equals the
  minimum over all periodic images.
"""

from __future__ import annotations

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid geometric inputs (bad box length, non-finite data)."""


def _check_box(box_length: float) -> float:
    box_length = float(box_length)
    if not np.isfinite(box_length) or box_length <= 0.0:
        raise GeometryError(f"box length must be finite and > 0, got {box_length}")
    return box_length


def _check_finite(name: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise GeometryError(f"{name} contains non-finite values")
    return x


def wrap(x: np.ndarray, box_length: float) -> np.ndarray:
    """Map coordinates to their canonical representative in [0, L)."""
    box_length = _check_box(box_length)
    x = _check_finite("coordinates", x)
    out = x - np.floor(x / box_length) * box_length
    # floor arithmetic can round to exactly L for tiny negative inputs; the
    # half-open invariant [0, L) wins over the literal formula there.
    return np.where(out >= box_length, 0.0, out)


def torus_log(base: np.ndarray, target: np.ndarray, box_length: float) -> np.ndarray:
    """Displacement from ``base`` to the nearest image of ``target``.

    Components lie in [-L/2, L/2); ties at the antipode resolve to -L/2.
    """
    box_length = _check_box(box_length)
    base = _check_finite("base", base)
    target = _check_finite("target", target)
    half = 0.5 * box_length
    return wrap(target - base + half, box_length) - half


def torus_exp(base: np.ndarray, tangent: np.ndarray, box_length: float) -> np.ndarray:
    """Walk from ``base`` along ``tangent`` and wrap back into the box."""
    box_length = _check_box(box_length)
    base = _check_finite("base", base)
    tangent = _check_finite("tangent", tangent)
    return wrap(base + tangent, box_length)


def torus_distance(
    x: np.ndarray, y: np.ndarray, box_length: float, axis: int = -1
) -> np.ndarray:
    """Geodesic distance: Euclidean norm of the log over ``axis``."""
    disp = torus_log(x, y, box_length)
    return np.sqrt(np.sum(disp * disp, axis=axis))


def geodesic_interp(
    t: float | np.ndarray, x0: np.ndarray, x1: np.ndarray, box_length: float
) -> np.ndarray:
    """Point a fraction ``t`` of the way along the geodesic from x0 to x1.

    ``t`` must lie in [0, 1]; it may be a scalar or broadcast against the
    endpoints (e.g. one time per batch row). At t=0 the result is wrap(x0),
    at t=1 it is wrap(x1) up to roundoff.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise GeometryError("interpolation time must lie in [0, 1]")
    return torus_exp(x0, t * torus_log(x0, x1, box_length), box_length)


def pairwise_log(positions: np.ndarray, box_length: float) -> np.ndarray:
    """All displacement vectors log_{x_j}(x_i) for one or more configurations.

    ``positions`` has shape [..., N, d]; the result has shape [..., N, N, d]
    with entry [i, j] pointing from particle j toward particle i. The diagonal
    is exactly zero.
    """
    positions = _check_finite("positions", positions)
    xi = positions[..., :, None, :]
    xj = positions[..., None, :, :]
    return torus_log(xj, xi, box_length)


def pairwise_distance(positions: np.ndarray, box_length: float) -> np.ndarray:
    """Matrix of geodesic distances for shape [..., N, d] positions."""
    disp = pairwise_log(positions, box_length)
    return np.sqrt(np.sum(disp * disp, axis=-1))
