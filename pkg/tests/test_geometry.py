"""Periodic geometry: wrap, log/exp maps, distances, interpolation."""

import numpy as np
import pytest

from torusflow.configuration import apply_action_positions, random_action
from torusflow.geometry import (
    GeometryError,
    geodesic_interp,
    pairwise_distance,
    pairwise_log,
    torus_distance,
    torus_exp,
    torus_log,
    wrap,
)


def brute_force_distance(a, b, box_length, reach=2):
    """Minimum image by explicit search over shifted copies of b."""
    d = a.shape[-1]
    grids = np.meshgrid(*[np.arange(-reach, reach + 1)] * d, indexing="ij")
    shifts = np.stack([g.ravel() for g in grids], axis=-1) * box_length
    diffs = b[..., None, :] + shifts - a[..., None, :]
    return np.min(np.linalg.norm(diffs, axis=-1), axis=-1)


def test_wrap_lands_in_half_open_box():
    rng = np.random.default_rng(0)
    L = 3.7
    x = rng.uniform(-40.0, 40.0, size=(500, 3))
    w = wrap(x, L)
    assert np.all(w >= 0.0)
    assert np.all(w < L)
    # already-wrapped points pass through untouched
    assert np.array_equal(wrap(w, L), w)


def test_wrap_boundary_cases():
    L = 1.0
    x = np.array([0.0, L, -L, 3 * L, -1e-18, L - 1e-10, 0.5])
    w = wrap(x, L)
    assert w[0] == 0.0
    assert w[1] == 0.0  # the upper edge maps to the lower one
    assert w[2] == 0.0
    assert w[3] == 0.0
    assert w[4] == 0.0  # tiny negative rounds up to L, which wraps to 0
    assert w[5] == L - 1e-10
    assert w[6] == 0.5


def test_torus_log_range_and_hand_values():
    rng = np.random.default_rng(1)
    L = 2.0
    a = rng.uniform(0, L, size=1000)
    b = rng.uniform(0, L, size=1000)
    log = torus_log(a, b, L)
    assert np.all(log >= -L / 2)
    assert np.all(log < L / 2)
    # the antipode sits on the branch cut and resolves to -L/2
    assert torus_log(np.array(0.5), np.array(1.5), L) == -1.0
    # displacement 1.6 re-centres to -0.4
    assert torus_log(np.array(0.3), np.array(1.9), L) == pytest.approx(-0.4, abs=1e-15)


def test_exp_log_round_trip():
    rng = np.random.default_rng(2)
    L = 4.2
    a = rng.uniform(0, L, size=(200, 3))
    b = rng.uniform(0, L, size=(200, 3))
    back = torus_exp(a, torus_log(a, b, L), L)
    assert np.max(torus_distance(back, b, L)) < 1e-12

    tang = rng.uniform(-L / 2, L / 2, size=(200, 3))
    again = torus_log(a, torus_exp(a, tang, L), L)
    assert np.max(np.abs(again - tang)) < 1e-12


def test_distance_matches_image_search():
    rng = np.random.default_rng(3)
    L = 1.9
    a = rng.uniform(0, L, size=(300, 3))
    b = rng.uniform(0, L, size=(300, 3))
    dist = torus_distance(a, b, L)
    ref = brute_force_distance(a, b, L)
    assert np.max(np.abs(dist - ref)) < 1e-12
    assert np.max(dist) <= np.sqrt(3) * L / 2 + 1e-12


def test_distance_symmetry_and_identity():
    rng = np.random.default_rng(4)
    L = 5.0
    a = rng.uniform(0, L, size=(50, 2))
    b = rng.uniform(0, L, size=(50, 2))
    assert np.allclose(torus_distance(a, b, L), torus_distance(b, a, L), atol=1e-15)
    assert np.all(torus_distance(a, a, L) == 0.0)


def test_action_is_isometry():
    rng = np.random.default_rng(5)
    L = 3.0
    n, d = 12, 2
    x = rng.uniform(0, L, size=(n, d))
    y = rng.uniform(0, L, size=(n, d))
    for _ in range(50):
        g = random_action(rng, n, d, L)
        gx = apply_action_positions(g, x, L)
        gy = apply_action_positions(g, y, L)
        before = torus_distance(x, y, L)
        after = torus_distance(gx, gy, L)
        assert np.max(np.abs(after - before[g.perm])) < 1e-12


def test_log_commutes_with_actions():
    rng = np.random.default_rng(6)
    L = 3.0
    n, d = 9, 3
    x = rng.uniform(0, L, size=(n, d))
    y = rng.uniform(0, L, size=(n, d))
    for _ in range(50):
        g = random_action(rng, n, d, L)
        gx = apply_action_positions(g, x, L)
        gy = apply_action_positions(g, y, L)
        lhs = torus_log(gx, gy, L)
        rhs = torus_log(x, y, L)[g.perm] @ g.axis_matrix.T
        assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_geodesic_interp_endpoints_and_midpoint():
    rng = np.random.default_rng(7)
    L = 1.0
    x0 = rng.uniform(0, L, size=(40, 2))
    x1 = rng.uniform(0, L, size=(40, 2))
    assert np.max(torus_distance(geodesic_interp(0.0, x0, x1, L), x0, L)) < 1e-15
    assert np.max(torus_distance(geodesic_interp(1.0, x0, x1, L), x1, L)) < 1e-12
    # midpoint across the seam stays on the short arc
    mid = geodesic_interp(0.5, np.array([[0.1]]), np.array([[0.9]]), L)
    assert mid[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_geodesic_interp_respects_time_domain():
    x = np.zeros((3, 2))
    with pytest.raises(GeometryError):
        geodesic_interp(-0.01, x, x, 1.0)
    with pytest.raises(GeometryError):
        geodesic_interp(1.01, x, x, 1.0)


def test_geodesic_interp_broadcasts_per_row_times():
    rng = np.random.default_rng(8)
    L = 2.0
    x0 = rng.uniform(0, L, size=(5, 4, 2))
    x1 = rng.uniform(0, L, size=(5, 4, 2))
    t = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    out = geodesic_interp(t[:, None, None], x0, x1, L)
    for i, ti in enumerate(t):
        row = geodesic_interp(ti, x0[i], x1[i], L)
        assert np.array_equal(out[i], row)


def test_pairwise_log_antisymmetry_and_distance_consistency():
    rng = np.random.default_rng(9)
    L = 3.3
    x = rng.uniform(0, L, size=(8, 2))
    plog = pairwise_log(x, L)
    pdist = pairwise_distance(x, L)
    assert plog.shape == (8, 8, 2)
    assert np.all(plog[np.arange(8), np.arange(8)] == 0.0)
    assert np.max(np.abs(plog + plog.transpose(1, 0, 2))) < 1e-12
    assert np.max(np.abs(pdist - np.linalg.norm(plog, axis=-1))) < 1e-12


def test_pairwise_batched_layout():
    rng = np.random.default_rng(10)
    L = 2.5
    x = rng.uniform(0, L, size=(4, 6, 3))
    batched = pairwise_distance(x, L)
    assert batched.shape == (4, 6, 6)
    for b in range(4):
        assert np.array_equal(batched[b], pairwise_distance(x[b], L))


def test_invalid_inputs_raise():
    with pytest.raises(GeometryError):
        wrap(np.array([0.1]), 0.0)
    with pytest.raises(GeometryError):
        wrap(np.array([0.1]), -1.0)
    with pytest.raises(GeometryError):
        wrap(np.array([np.nan]), 1.0)
    with pytest.raises(GeometryError):
        torus_log(np.array([0.1]), np.array([np.inf]), 1.0)
