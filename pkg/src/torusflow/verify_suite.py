"""Self-contained property checks runnable from the command line.

Five suites: geometry identities, group algebra and energy invariance,
velocity-field and interpolant equivariance, autodiff against central finite
differences, and importance-sampling estimators against analytic oracles.
Each check returns a record instead of raising, so one broken invariant
still leaves a full table. ``quick`` trims iteration counts, nothing else.

Everything here is seeded; a pass is reproducible, not probabilistic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .configuration import (
    Configuration,
    apply_action,
    apply_action_positions,
    compose_actions,
    identity_action,
    invert_action,
    ipl_system,
    kob_andersen_system,
    random_action,
)
from .estimators import WeightedSample, effective_sample_size, snis_mean, specific_heat
from .geometry import geodesic_interp, torus_distance, torus_exp, torus_log, wrap
from .potentials import total_energy
from .training import make_train_batch, si_loss
from .velocity_net import GnnConfig, TorusGnn

# Mean of cos(angle) under density proportional to exp(cos(angle)) on the
# circle: ratio of modified Bessel functions I1(1)/I0(1), from the series.
CIRCLE_MOMENT = 0.4463899658965766


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str


def _result(suite: str, name: str, err: float, tol: float, extra: str = "") -> CheckResult:
    detail = f"max err {err:.3e} (tol {tol:.0e})"
    if extra:
        detail += f"; {extra}"
    return CheckResult(suite, name, bool(err <= tol), detail)


def _rel(err_arr, ref_arr, floor: float = 1e-12) -> float:
    err = float(np.max(np.abs(np.asarray(err_arr))))
    ref = float(np.max(np.abs(np.asarray(ref_arr))))
    return err / max(ref, floor)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def geometry_checks(quick: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(20260601)
    iters = 100 if quick else 1000
    L = 4.5
    out = []

    a = rng.uniform(0.0, L, size=(iters, 3))
    b = rng.uniform(0.0, L, size=(iters, 3))
    log = torus_log(a, b, L)
    round_trip = torus_exp(a, log, L)
    out.append(
        _result("geometry", "exp/log round trip", float(np.max(np.abs(round_trip - b))), 1e-12)
    )
    in_range = bool(np.all(log >= -L / 2) and np.all(log < L / 2))
    out.append(
        CheckResult(
            "geometry",
            "log range [-L/2, L/2)",
            in_range,
            f"min {float(np.min(log)):.6f}, max {float(np.max(log)):.6f}",
        )
    )

    # Brute-force nearest image over all lattice shifts k in {-2..2}^d.
    shifts = np.array(np.meshgrid(*([np.arange(-2, 3)] * 3))).reshape(3, -1).T * L
    diffs = b[:, None, :] - a[:, None, :] + shifts[None]
    brute = np.min(np.sqrt(np.sum(diffs * diffs, axis=-1)), axis=1)
    out.append(
        _result(
            "geometry",
            "distance vs image search",
            float(np.max(np.abs(torus_distance(a, b, L) - brute))),
            1e-12,
        )
    )

    iso_err = equi_err = 0.0
    x = rng.uniform(0.0, L, size=(iters, 8, 2))
    y = rng.uniform(0.0, L, size=(iters, 8, 2))
    for k in range(iters):
        g = random_action(rng, 8, 2, L)
        gx = apply_action_positions(g, x[k], L)
        gy = apply_action_positions(g, y[k], L)
        d_before = torus_distance(x[k], y[k], L)[g.perm]
        d_after = torus_distance(gx, gy, L)
        iso_err = max(iso_err, float(np.max(np.abs(d_after - d_before))))
        log_moved = torus_log(x[k], y[k], L)[g.perm] @ g.axis_matrix.T
        equi_err = max(equi_err, float(np.max(np.abs(torus_log(gx, gy, L) - log_moved))))
    out.append(_result("geometry", "action is an isometry", iso_err, 1e-12))
    out.append(_result("geometry", "log commutes with actions", equi_err, 1e-12))

    # Wrap boundary behavior stays in the half-open box.
    probe = wrap(np.array([-1e-18, 0.0, L, L - 1e-18, -L, 3 * L]), L)
    ok = np.all((probe >= 0.0) & (probe < L))
    out.append(CheckResult("geometry", "wrap half-open boundary", bool(ok), f"probe={probe}"))
    return out


# ---------------------------------------------------------------------------
# Group algebra and energy invariance
# ---------------------------------------------------------------------------


def group_checks(quick: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(20260602)
    iters = 100 if quick else 1000
    L = 4.5
    n, d = 8, 2
    assoc = ident = inverse = 0.0
    for _ in range(iters):
        config = Configuration(
            rng.integers(0, 2, size=n), rng.uniform(0.0, L, size=(n, d)), L
        )
        g1 = random_action(rng, n, d, L)
        g2 = random_action(rng, n, d, L)
        lhs = apply_action(compose_actions(g1, g2), config)
        rhs = apply_action(g1, apply_action(g2, config))
        assoc = max(assoc, float(np.max(torus_distance(lhs.positions, rhs.positions, L))))
        if not np.array_equal(lhs.species, rhs.species):
            assoc = max(assoc, 1.0)
        ident = max(
            ident,
            float(
                np.max(
                    torus_distance(
                        apply_action(identity_action(n, d), config).positions,
                        config.positions,
                        L,
                    )
                )
            ),
        )
        undone = apply_action(invert_action(g1), apply_action(g1, config))
        inverse = max(
            inverse, float(np.max(torus_distance(undone.positions, config.positions, L)))
        )
        if not np.array_equal(undone.species, config.species):
            inverse = max(inverse, 1.0)
    out = [
        _result("group", "composition matches sequential application", assoc, 1e-12),
        _result("group", "identity acts trivially", ident, 1e-12),
        _result("group", "inverse undoes the action", inverse, 1e-12),
    ]

    for system in (ipl_system(10), kob_andersen_system(11)):
        worst = 0.0
        for _ in range(max(iters // 10, 10)):
            species = rng.permutation(system.species_template())
            positions = rng.uniform(
                0.0, system.box_length, size=(system.n_particles, system.dim)
            )
            config = Configuration(species, positions, system.box_length)
            u0 = total_energy(system.potential, config.species, config.positions, system.box_length)
            moved = apply_action(
                random_action(rng, system.n_particles, system.dim, system.box_length), config
            )
            u1 = total_energy(system.potential, moved.species, moved.positions, system.box_length)
            worst = max(worst, abs(u1 - u0) / max(abs(u0), 1e-12))
        label = "ipl" if system.n_species == 2 else "kob-andersen"
        out.append(_result("group", f"energy invariance ({label})", worst, 1e-9))
    return out


# ---------------------------------------------------------------------------
# Equivariance of the velocity field and the interpolant
# ---------------------------------------------------------------------------


def randomized_params(model: TorusGnn, rng: np.random.Generator) -> dict:
    """Fully random weights: the zero-initialized decoder tail is randomized
    too, so the field is nonzero and the check is not vacuous."""
    params = model.init_params(rng)
    for name, p in params.items():
        fan_in = p.data.shape[0] if p.data.ndim == 2 else max(p.data.size, 1)
        p.data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=p.data.shape)
    return params


def equivariance_checks(quick: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(20260603)
    iters = 20 if quick else 200
    L = ipl_system(10).box_length
    model = TorusGnn(GnnConfig(box_length=L))
    n, d = 10, 2
    net_err = 0.0
    for k in range(iters):
        if k % 50 == 0:
            params = randomized_params(model, rng)
        species = rng.integers(0, 2, size=(1, n))
        positions = rng.uniform(0.0, L, size=(1, n, d))
        t = float(rng.uniform())
        g = random_action(rng, n, d, L)
        v = model.forward_positions(params, t, positions, species).data[0]
        moved_positions = apply_action_positions(g, positions, L)
        v_moved = model.forward_positions(
            params, t, moved_positions, species[:, g.perm]
        ).data[0]
        expected = v[g.perm] @ g.axis_matrix.T
        net_err = max(net_err, _rel(v_moved - expected, expected, floor=1e-9))
    out = [_result("equivariance", "velocity field commutes with actions", net_err, 1e-9)]

    interp_err = 0.0
    for _ in range(iters):
        x0 = rng.uniform(0.0, L, size=(n, d))
        x1 = rng.uniform(0.0, L, size=(n, d))
        t = float(rng.uniform())
        g = random_action(rng, n, d, L)
        lhs = geodesic_interp(
            t, apply_action_positions(g, x0, L), apply_action_positions(g, x1, L), L
        )
        rhs = apply_action_positions(g, geodesic_interp(t, x0, x1, L), L)
        interp_err = max(interp_err, float(np.max(torus_distance(lhs, rhs, L))))
    out.append(_result("equivariance", "interpolant commutes with actions", interp_err, 1e-12))
    return out


# ---------------------------------------------------------------------------
# Gradients against central finite differences
# ---------------------------------------------------------------------------


def _fd_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(x)
        flat[i] = keep - h
        down = fn(x)
        flat[i] = keep
        gf[i] = (up - down) / (2.0 * h)
    return g


def _primitive_cases(rng: np.random.Generator) -> list[tuple[str, np.ndarray, object]]:
    """(name, input, fn mapping an array or leaf Tensor to a scalar Tensor).

    Each fn funnels its argument straight into the primitive under test, so
    the identical expression serves finite differences (plain arrays, no
    tape), reverse mode (leaf on a tape), and forward mode (jvp).
    """
    L = 2.0
    x34 = rng.normal(size=(3, 4))
    xpos = rng.uniform(0.5, 1.5, size=(3, 4))
    r34 = rng.normal(size=(3, 4))
    r32 = rng.normal(size=(3, 2))
    r354 = rng.normal(size=(3, 5, 4))
    other = rng.normal(size=(3, 4)) + 2.0
    w42 = rng.normal(size=(4, 2))
    b2 = rng.normal(size=2)
    # Interior points for the periodic ops keep finite differences away from
    # the (measure-zero) jump set.
    xin = rng.uniform(0.2, 1.7, size=(3, 4))
    base = rng.uniform(0.9, 1.1, size=(3, 4))

    def weighted(expr_fn, weight):
        def fn(x):
            out = expr_fn(ad.as_tensor(x))
            return ad.total_sum(ad.mul(out, ad.as_tensor(weight)))

        return fn

    return [
        ("add", x34, weighted(lambda t: ad.add(t, ad.as_tensor(other)), r34)),
        ("sub", x34, weighted(lambda t: ad.sub(ad.as_tensor(other), t), r34)),
        ("neg", x34, weighted(ad.neg, r34)),
        ("mul", x34, weighted(lambda t: ad.mul(t, ad.as_tensor(other)), r34)),
        ("div", x34, weighted(lambda t: ad.div(ad.as_tensor(other), t), r34)),
        ("div-num", x34, weighted(lambda t: ad.div(t, ad.as_tensor(other)), r34)),
        ("scale", x34, weighted(lambda t: ad.scale(t, -1.7), r34)),
        ("matmul", x34, weighted(lambda t: ad.matmul(t, ad.as_tensor(w42)), r32)),
        (
            "matmul-rhs",
            w42,
            weighted(lambda t: ad.matmul(ad.as_tensor(x34), t), r32),
        ),
        (
            "linear",
            w42,
            weighted(lambda t: ad.linear(ad.as_tensor(x34), t, ad.as_tensor(b2)), r32),
        ),
        (
            "concat",
            x34,
            weighted(lambda t: ad.concat([t, ad.as_tensor(other)], axis=-1), rng.normal(size=(3, 8))),
        ),
        ("slice", x34, weighted(lambda t: t[1:, :2], rng.normal(size=(2, 2)))),
        ("reshape", x34, weighted(lambda t: ad.reshape(t, (2, 6)), rng.normal(size=(2, 6)))),
        (
            "broadcast",
            x34,
            weighted(lambda t: ad.broadcast_to(ad.reshape(t, (3, 1, 4)), (3, 5, 4)), r354),
        ),
        ("sum-along", x34, weighted(lambda t: ad.sum_along(t, -1), rng.normal(size=3))),
        ("total-sum", x34, lambda x: ad.total_sum(ad.as_tensor(x))),
        ("square", x34, weighted(ad.square, r34)),
        ("sqrt", xpos, weighted(ad.sqrt, r34)),
        ("tanh", x34, weighted(ad.tanh, r34)),
        ("sigmoid", x34, weighted(ad.sigmoid, r34)),
        ("silu", x34, weighted(ad.silu, r34)),
        ("wrap", xin, weighted(lambda t: ad.wrap(t, L), r34)),
        ("torus-log-target", xin, weighted(lambda t: ad.torus_log(ad.as_tensor(base), t, L), r34)),
        ("torus-log-base", base, weighted(lambda t: ad.torus_log(t, ad.as_tensor(xin), L), r34)),
    ]


def gradient_checks(quick: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(20260604)
    out = []
    worst_primitive = ("", 0.0)
    worst_jvp = ("", 0.0)
    for name, x, case_fn in _primitive_cases(rng):
        scalar_fn = lambda arr: float(case_fn(arr).data)  # noqa: E731
        # Reverse mode: record the same expression with a gradient leaf.
        with ad.Tape() as tape:
            leaf = ad.Tensor(x.copy(), requires_grad=True)
            loss_val = case_fn(leaf)
        grads = ad.backward(tape, loss_val)
        grad = grads.get(leaf)
        if grad is None:
            out.append(CheckResult("gradient", f"vjp {name}", False, "no gradient reached the leaf"))
            continue
        fd = _fd_grad(scalar_fn, x.copy())
        rel = _rel(grad - fd, fd, floor=1.0)
        if rel > worst_primitive[1]:
            worst_primitive = (name, rel)
        # Forward mode along one random direction vs the same FD scalar.
        direction = rng.normal(size=x.shape)
        h = 1e-6
        fd_dir = (scalar_fn(x + h * direction) - scalar_fn(x - h * direction)) / (2 * h)
        jvp_val = float(np.sum(ad.jvp(case_fn, x.copy(), direction)))
        rel_j = abs(jvp_val - fd_dir) / max(abs(fd_dir), 1.0)
        if rel_j > worst_jvp[1]:
            worst_jvp = (name, rel_j)
    out.append(
        _result(
            "gradient", "primitive vjp vs finite differences", worst_primitive[1], 1e-5,
            extra=f"worst: {worst_primitive[0]}",
        )
    )
    out.append(
        _result(
            "gradient", "primitive jvp vs finite differences", worst_jvp[1], 1e-5,
            extra=f"worst: {worst_jvp[0]}",
        )
    )

    # Full training-loss gradient on a tiny model.
    system = ipl_system(4)
    model = TorusGnn(GnnConfig(box_length=system.box_length, depth=2, width=6, edge_dim=6))
    params = randomized_params(model, rng)
    batch = _tiny_batch(system, rng)
    with ad.Tape() as tape:
        loss = si_loss(model, params, batch)
    grads = ad.backward(tape, loss)
    names = sorted(params)
    worst = 0.0
    stride = 7 if quick else 3
    for name in names:
        p = params[name]
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = np.asarray(g).reshape(-1)
        for i in range(0, flat.size, stride):
            keep = flat[i]
            h = 1e-6
            flat[i] = keep + h
            up = si_loss(model, params, batch).data
            flat[i] = keep - h
            down = si_loss(model, params, batch).data
            flat[i] = keep
            fd = (float(up) - float(down)) / (2 * h)
            worst = max(worst, abs(gf[i] - fd) / max(abs(fd), 1.0))
    out.append(_result("gradient", "training-loss gradient vs finite differences", worst, 1e-4))

    # Exact divergence vs central finite differences of the velocity field.
    from .ode_flow import make_augmented_rhs

    n, d = 4, 2
    species = rng.integers(0, 2, size=(2, n))
    x = rng.uniform(0.0, system.box_length, size=(2, n, d))
    rhs = make_augmented_rhs(model, params, species, with_likelihood=True)
    y = np.concatenate([x.reshape(2, -1), np.zeros((2, 1))], axis=1)
    div_exact = -rhs(0.37, y)[:, -1]
    h = 1e-5
    div_fd = np.zeros(2)
    for i in range(n * d):
        yp = y.copy()
        yp[:, i] += h
        ym = y.copy()
        ym[:, i] -= h
        vp = rhs(0.37, yp)[:, i]
        vm = rhs(0.37, ym)[:, i]
        div_fd += (vp - vm) / (2 * h)
    out.append(
        _result(
            "gradient",
            "exact divergence vs finite differences",
            _rel(div_exact - div_fd, div_fd, floor=1.0),
            1e-4,
        )
    )
    return out


def _tiny_batch(system, rng: np.random.Generator):
    n, d = system.n_particles, system.dim
    species = np.stack([rng.permutation(system.species_template()) for _ in range(2)])
    p0 = rng.uniform(0.0, system.box_length, size=(2, n, d))
    p1 = rng.uniform(0.0, system.box_length, size=(2, n, d))
    perm = np.stack([np.arange(n)] * 2)
    t = rng.uniform(size=2)
    return make_train_batch(system, species, p0, p1, perm, t)


# ---------------------------------------------------------------------------
# Importance-sampling oracles
# ---------------------------------------------------------------------------


def importance_checks(quick: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(20260605)
    out = []

    # Circle oracle: uniform proposal, target density proportional to
    # exp(cos(angle)); the reweighted mean of cos must hit the Bessel ratio.
    n_draws = 20_000 if quick else 100_000
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_draws)
    log_w = np.cos(theta)
    mean, stderr = snis_mean(np.cos(theta), log_w)
    err = abs(mean - CIRCLE_MOMENT)
    out.append(
        CheckResult(
            "importance",
            "circle moment within 3 standard errors",
            err <= 3.0 * stderr,
            f"estimate {mean:.6f} vs {CIRCLE_MOMENT:.6f}, stderr {stderr:.2e}",
        )
    )

    # Two-level system: uniform proposal over the states, exact heat capacity.
    delta, temperature = 1.0, 1.0
    n_draws = 200_000 if quick else 400_000
    states = rng.integers(0, 2, size=n_draws)
    energies = delta * states
    samples = [
        WeightedSample(
            species=np.zeros(1, dtype=np.int64),
            positions=np.zeros((1, 2)),
            log_model_density=0.0,
            energy=float(e),
            log_target_unnorm=float(-e / temperature),
        )
        for e in energies
    ]
    p = np.exp(-delta / temperature) / (1.0 + np.exp(-delta / temperature))
    exact = delta * delta * p * (1.0 - p) / (temperature * temperature)
    got = specific_heat(samples, temperature, n_particles=1)
    rel = abs(got.value - exact) / exact
    out.append(
        _result(
            "importance", "two-state specific heat", rel, 1e-2,
            extra=f"estimate {got.value:.5f} vs exact {exact:.5f}",
        )
    )

    flat = np.zeros(500)
    ess_flat = effective_sample_size(flat)
    spiked = np.concatenate([[50.0], np.zeros(499)])
    ess_spiked = effective_sample_size(spiked)
    arbitrary = rng.normal(size=500)
    ess_arb = effective_sample_size(arbitrary)
    ok = (
        abs(ess_flat - 500.0) < 1e-9
        and ess_spiked < 1.001
        and 1.0 <= ess_arb <= 500.0
    )
    out.append(
        CheckResult(
            "importance",
            "effective sample size bounds",
            bool(ok),
            f"flat {ess_flat:.1f}, spiked {ess_spiked:.3f}, random {ess_arb:.1f}",
        )
    )
    return out


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


SUITES = {
    "geometry": geometry_checks,
    "group": group_checks,
    "equivariance": equivariance_checks,
    "gradient": gradient_checks,
    "importance": importance_checks,
}


def run_all(quick: bool = False, suites: list[str] | None = None) -> list[CheckResult]:
    chosen = suites or list(SUITES)
    unknown = [s for s in chosen if s not in SUITES]
    if unknown:
        raise ValueError(f"unknown suites: {unknown}; choose from {sorted(SUITES)}")
    results: list[CheckResult] = []
    for name in chosen:
        results.extend(SUITES[name](quick=quick))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(f"{r.suite}: {r.name}") for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"[{status}] {f'{r.suite}: {r.name}':<{width}}  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(
        f"{len(results) - n_fail}/{len(results)} checks passed"
        + (f", {n_fail} FAILED" if n_fail else "")
    )
    return "\n".join(lines)
