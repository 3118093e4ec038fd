"""Deterministic transport of base samples through the learned velocity field.

The generative map integrates dX/dt = v(t, X) from t=0 (uniform base) to t=1,
jointly with the log-density along the path: d(log q)/dt = -div v, where the
divergence is exact, assembled from one batched forward-tangent sweep over
the recorded tape (all N*d basis directions at once). Both blocks form one
augmented state under a shared adaptive Dormand-Prince 5(4) step controller.

Positions are integrated on the universal cover (plain R^{N*d}) and wrapped
once at the end; the network only ever sees coordinates through periodic
displacement maps, so its field is periodic and the cover introduces no
approximation.

Reproducibility: base draws come from per-(seed, sample index) streams, so a
sample's identity never depends on how the run is chunked; integrated
endpoints are bit-reproducible given (seed, n_samples, chunk_size) because
samples in a chunk share adaptive steps (the error norm is the max over the
chunk, so every sample still meets the tolerance).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .configuration import SystemSpec, system_from_dict
from .geometry import torus_distance, wrap
from .potentials import total_energy
from .training import base_log_density

SAMPLES_FORMAT = "torusflow-samples"
SAMPLES_VERSION = 1


class OdeError(RuntimeError):
    """Raised for integrator failures: bad state, exhausted step budget."""


# Dormand-Prince 5(4) tableau. The last row of A equals the 5th-order weights
# (FSAL: the 7th stage of an accepted step is the next step's first stage).
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th-order minus embedded 4th-order weights; dotting the stages with this
# gives the local error estimate directly.
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-5
    abs_tol: float = 1e-5
    max_steps: int = 100_000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0
    fixed_step: float | None = None  # bypasses adaptivity (order studies)

    def __post_init__(self):
        if self.rel_tol <= 0.0 or self.abs_tol <= 0.0:
            raise OdeError("tolerances must be > 0")
        if self.max_steps < 1:
            raise OdeError("max_steps must be >= 1")


@dataclass
class IntegrationStats:
    n_steps: int = 0
    n_rejected: int = 0
    n_evals: int = 0

    def add(self, other: "IntegrationStats") -> None:
        self.n_steps += other.n_steps
        self.n_rejected += other.n_rejected
        self.n_evals += other.n_evals


@dataclass
class FlowResult:
    species: np.ndarray  # [N] or [B, N]
    positions: np.ndarray  # wrapped endpoint, [N, d] or [B, N, d]
    log_density: np.ndarray | float  # log q at the endpoint
    stats: IntegrationStats


def _error_norm(err: np.ndarray, y_old: np.ndarray, y_new: np.ndarray, cfg) -> float:
    scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y_old), np.abs(y_new))
    ratios = err / scale
    per_sample = np.sqrt(np.mean(ratios * ratios, axis=-1))
    return float(np.max(per_sample))


def _initial_step(f, t0: float, y0: np.ndarray, f0: np.ndarray, direction: float, cfg) -> float:
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = float(np.max(np.sqrt(np.mean((y0 / scale) ** 2, axis=-1))))
    d1 = float(np.max(np.sqrt(np.mean((f0 / scale) ** 2, axis=-1))))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * direction * f0
    f1 = f(t0 + h0 * direction, y1)
    d2 = float(np.max(np.sqrt(np.mean(((f1 - f0) / scale) ** 2, axis=-1)))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1)


def integrate_field(f, y0: np.ndarray, t0: float, t1: float, cfg: IntegratorConfig):
    """Adaptive (or fixed-step) embedded RK5(4) on a batched flat state.

    ``f(t, y)`` and ``y0`` use shape [batch, state]; returns (y1, stats).
    The error norm is the max over the batch of per-sample scaled RMS norms,
    so each sample individually honors the tolerances.
    """
    y = np.asarray(y0, dtype=np.float64)
    if y.ndim != 2:
        raise OdeError("state must be [batch, flat]")
    if t1 == t0:
        return y.copy(), IntegrationStats()
    stats = IntegrationStats()
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t = t0
    k1 = f(t0, y)
    stats.n_evals += 1
    if not np.all(np.isfinite(k1)):
        raise OdeError("non-finite velocity at the initial state")

    if cfg.fixed_step is not None:
        n_sub = max(1, int(round(span / cfg.fixed_step)))
        h = direction * span / n_sub
        for i in range(n_sub):
            k = [k1] + [None] * 6
            for s in range(1, 7):
                ys = y + h * sum(a * k[m] for m, a in enumerate(_A[s]))
                k[s] = f(t + _C[s] * h, ys)
                stats.n_evals += 1
            y = y + h * sum(b * ks for b, ks in zip(_B, k) if b != 0.0)
            t = t0 + direction * span * (i + 1) / n_sub
            k1 = f(t, y)  # FSAL stage doubles as the next first stage
            stats.n_evals += 1
            stats.n_steps += 1
            if not np.all(np.isfinite(y)):
                raise OdeError("non-finite state during fixed-step integration")
        return y, stats

    h = direction * min(span, _initial_step(f, t0, y, k1, direction, cfg))
    stats.n_evals += 1  # probe inside _initial_step
    while (t1 - t) * direction > 0.0:
        if stats.n_steps + stats.n_rejected >= cfg.max_steps:
            raise OdeError(
                f"step budget {cfg.max_steps} exhausted at t={t:.6g}; "
                "loosen the tolerances or raise max_steps"
            )
        if (t + h - t1) * direction > 0.0:
            h = t1 - t
        k = [k1] + [None] * 6
        for s in range(1, 7):
            ys = y + h * sum(a * k[m] for m, a in enumerate(_A[s]))
            k[s] = f(t + _C[s] * h, ys)
            stats.n_evals += 1
        y_new = y + h * sum(b * ks for b, ks in zip(_B, k) if b != 0.0)
        if not np.all(np.isfinite(y_new)):
            raise OdeError(f"non-finite state at t={t:.6g}")
        err_vec = h * sum(e * ks for e, ks in zip(_E, k) if e != 0.0)
        err = _error_norm(err_vec, y, y_new, cfg)
        if err <= 1.0:
            t = t + h
            y = y_new
            k1 = k[6]  # FSAL
            stats.n_steps += 1
            factor = cfg.max_factor if err == 0.0 else cfg.safety * err**-0.2
            h *= min(cfg.max_factor, max(cfg.min_factor, factor))
        else:
            stats.n_rejected += 1
            h *= max(cfg.min_factor, cfg.safety * err**-0.2)
    return y, stats


# ---------------------------------------------------------------------------
# Velocity-field plumbing
# ---------------------------------------------------------------------------


def make_augmented_rhs(model, params: dict, species: np.ndarray, with_likelihood: bool):
    """RHS over flat state [B, N*d (+1)]; the tail slot carries log q."""
    species = np.asarray(species, dtype=np.int64)
    n_batch, n = species.shape
    d = model.config.dim
    n_dof = n * d
    seeds = np.broadcast_to(
        np.eye(n_dof).reshape(n_dof, 1, n, d), (n_dof, n_batch, n, d)
    )

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        x = y[:, :n_dof].reshape(n_batch, n, d)
        if not with_likelihood:
            v = model.forward_positions(params, t, x, species)
            return v.data.reshape(n_batch, n_dof)
        with ad.Tape() as tape:
            xt = ad.as_tensor(x)
            v = model.forward_positions(params, t, xt, species)
        try:
            tangent = ad.forward_tangents(tape, {xt: seeds}, [v])[0]
        finally:
            tape.release()
        divergence = np.einsum("ibi->b", tangent.reshape(n_dof, n_batch, n_dof))
        return np.concatenate(
            [v.data.reshape(n_batch, n_dof), -divergence[:, None]], axis=1
        )

    return rhs


def integrate_batch(
    model,
    params: dict,
    species: np.ndarray,
    positions: np.ndarray,
    cfg: IntegratorConfig = IntegratorConfig(),
    with_likelihood: bool = True,
    t0: float = 0.0,
    t1: float = 1.0,
    log_density0: np.ndarray | None = None,
):
    """Integrate a batch of configurations; returns (positions, log_density, stats)."""
    positions = np.asarray(positions, dtype=np.float64)
    n_batch, n, d = positions.shape
    L = model.config.box_length
    flat = positions.reshape(n_batch, n * d)
    if with_likelihood:
        if log_density0 is None:
            raise OdeError("with_likelihood needs the starting log-density")
        logq = np.broadcast_to(np.asarray(log_density0, dtype=np.float64), (n_batch,))
        y0 = np.concatenate([flat, logq[:, None]], axis=1)
    else:
        y0 = flat
    rhs = make_augmented_rhs(model, params, species, with_likelihood)
    y1, stats = integrate_field(rhs, y0, t0, t1, cfg)
    out_positions = wrap(y1[:, : n * d].reshape(n_batch, n, d), L)
    out_logq = y1[:, -1].copy() if with_likelihood else None
    return out_positions, out_logq, stats


def integrate(
    model,
    params: dict,
    config,
    cfg: IntegratorConfig = IntegratorConfig(),
    with_likelihood: bool = True,
    t0: float = 0.0,
    t1: float = 1.0,
    log_density0: float | None = None,
) -> FlowResult:
    """Push one configuration through the flow (t0 -> t1, default baseward->data)."""
    if log_density0 is None and with_likelihood:
        log_density0 = -config.n_particles * config.dim * np.log(config.box_length)
    pos, logq, stats = integrate_batch(
        model,
        params,
        config.species[None],
        config.positions[None],
        cfg,
        with_likelihood,
        t0,
        t1,
        None if log_density0 is None else np.asarray([log_density0]),
    )
    return FlowResult(
        species=config.species.copy(),
        positions=pos[0],
        log_density=float(logq[0]) if logq is not None else None,
        stats=stats,
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _base_draw(system: SystemSpec, seed: int, index: int):
    """Base draw for one global sample index; independent of chunking."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, index))))
    positions = rng.uniform(0.0, system.box_length, size=(system.n_particles, system.dim))
    species = rng.permutation(system.species_template())
    return species, positions


def _integrate_chunk(model, params, system, seed, lo, hi, cfg):
    """One chunk of the sampling run: draw indices [lo, hi), push through the flow.

    Both the serial and the worker-pool paths funnel through here, so the two
    produce identical numbers for a given chunk size.
    """
    logq0 = base_log_density(system)
    drawn = [_base_draw(system, seed, i) for i in range(lo, hi)]
    species = np.stack([s for s, _ in drawn])
    positions = np.stack([p for _, p in drawn])
    pos1, logq1, chunk_stats = integrate_batch(
        model, params, species, positions, cfg, True, 0.0, 1.0, logq0
    )
    energies = np.atleast_1d(total_energy(system.potential, species, pos1, system.box_length))
    return species, pos1, logq1, energies, chunk_stats


# Worker-pool state, set once per worker by the pool initializer. Workers are
# spawned (not forked) so each one loads its own interpreter; the parent pins
# the BLAS env vars to one thread for the spawn so n_workers processes never
# oversubscribe the machine.
_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)
_WORKER_CTX = None


def _sample_worker_init(model, params, system, cfg):
    global _WORKER_CTX
    _WORKER_CTX = (model, params, system, cfg)


def _sample_worker_run(task):
    seed, lo, hi = task
    model, params, system, cfg = _WORKER_CTX
    return (lo, hi) + _integrate_chunk(model, params, system, seed, lo, hi, cfg)


def sample_flow(
    model,
    params: dict,
    system: SystemSpec,
    n_samples: int,
    seed: int,
    cfg: IntegratorConfig = IntegratorConfig(),
    chunk_size: int = 64,
    out_path: str | None = None,
    provenance: dict | None = None,
    progress=None,
    n_workers: int = 1,
):
    """Generate weighted samples from the flow; optionally stream to a file.

    Returns (samples, stats) where ``samples`` is a list of WeightedSample.

    ``n_workers > 1`` integrates chunks in a process pool. Results are
    identical to the serial path for the same chunk_size: sample draws are
    keyed by global index and chunks integrate independently either way.
    """
    from .estimators import WeightedSample

    if n_samples < 1 or chunk_size < 1:
        raise OdeError("n_samples and chunk_size must be >= 1")
    if n_workers < 1:
        raise OdeError("n_workers must be >= 1")
    stats = IntegrationStats()
    samples: list[WeightedSample] = []
    writer = _SampleWriter(out_path, system, n_samples, seed, cfg, provenance) if out_path else None
    temperature = system.temperature

    def emit(species, pos1, logq1, energies):
        log_targets = -energies / temperature
        for j in range(species.shape[0]):
            ws = WeightedSample(
                species=species[j],
                positions=pos1[j],
                log_model_density=float(logq1[j]),
                energy=float(energies[j]),
                log_target_unnorm=float(log_targets[j]),
            )
            samples.append(ws)
            if writer:
                writer.write(ws)

    bounds = [(lo, min(lo + chunk_size, n_samples)) for lo in range(0, n_samples, chunk_size)]
    try:
        if n_workers == 1 or len(bounds) == 1:
            for lo, hi in bounds:
                species, pos1, logq1, energies, chunk_stats = _integrate_chunk(
                    model, params, system, seed, lo, hi, cfg
                )
                stats.add(chunk_stats)
                emit(species, pos1, logq1, energies)
                if progress:
                    progress(hi, n_samples, stats)
        else:
            _run_sample_pool(
                model, params, system, seed, cfg, bounds,
                min(n_workers, len(bounds)), stats, emit, progress, n_samples,
            )
    finally:
        if writer:
            writer.close()
    return samples, stats


def _run_sample_pool(model, params, system, seed, cfg, bounds, n_workers,
                     stats, emit, progress, n_samples):
    """Fan chunks out to spawned workers; emit results in sample-index order."""
    import concurrent.futures
    import multiprocessing
    import os

    saved = {v: os.environ.get(v) for v in _BLAS_VARS}
    for v in _BLAS_VARS:
        os.environ[v] = "1"
    try:
        ctx = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=n_workers,
            mp_context=ctx,
            initializer=_sample_worker_init,
            initargs=(model, params, system, cfg),
        ) as pool:
            futures = [pool.submit(_sample_worker_run, (seed, lo, hi)) for lo, hi in bounds]
            done: dict[int, tuple] = {}
            order = iter([lo for lo, _ in bounds])
            next_lo = next(order)
            for fut in concurrent.futures.as_completed(futures):
                lo, hi, species, pos1, logq1, energies, chunk_stats = fut.result()
                stats.add(chunk_stats)
                done[lo] = (hi, species, pos1, logq1, energies)
                while next_lo in done:
                    hi_, species_, pos1_, logq1_, energies_ = done.pop(next_lo)
                    emit(species_, pos1_, logq1_, energies_)
                    if progress:
                        progress(hi_, n_samples, stats)
                    next_lo = next(order, -1)
    finally:
        for v, old in saved.items():
            if old is None:
                os.environ.pop(v, None)
            else:
                os.environ[v] = old


# ---------------------------------------------------------------------------
# Symmetry and inversion checks
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryCheck:
    max_position_deviation: float
    log_density_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return (
            self.max_position_deviation <= self.tolerance
            and self.log_density_deviation <= self.tolerance
        )


def equivariance_trajectory_check(
    model, params: dict, config, action, cfg: IntegratorConfig = IntegratorConfig()
) -> TrajectoryCheck:
    """Transporting then acting must equal acting then transporting.

    The group action has unit Jacobian, so the endpoint log-densities must
    agree as well. The tolerance is 10x the integrator tolerance.
    """
    from .configuration import apply_action

    res_plain = integrate(model, params, config, cfg)
    res_acted = integrate(model, params, apply_action(action, config), cfg)
    final_plain = type(config)(
        species=res_plain.species, positions=res_plain.positions, box_length=config.box_length
    )
    transported = apply_action(action, final_plain)
    dist = torus_distance(
        transported.positions, res_acted.positions, config.box_length
    )
    if not np.array_equal(transported.species, res_acted.species):
        raise OdeError("species bookkeeping diverged between the two routes")
    return TrajectoryCheck(
        max_position_deviation=float(np.max(dist)),
        log_density_deviation=abs(res_plain.log_density - res_acted.log_density),
        tolerance=10.0 * max(cfg.rel_tol, cfg.abs_tol),
    )


# ---------------------------------------------------------------------------
# Sample files: JSON header line + fixed little-endian records of
# (species u1[N], positions f8[N*d], log q f8, energy f8, log target f8).
# ---------------------------------------------------------------------------


def _sample_dtype(n: int, d: int) -> np.dtype:
    return np.dtype(
        [
            ("species", "u1", (n,)),
            ("positions", "<f8", (n, d)),
            ("log_model_density", "<f8"),
            ("energy", "<f8"),
            ("log_target_unnorm", "<f8"),
        ]
    )


class _SampleWriter:
    def __init__(self, path, system, n_samples, seed, cfg, provenance):
        self.fh = open(path, "wb")
        header = {
            "format": SAMPLES_FORMAT,
            "version": SAMPLES_VERSION,
            "n_samples": int(n_samples),
            "seed": int(seed),
            "integrator": {
                "rel_tol": cfg.rel_tol,
                "abs_tol": cfg.abs_tol,
                "max_steps": cfg.max_steps,
            },
            "provenance": provenance or {},
            **system.to_dict(),
        }
        self.fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        self.fh.write(b"\n")
        self.dtype = _sample_dtype(system.n_particles, system.dim)

    def write(self, ws) -> None:
        rec = np.zeros(1, dtype=self.dtype)
        rec["species"] = ws.species.astype(np.uint8)
        rec["positions"] = ws.positions
        rec["log_model_density"] = ws.log_model_density
        rec["energy"] = ws.energy
        rec["log_target_unnorm"] = ws.log_target_unnorm
        self.fh.write(rec.tobytes())

    def close(self) -> None:
        self.fh.close()


def read_samples(path: str):
    """Load a sample file; returns (system, list of WeightedSample, header)."""
    from .estimators import WeightedSample

    with open(path, "rb") as fh:
        line = fh.readline()
        if not line.endswith(b"\n"):
            raise OdeError("missing sample-file header line")
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise OdeError(f"malformed sample-file header: {exc}") from exc
        if header.get("format") != SAMPLES_FORMAT:
            raise OdeError(f"not a sample file (format={header.get('format')!r})")
        system = system_from_dict(header)
        dtype = _sample_dtype(system.n_particles, system.dim)
        payload = fh.read()
    n = int(header["n_samples"])
    if len(payload) != n * dtype.itemsize:
        raise OdeError(f"payload is {len(payload)} bytes, expected {n * dtype.itemsize}")
    rec = np.frombuffer(payload, dtype=dtype)
    samples = [
        WeightedSample(
            species=rec["species"][i].astype(np.int64),
            positions=rec["positions"][i].astype(np.float64),
            log_model_density=float(rec["log_model_density"][i]),
            energy=float(rec["energy"][i]),
            log_target_unnorm=float(rec["log_target_unnorm"][i]),
        )
        for i in range(n)
    ]
    return system, samples, header
