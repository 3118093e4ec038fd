"""Metropolis Monte Carlo reference sampler for the particle systems.

Chains run in lockstep, vectorized across the chain axis, but each chain owns
an independent counter-based stream seeded from (seed, chain_index). Stream
consumption is fixed per sweep: each chain draws uniforms [n_moves, 3]
(move type, selector, acceptance) followed by standard normals [n_moves, d],
whether or not every draw ends up used. A chain's trajectory therefore never
depends on how many chains run beside it or on what the others accept.

One sweep = N attempted moves. A move is either a single-particle Gaussian
displacement or, with configurable probability, a species swap between two
particles of different species (the pair is decoded from one uniform over
all cross-species pairs in canonical index order). Energy differences are
incremental O(N); totals are recomputed at every frame save so accumulation
drift never reaches the data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .configuration import SystemSpec, write_dataset
from .geometry import torus_distance, wrap
from .potentials import pair_energy_elementwise, total_energy


class McmcError(ValueError):
    """Raised for invalid sampler configuration or inconsistent state."""


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 8
    equilibration_sweeps: int = 500
    production_sweeps: int = 2000
    save_interval_sweeps: int = 10
    displacement_std: float = 0.065
    swap_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_chains < 1:
            raise McmcError("n_chains must be >= 1")
        if self.equilibration_sweeps < 0 or self.production_sweeps < 0:
            raise McmcError("sweep counts must be >= 0")
        if self.save_interval_sweeps < 1:
            raise McmcError("save_interval_sweeps must be >= 1")
        if self.displacement_std <= 0.0:
            raise McmcError("displacement_std must be > 0")
        if not 0.0 <= self.swap_probability <= 1.0:
            raise McmcError("swap_probability must lie in [0, 1]")

    @property
    def frames_per_chain(self) -> int:
        return self.production_sweeps // self.save_interval_sweeps


@dataclass
class McmcResult:
    system: SystemSpec
    species: np.ndarray  # [n_frames, N], chain-major frame order
    positions: np.ndarray  # [n_frames, N, d]
    energy_traces: np.ndarray  # [n_chains, total_sweeps], end-of-sweep energies
    displacement_acceptance: float  # production phase
    swap_acceptance: float | None

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]


class _SwapTable:
    """Decode one uniform into an unordered cross-species particle pair.

    Cross pairs are enumerated block-by-block over species pairs (s, t) with
    s < t; within a block the pair is (a-th particle of s, b-th particle of t)
    in ascending particle-index order. Compositions are conserved by swaps, so
    the table is fixed for a whole run.
    """

    def __init__(self, composition: tuple[int, ...]):
        counts = np.asarray(composition, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pairs = [
            (s, t, counts[s] * counts[t])
            for s in range(len(counts))
            for t in range(s + 1, len(counts))
            if counts[s] > 0 and counts[t] > 0
        ]
        self.n_cross = int(sum(size for _, _, size in pairs))
        self.block_s = np.array([s for s, _, _ in pairs], dtype=np.int64)
        self.block_t = np.array([t for _, t, _ in pairs], dtype=np.int64)
        self.block_nt = counts[self.block_t] if pairs else np.zeros(0, dtype=np.int64)
        sizes = np.array([size for _, _, size in pairs], dtype=np.int64)
        self.block_end = np.cumsum(sizes)
        self.block_start = self.block_end - sizes

    def decode(self, u: np.ndarray, species: np.ndarray):
        """(selector uniforms [C], species [C, N]) -> particle pairs and labels."""
        k = np.minimum((u * self.n_cross).astype(np.int64), self.n_cross - 1)
        blk = np.searchsorted(self.block_end, k, side="right")
        local = k - self.block_start[blk]
        s = self.block_s[blk]
        t = self.block_t[blk]
        a_rank = local // self.block_nt[blk]
        b_rank = local % self.block_nt[blk]
        order = np.argsort(species, axis=1, kind="stable")
        rows = np.arange(species.shape[0])
        a_idx = order[rows, self.offsets[s] + a_rank]
        b_idx = order[rows, self.offsets[t] + b_rank]
        return a_idx, b_idx, s, t


def _neighbor_distances(
    point: np.ndarray, positions: np.ndarray, box_length: float, pad: float, *masked
) -> np.ndarray:
    """Distances from one point per chain to all particles, masked slots padded."""
    dist = torus_distance(point[:, None, :], positions, box_length)
    rows = np.arange(positions.shape[0])
    for idx in masked:
        dist[rows, idx] = pad
    return dist


def run_chains(
    system: SystemSpec,
    cfg: McmcConfig = McmcConfig(),
    out_path: str | None = None,
    provenance: dict | None = None,
    progress=None,
) -> McmcResult:
    """Run the lockstep chains; optionally persist frames as a dataset file."""
    potential = system.potential
    n_chains, n, d = cfg.n_chains, system.n_particles, system.dim
    box_length, temperature = system.box_length, system.temperature
    swap_table = None
    if cfg.swap_probability > 0.0:
        swap_table = _SwapTable(system.composition)
        if swap_table.n_cross == 0:
            raise McmcError("swap moves need at least two populated species")
    # Any separation >= every cutoff contributes zero energy; used to pad
    # masked slots (the moved particle itself, the swap partner).
    pad = float(np.max(potential.cutoff_matrix()))

    rngs = [
        np.random.Generator(np.random.Philox(np.random.SeedSequence((cfg.seed, c))))
        for c in range(n_chains)
    ]
    # Initial state comes first in each chain's stream: species arrangement,
    # then uniform positions.
    species = np.stack([rng.permutation(system.species_template()) for rng in rngs])
    positions = wrap(
        np.stack([rng.uniform(0.0, box_length, size=(n, d)) for rng in rngs]),
        box_length,
    )
    energy = np.atleast_1d(total_energy(potential, species, positions, box_length))

    total_sweeps = cfg.equilibration_sweeps + cfg.production_sweeps
    traces = np.empty((n_chains, total_sweeps))
    n_frames_per_chain = cfg.frames_per_chain
    frame_species = np.empty((n_chains * n_frames_per_chain, n), dtype=np.int64)
    frame_positions = np.empty((n_chains * n_frames_per_chain, n, d))
    rows = np.arange(n_chains)
    disp_attempts = disp_accepts = swap_attempts = swap_accepts = 0

    for sweep in range(total_sweeps):
        uniforms = np.stack([rng.random((n, 3)) for rng in rngs])
        normals = np.stack([rng.standard_normal((n, d)) for rng in rngs])
        in_production = sweep >= cfg.equilibration_sweeps
        for m in range(n):
            u_type = uniforms[:, m, 0]
            u_pick = uniforms[:, m, 1]
            u_accept = uniforms[:, m, 2]
            want_swap = (
                u_type < cfg.swap_probability
                if swap_table is not None
                else np.zeros(n_chains, dtype=bool)
            )
            move = np.zeros(n_chains)

            disp = ~want_swap
            if np.any(disp):
                i = np.minimum((u_pick * n).astype(np.int64), n - 1)
                old = positions[rows, i]
                prop = wrap(old + cfg.displacement_std * normals[:, m], box_length)
                d_old = _neighbor_distances(old, positions, box_length, pad, i)
                d_new = _neighbor_distances(prop, positions, box_length, pad, i)
                s_i = species[rows, i][:, None]
                delta = (
                    pair_energy_elementwise(potential, s_i, species, d_new)
                    - pair_energy_elementwise(potential, s_i, species, d_old)
                ).sum(axis=1)
                with np.errstate(divide="ignore"):
                    accept = disp & (np.log(u_accept) < -delta / temperature)
                positions[rows[accept], i[accept]] = prop[accept]
                move[accept] = delta[accept]
                if in_production:
                    disp_attempts += int(np.count_nonzero(disp))
                    disp_accepts += int(np.count_nonzero(accept))

            if np.any(want_swap):
                a_idx, b_idx, s_lab, t_lab = swap_table.decode(u_pick, species)
                d_a = _neighbor_distances(
                    positions[rows, a_idx], positions, box_length, pad, a_idx, b_idx
                )
                d_b = _neighbor_distances(
                    positions[rows, b_idx], positions, box_length, pad, a_idx, b_idx
                )
                s_col = s_lab[:, None]
                t_col = t_lab[:, None]
                # The (a, b) pair term itself is unchanged by the label swap.
                delta = (
                    pair_energy_elementwise(potential, t_col, species, d_a)
                    - pair_energy_elementwise(potential, s_col, species, d_a)
                    + pair_energy_elementwise(potential, s_col, species, d_b)
                    - pair_energy_elementwise(potential, t_col, species, d_b)
                ).sum(axis=1)
                with np.errstate(divide="ignore"):
                    accept = want_swap & (np.log(u_accept) < -delta / temperature)
                species[rows[accept], a_idx[accept]] = t_lab[accept]
                species[rows[accept], b_idx[accept]] = s_lab[accept]
                move[accept] = delta[accept]
                if in_production:
                    swap_attempts += int(np.count_nonzero(want_swap))
                    swap_accepts += int(np.count_nonzero(accept))

            energy = energy + move
        traces[:, sweep] = energy

        if in_production:
            done = sweep - cfg.equilibration_sweeps + 1
            if done % cfg.save_interval_sweeps == 0:
                f = done // cfg.save_interval_sweeps - 1
                frame_species[rows * n_frames_per_chain + f] = species
                frame_positions[rows * n_frames_per_chain + f] = positions
                # Kill accumulation drift at every checkpoint.
                energy = np.atleast_1d(
                    total_energy(potential, species, positions, box_length)
                )
        if progress:
            progress(sweep + 1, total_sweeps)

    result = McmcResult(
        system=system,
        species=frame_species,
        positions=frame_positions,
        energy_traces=traces,
        displacement_acceptance=disp_accepts / disp_attempts if disp_attempts else float("nan"),
        swap_acceptance=swap_accepts / swap_attempts if swap_attempts else None,
    )
    if out_path is not None:
        if result.n_frames == 0:
            raise McmcError("no frames to write; increase production_sweeps")
        write_dataset(
            out_path,
            system,
            frame_species,
            frame_positions,
            provenance=provenance,
            seed=cfg.seed,
            extra_header={
                "sampler": {
                    "kind": "metropolis",
                    "n_chains": cfg.n_chains,
                    "equilibration_sweeps": cfg.equilibration_sweeps,
                    "production_sweeps": cfg.production_sweeps,
                    "save_interval_sweeps": cfg.save_interval_sweeps,
                    "displacement_std": cfg.displacement_std,
                    "swap_probability": cfg.swap_probability,
                    "frame_order": "chain-major",
                }
            },
        )
    return result


# ---------------------------------------------------------------------------
# Chain diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainDiagnostics:
    mean: float
    variance: float
    tau_int: float  # integrated autocorrelation time, in sweeps
    n_effective: float
    stuck: bool  # constant trace: no information about mixing


def autocorrelation_function(trace: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation of a scalar trace (FFT-based, biased)."""
    x = np.asarray(trace, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise McmcError("trace must be a vector with at least 2 entries")
    x = x - x.mean()
    m = 1 << (2 * x.size - 1).bit_length()
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conj(f), m)[: x.size]
    if acov[0] <= 0.0:
        raise McmcError("trace has zero variance")
    return acov / acov[0]


def integrated_autocorrelation_time(trace: np.ndarray, window_factor: float = 5.0) -> float:
    """Sokal's automatic-window estimate: tau = 1 + 2 sum rho(k).

    The sum runs to the smallest window W with W >= window_factor * tau(W);
    an i.i.d. trace gives about 1, AR(1) with coefficient a gives (1+a)/(1-a).
    """
    rho = autocorrelation_function(trace)
    taus = 2.0 * np.cumsum(rho) - 1.0
    windows = np.arange(rho.size)
    crossed = windows >= window_factor * taus
    w = int(np.argmax(crossed)) if np.any(crossed) else rho.size - 1
    return float(taus[w])


def energy_diagnostics(traces: np.ndarray, discard: int = 0) -> list[ChainDiagnostics]:
    """Per-chain summary of energy traces [n_chains, n_sweeps]."""
    traces = np.asarray(traces, dtype=np.float64)
    if traces.ndim != 2:
        raise McmcError("traces must be [n_chains, n_sweeps]")
    if not 0 <= discard < traces.shape[1]:
        raise McmcError("discard must leave at least one sweep")
    out = []
    for row in traces[:, discard:]:
        mean = float(row.mean())
        var = float(row.var())
        if var == 0.0 or row.size < 2:
            out.append(ChainDiagnostics(mean, var, float("nan"), float("nan"), True))
            continue
        tau = integrated_autocorrelation_time(row)
        out.append(ChainDiagnostics(mean, var, tau, row.size / max(tau, 1.0), False))
    return out
