"""Pair potentials and Boltzmann log-densities for periodic particle systems.

Two families are shipped:

* ``IplParams``: truncated inverse-power-law repulsion, eps*(sigma/r)^12,
  shifted so the energy is exactly zero at the cutoff 2.5*sigma.
* ``KobAndersenParams``: a ternary Lennard-Jones mixture smoothed near its
  cutoff 2*sigma by even polynomial corrections. The correction coefficients
  are solved at construction so that energy, slope, and curvature all vanish
  at the cutoff (three coefficients, three conditions).

Energies use the nearest-image pair distance, so they are invariant under
particle permutations, rigid translations, and signed axis permutations.
Units: k_B = 1 throughout, so log-density = -U / T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import pairwise_distance


class PotentialError(ValueError):
    """Raised for invalid separations or malformed parameter tables."""


def _as_square(name: str, m, n_species: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (n_species, n_species):
        raise PotentialError(f"{name} must be {n_species}x{n_species}")
    if not np.allclose(m, m.T):
        raise PotentialError(f"{name} must be symmetric")
    return m


@dataclass(frozen=True)
class IplParams:
    """Truncated + shifted r^-12 repulsion for a binary mixture."""

    epsilon: float = 1.0
    sigma: tuple = ((1.0, 1.2), (1.2, 1.4))
    cutoff_factor: float = 2.5

    def __post_init__(self):
        sigma = _as_square("sigma", self.sigma, len(self.sigma))
        if np.any(sigma <= 0.0):
            raise PotentialError("sigma entries must be > 0")
        if self.cutoff_factor <= 0.0:
            raise PotentialError("cutoff_factor must be > 0")
        object.__setattr__(self, "sigma", tuple(map(tuple, sigma.tolist())))

    @property
    def n_species(self) -> int:
        return len(self.sigma)

    def sigma_matrix(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=np.float64)

    def cutoff_matrix(self) -> np.ndarray:
        return self.cutoff_factor * self.sigma_matrix()

    def shift_matrix(self) -> np.ndarray:
        """Constant added inside the cutoff so the energy hits 0 there."""
        shift = -self.epsilon * self.cutoff_factor**-12
        return np.full((self.n_species, self.n_species), shift)

    def pair_energy_table(self, r: np.ndarray) -> np.ndarray:
        """Energy for all species pairs at separations ``r`` [..., S, S]."""
        r = _check_separations(r)
        sigma = self.sigma_matrix()
        inside = r < self.cutoff_matrix()
        # Evaluate the powered term only inside the cutoff to dodge overflow.
        safe_r = np.where(inside, r, sigma)
        energy = self.epsilon * (sigma / safe_r) ** 12 + self.shift_matrix()
        return np.where(inside, energy, 0.0)


@dataclass(frozen=True)
class KobAndersenParams:
    """Ternary smoothed Lennard-Jones mixture.

    ``corrections`` holds the dimensionless (w0, w2, w4) of the polynomial
    tail w0 + w2*(r/sigma)^2 + w4*(r/sigma)^4 in units of the pair epsilon,
    solved once from the three cutoff-smoothness conditions.
    """

    epsilon: tuple = (
        (1.0, 1.5, 0.75),
        (1.5, 0.5, 1.5),
        (0.75, 1.5, 0.75),
    )
    sigma: tuple = (
        (1.0, 0.8, 0.9),
        (0.8, 0.88, 0.8),
        (0.9, 0.8, 0.94),
    )
    cutoff_factor: float = 2.0
    corrections: tuple = field(init=False, default=None)

    def __post_init__(self):
        eps = _as_square("epsilon", self.epsilon, len(self.epsilon))
        sigma = _as_square("sigma", self.sigma, len(self.sigma))
        if np.any(sigma <= 0.0) or np.any(eps <= 0.0):
            raise PotentialError("epsilon and sigma entries must be > 0")
        if self.cutoff_factor <= 0.0:
            raise PotentialError("cutoff_factor must be > 0")
        object.__setattr__(self, "epsilon", tuple(map(tuple, eps.tolist())))
        object.__setattr__(self, "sigma", tuple(map(tuple, sigma.tolist())))
        object.__setattr__(
            self, "corrections", _solve_corrections(self.cutoff_factor)
        )

    @property
    def n_species(self) -> int:
        return len(self.sigma)

    def sigma_matrix(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=np.float64)

    def epsilon_matrix(self) -> np.ndarray:
        return np.asarray(self.epsilon, dtype=np.float64)

    def cutoff_matrix(self) -> np.ndarray:
        return self.cutoff_factor * self.sigma_matrix()

    def pair_energy_table(self, r: np.ndarray) -> np.ndarray:
        r = _check_separations(r)
        sigma = self.sigma_matrix()
        eps = self.epsilon_matrix()
        w0, w2, w4 = self.corrections
        inside = r < self.cutoff_matrix()
        safe_r = np.where(inside, r, sigma)
        x = safe_r / sigma
        x2 = x * x
        inv6 = x2**-3
        lj = 4.0 * (inv6 * inv6 - inv6)
        energy = eps * (lj + w0 + w2 * x2 + w4 * x2 * x2)
        return np.where(inside, energy, 0.0)


def _solve_corrections(cutoff_factor: float) -> tuple[float, float, float]:
    """Even-polynomial tail with zero value, slope, and curvature at the cutoff.

    Works in the reduced coordinate x = r/sigma with xc = cutoff_factor; the
    solution is independent of the species pair because every term scales
    with the pair epsilon.
    """
    xc = cutoff_factor
    a = 4.0 * (xc**-12 - xc**-6)
    b = 4.0 * (-12.0 * xc**-13 + 6.0 * xc**-7)
    c = 4.0 * (156.0 * xc**-14 - 42.0 * xc**-8)
    mat = np.array(
        [
            [1.0, xc**2, xc**4],
            [0.0, 2.0 * xc, 4.0 * xc**3],
            [0.0, 2.0, 12.0 * xc**2],
        ]
    )
    w0, w2, w4 = np.linalg.solve(mat, -np.array([a, b, c]))
    return (float(w0), float(w2), float(w4))


def _check_separations(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise PotentialError("separations contain non-finite values")
    if np.any(r <= 0.0):
        raise PotentialError("pair separation must be > 0 (coincident particles?)")
    return r[..., None, None]


def pair_energy(potential, s1: int, s2: int, r) -> np.ndarray | float:
    """Energy of one species pair at separation(s) ``r``."""
    n = potential.n_species
    if not (0 <= s1 < n and 0 <= s2 < n):
        raise PotentialError(f"species pair ({s1}, {s2}) out of range for {n} species")
    table = potential.pair_energy_table(r)
    out = table[..., s1, s2]
    return float(out) if out.ndim == 0 else out


def pair_energy_elementwise(potential, s_a, s_b, r) -> np.ndarray:
    """Pair energies with species arrays broadcast against separations.

    Unlike the [..., S, S] table this evaluates one species pair per entry,
    which is what incremental single-particle updates want. Entries at or
    beyond their cutoff contribute exactly 0, so callers may pad masked slots
    with any separation >= the largest cutoff.
    """
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise PotentialError("separations contain non-finite values")
    if np.any(r <= 0.0):
        raise PotentialError("pair separation must be > 0 (coincident particles?)")
    s_a = np.asarray(s_a, dtype=np.int64)
    s_b = np.asarray(s_b, dtype=np.int64)
    n = potential.n_species
    for s in (s_a, s_b):
        if np.any(s < 0) or np.any(s >= n):
            raise PotentialError(f"species codes out of range for {n} species")
    sigma = potential.sigma_matrix()[s_a, s_b]
    inside = r < potential.cutoff_factor * sigma
    safe_r = np.where(inside, r, sigma)
    if isinstance(potential, IplParams):
        shift = -potential.epsilon * potential.cutoff_factor**-12
        energy = potential.epsilon * (sigma / safe_r) ** 12 + shift
    elif isinstance(potential, KobAndersenParams):
        eps = potential.epsilon_matrix()[s_a, s_b]
        w0, w2, w4 = potential.corrections
        x2 = (safe_r / sigma) ** 2
        inv6 = x2**-3
        energy = eps * (4.0 * (inv6 * inv6 - inv6) + w0 + w2 * x2 + w4 * x2 * x2)
    else:
        raise PotentialError(f"unknown potential type {type(potential).__name__}")
    return np.where(inside, energy, 0.0)


def potential_to_dict(potential) -> dict:
    if isinstance(potential, IplParams):
        return {
            "kind": "ipl",
            "epsilon": potential.epsilon,
            "sigma": [list(row) for row in potential.sigma],
            "cutoff_factor": potential.cutoff_factor,
        }
    if isinstance(potential, KobAndersenParams):
        return {
            "kind": "kob_andersen",
            "epsilon": [list(row) for row in potential.epsilon],
            "sigma": [list(row) for row in potential.sigma],
            "cutoff_factor": potential.cutoff_factor,
        }
    raise PotentialError(f"unknown potential type {type(potential).__name__}")


def potential_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "ipl":
        return IplParams(
            epsilon=float(d["epsilon"]),
            sigma=tuple(map(tuple, d["sigma"])),
            cutoff_factor=float(d["cutoff_factor"]),
        )
    if kind == "kob_andersen":
        return KobAndersenParams(
            epsilon=tuple(map(tuple, d["epsilon"])),
            sigma=tuple(map(tuple, d["sigma"])),
            cutoff_factor=float(d["cutoff_factor"]),
        )
    raise PotentialError(f"unknown potential kind {kind!r}")


# ---------------------------------------------------------------------------
# Total energies
# ---------------------------------------------------------------------------


def total_energy(
    potential,
    species: np.ndarray,
    positions: np.ndarray,
    box_length: float,
    use_cell_list: bool = False,
) -> np.ndarray | float:
    """Sum of pair energies over unordered pairs, nearest-image distances.

    ``positions`` may be [N, d] or batched [..., N, d]; the result follows the
    batch shape. The O(N^2) pair loop is the reference path; ``use_cell_list``
    switches to a linked-cell sweep that must agree exactly and only pays off
    when the box is several cutoffs wide (single configurations only).
    """
    species = np.asarray(species, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[-2] != species.shape[-1]:
        raise PotentialError("species and positions disagree on particle count")
    if np.any(species < 0) or np.any(species >= potential.n_species):
        raise PotentialError("species codes out of range for the potential")
    if use_cell_list:
        if positions.ndim != 2:
            raise PotentialError("cell list path handles a single configuration")
        return _total_energy_cells(potential, species, positions, box_length)
    single = positions.ndim == 2
    if single:
        positions = positions[None]
    lead = positions.shape[:-2]
    n, d = positions.shape[-2:]
    pos_flat = positions.reshape(-1, n, d)
    # species may be shared ([N]) or per-frame (matching the batch shape)
    spec_flat = np.broadcast_to(species, lead + (n,)).reshape(-1, n)
    iu, ju = np.triu_indices(n, k=1)
    dist = pairwise_distance(pos_flat, box_length)[:, iu, ju]
    if np.any(dist == 0.0):
        raise PotentialError("coincident particles give an undefined energy")
    table = potential.pair_energy_table(dist)
    b_idx = np.arange(pos_flat.shape[0])[:, None]
    p_idx = np.arange(iu.size)[None, :]
    pick = table[b_idx, p_idx, spec_flat[:, iu], spec_flat[:, ju]]
    energies = pick.sum(axis=-1).reshape(lead)
    return float(energies[0]) if single else energies


def _total_energy_cells(
    potential, species: np.ndarray, positions: np.ndarray, box_length: float
) -> float:
    """Linked-cell O(N) energy; falls back to the pair loop for small boxes."""
    r_cut = float(np.max(potential.cutoff_matrix()))
    n_cells = int(np.floor(box_length / r_cut))
    if n_cells < 3:
        return total_energy(potential, species, positions, box_length)
    n, dim = positions.shape
    cell_size = box_length / n_cells
    cell_idx = np.minimum((positions / cell_size).astype(np.int64), n_cells - 1)
    flat = np.ravel_multi_index(cell_idx.T, (n_cells,) * dim)
    members: dict[int, list[int]] = {}
    for i, c in enumerate(flat):
        members.setdefault(int(c), []).append(i)
    offsets = np.array(
        np.meshgrid(*([[-1, 0, 1]] * dim), indexing="ij")
    ).reshape(dim, -1).T
    total = 0.0
    table_cache = potential.pair_energy_table
    for c, idx_i in members.items():
        ci = np.array(np.unravel_index(c, (n_cells,) * dim))
        for off in offsets:
            cj = tuple((ci + off) % n_cells)
            c2 = int(np.ravel_multi_index(cj, (n_cells,) * dim))
            if c2 < c or c2 not in members:
                continue
            idx_j = members[c2]
            ii, jj = np.meshgrid(idx_i, idx_j, indexing="ij")
            if c2 == c:
                keep = ii < jj
            else:
                keep = np.ones_like(ii, dtype=bool)
            ii, jj = ii[keep], jj[keep]
            if ii.size == 0:
                continue
            delta = positions[ii] - positions[jj]
            delta -= box_length * np.round(delta / box_length)
            dist = np.sqrt(np.sum(delta * delta, axis=-1))
            if np.any(dist == 0.0):
                raise PotentialError("coincident particles give an undefined energy")
            e = table_cache(dist)[np.arange(ii.size), species[ii], species[jj]]
            total += float(e.sum())
    return total


def log_boltzmann_unnorm(
    potential,
    species: np.ndarray,
    positions: np.ndarray,
    box_length: float,
    temperature: float,
) -> np.ndarray | float:
    """Unnormalized log target density, -U/T (k_B = 1)."""
    if temperature <= 0.0:
        raise PotentialError("temperature must be > 0")
    u = total_energy(potential, species, positions, box_length)
    return -np.asarray(u) / temperature if np.ndim(u) else -u / temperature
