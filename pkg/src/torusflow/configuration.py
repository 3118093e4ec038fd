"""Particle configurations, their symmetry group, and dataset files.

A configuration is a species vector plus wrapped positions in a periodic box.
The physical symmetries form a group generated by particle permutations,
rigid translations, and signed axis permutations (the hyperoctahedral group);
group elements act on configurations without changing any observable. All
actions here have unit Jacobian, which is what lets likelihoods transport
unchanged along them.

Dataset files are self-describing: a single-line JSON header followed by
fixed-length little-endian binary records. See ``DATASET_LAYOUT`` below and
the README for the exact byte layout.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, wrap

DATASET_FORMAT = "torusflow-dataset"
DATASET_VERSION = 1

# Byte layout of one dataset record, documented for external readers:
#   N bytes          uint8 species codes, particle order
#   N * d * 8 bytes  float64 little-endian positions, row-major (particle, axis)
DATASET_LAYOUT = "uint8[N] species then float64-le[N*d] positions per record"


class ConfigurationError(ValueError):
    """Raised for malformed configurations, actions, or dataset files."""


@dataclass(frozen=True)
class Configuration:
    """Species labels plus wrapped particle positions.

    ``species`` holds dense integer codes (one-hot expansion happens only at
    the network boundary); ``positions`` is an [N, d] float64 array with every
    coordinate in [0, box_length).
    """

    species: np.ndarray
    positions: np.ndarray
    box_length: float

    def __post_init__(self):
        species = np.asarray(self.species, dtype=np.int64)
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.ndim != 2:
            raise ConfigurationError("positions must be an [N, d] array")
        if species.shape != (positions.shape[0],):
            raise ConfigurationError(
                f"species shape {species.shape} does not match N={positions.shape[0]}"
            )
        if np.any(species < 0):
            raise ConfigurationError("species codes must be non-negative")
        if not np.all(np.isfinite(positions)):
            raise ConfigurationError("positions contain non-finite values")
        L = float(self.box_length)
        if not np.isfinite(L) or L <= 0.0:
            raise ConfigurationError(f"box length must be finite and > 0, got {L}")
        if np.any(positions < 0.0) or np.any(positions >= L):
            raise ConfigurationError("positions must lie in [0, box_length)")
        species.setflags(write=False)
        positions.setflags(write=False)
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "box_length", L)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class GroupAction:
    """One symmetry element: (permutation, signed axis matrix, translation).

    Acting on a configuration sends particle ``perm[i]`` to slot ``i``, maps
    positions through the signed axis permutation, translates, and re-wraps:
    ``out[i] = wrap(axis_matrix @ x[perm[i]] + shift)``.
    """

    perm: np.ndarray
    axis_matrix: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        mat = np.asarray(self.axis_matrix, dtype=np.float64)
        shift = np.asarray(self.shift, dtype=np.float64)
        n = perm.shape[0]
        if perm.ndim != 1 or sorted(perm.tolist()) != list(range(n)):
            raise ConfigurationError("perm must be a permutation of 0..N-1")
        d = mat.shape[0]
        if mat.shape != (d, d):
            raise ConfigurationError("axis_matrix must be square")
        if shift.shape != (d,):
            raise ConfigurationError("shift must have length d")
        # Signed permutation: exactly one +-1 per row and column.
        if not (
            np.all(np.isin(mat, (-1.0, 0.0, 1.0)))
            and np.all(np.sum(np.abs(mat), axis=0) == 1.0)
            and np.all(np.sum(np.abs(mat), axis=1) == 1.0)
        ):
            raise ConfigurationError("axis_matrix must be a signed permutation matrix")
        perm.setflags(write=False)
        mat.setflags(write=False)
        shift.setflags(write=False)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "axis_matrix", mat)
        object.__setattr__(self, "shift", shift)


def identity_action(n_particles: int, dim: int) -> GroupAction:
    return GroupAction(np.arange(n_particles), np.eye(dim), np.zeros(dim))


def random_action(
    rng: np.random.Generator, n_particles: int, dim: int, box_length: float
) -> GroupAction:
    """Draw a group element uniformly: Haar over the finite factors, uniform shift."""
    perm = rng.permutation(n_particles)
    axes = rng.permutation(dim)
    signs = rng.choice((-1.0, 1.0), size=dim)
    mat = np.zeros((dim, dim))
    mat[np.arange(dim), axes] = signs
    shift = rng.uniform(0.0, box_length, size=dim)
    return GroupAction(perm, mat, shift)


def apply_action(action: GroupAction, config: Configuration) -> Configuration:
    """Transform a configuration; all observables are invariant under this."""
    if action.perm.shape[0] != config.n_particles:
        raise ConfigurationError("action and configuration particle counts differ")
    if action.axis_matrix.shape[0] != config.dim:
        raise ConfigurationError("action and configuration dimensions differ")
    new_species = config.species[action.perm]
    moved = config.positions[action.perm] @ action.axis_matrix.T + action.shift
    return Configuration(new_species, wrap(moved, config.box_length), config.box_length)


def apply_action_positions(
    action: GroupAction, positions: np.ndarray, box_length: float
) -> np.ndarray:
    """Position-only action for batched arrays of shape [..., N, d]."""
    moved = positions[..., action.perm, :] @ action.axis_matrix.T + action.shift
    return wrap(moved, box_length)


def compose_actions(first: GroupAction, second: GroupAction) -> GroupAction:
    """Group product: apply ``second`` to a configuration, then ``first``."""
    if first.perm.shape != second.perm.shape or first.shift.shape != second.shift.shape:
        raise ConfigurationError("actions act on different spaces")
    perm = second.perm[first.perm]
    mat = first.axis_matrix @ second.axis_matrix
    shift = first.shift + first.axis_matrix @ second.shift
    return GroupAction(perm, mat, shift)


def invert_action(action: GroupAction) -> GroupAction:
    """Inverse element: composing either way yields the identity action."""
    inv_perm = np.argsort(action.perm)
    inv_mat = action.axis_matrix.T
    inv_shift = -inv_mat @ action.shift
    return GroupAction(inv_perm, inv_mat, inv_shift)


@dataclass(frozen=True)
class SystemSpec:
    """Immutable description of a particle system and its thermodynamic state."""

    n_particles: int
    dim: int
    box_length: float
    species_names: tuple[str, ...]
    composition: tuple[int, ...]
    temperature: float
    potential: object  # IplParams | KobAndersenParams, kept loose to avoid a cycle

    def __post_init__(self):
        if len(self.composition) != len(self.species_names):
            raise ConfigurationError("composition and species_names lengths differ")
        if sum(self.composition) != self.n_particles:
            raise ConfigurationError(
                f"composition {self.composition} does not sum to N={self.n_particles}"
            )
        if any(c < 0 for c in self.composition):
            raise ConfigurationError("composition counts must be non-negative")
        if self.temperature <= 0.0:
            raise ConfigurationError("temperature must be > 0")
        if self.box_length <= 0.0:
            raise ConfigurationError("box length must be > 0")

    @property
    def n_species(self) -> int:
        return len(self.species_names)

    @property
    def density(self) -> float:
        return self.n_particles / self.box_length**self.dim

    def species_template(self) -> np.ndarray:
        """Canonical species vector: codes in ascending blocks per composition."""
        return np.repeat(np.arange(self.n_species), self.composition).astype(np.int64)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["species_names"] = list(self.species_names)
        d["composition"] = list(self.composition)
        d["potential"] = _potential_to_dict(self.potential)
        return d


def _potential_to_dict(potential) -> dict:
    from . import potentials as _pot

    return _pot.potential_to_dict(potential)


def _potential_from_dict(d: dict):
    from . import potentials as _pot

    return _pot.potential_from_dict(d)


def system_from_dict(d: dict) -> SystemSpec:
    return SystemSpec(
        n_particles=int(d["n_particles"]),
        dim=int(d["dim"]),
        box_length=float(d["box_length"]),
        species_names=tuple(d["species_names"]),
        composition=tuple(int(c) for c in d["composition"]),
        temperature=float(d["temperature"]),
        potential=_potential_from_dict(d["potential"]),
    )


def ipl_system(
    n_particles: int = 10,
    density: float = 0.5,
    temperature: float = 0.1,
    dim: int = 2,
) -> SystemSpec:
    """Binary soft-sphere system; defaults give the small 2D benchmark box."""
    from .potentials import IplParams

    if n_particles % 2 != 0:
        raise ConfigurationError("binary system needs an even particle count")
    box_length = (n_particles / density) ** (1.0 / dim)
    return SystemSpec(
        n_particles=n_particles,
        dim=dim,
        box_length=box_length,
        species_names=("A", "B"),
        composition=(n_particles // 2, n_particles // 2),
        temperature=temperature,
        potential=IplParams(),
    )


def kob_andersen_system(
    n_particles: int = 44,
    density: float = 1.192075,
    temperature: float = 1.0,
    dim: int = 2,
) -> SystemSpec:
    """Ternary smoothed Lennard-Jones mixture at its standard composition."""
    from .potentials import KobAndersenParams

    if n_particles % 11 != 0:
        raise ConfigurationError("ternary composition (5:3:3)/11 needs N divisible by 11")
    unit = n_particles // 11
    box_length = (n_particles / density) ** (1.0 / dim)
    return SystemSpec(
        n_particles=n_particles,
        dim=dim,
        box_length=box_length,
        species_names=("A", "B", "C"),
        composition=(5 * unit, 3 * unit, 3 * unit),
        temperature=temperature,
        potential=KobAndersenParams(),
    )


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """In-memory view of a dataset file: one system, many frames."""

    system: SystemSpec
    species: np.ndarray  # [F, N] int64
    positions: np.ndarray  # [F, N, d] float64
    header: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]


def _record_dtype(n_particles: int, dim: int) -> np.dtype:
    return np.dtype(
        [
            ("species", "u1", (n_particles,)),
            ("positions", "<f8", (n_particles, dim)),
        ]
    )


def write_dataset(
    path: str,
    system: SystemSpec,
    species: np.ndarray,
    positions: np.ndarray,
    provenance: dict | None = None,
    seed: int | None = None,
    extra_header: dict | None = None,
) -> None:
    species = np.asarray(species, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or species.shape != positions.shape[:2]:
        raise ConfigurationError("expected species [F, N] and positions [F, N, d]")
    n_frames, n, d = positions.shape
    if (n, d) != (system.n_particles, system.dim):
        raise ConfigurationError("frame shape does not match the system")
    if np.any(species < 0) or np.any(species >= system.n_species):
        raise ConfigurationError("species codes out of range for the system")
    if np.any(positions < 0.0) or np.any(positions >= system.box_length):
        raise ConfigurationError("positions must be wrapped into [0, L)")
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "layout": DATASET_LAYOUT,
        "n_frames": int(n_frames),
        "seed": seed,
        "provenance": provenance or {},
        **system.to_dict(),
    }
    if extra_header:
        header.update(extra_header)
    rec = np.empty(n_frames, dtype=_record_dtype(n, d))
    rec["species"] = species.astype(np.uint8)
    rec["positions"] = positions
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(rec.tobytes())


def _read_header(fh: io.BufferedReader) -> dict:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise ConfigurationError("missing or truncated JSON header line")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise ConfigurationError("header must be a JSON object")
    return header


def read_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        if header.get("format") != DATASET_FORMAT:
            raise ConfigurationError(
                f"not a dataset file (format={header.get('format')!r})"
            )
        system = system_from_dict(header)
        n_frames = int(header["n_frames"])
        dtype = _record_dtype(system.n_particles, system.dim)
        payload = fh.read()
    if len(payload) != n_frames * dtype.itemsize:
        raise ConfigurationError(
            f"payload is {len(payload)} bytes, expected {n_frames * dtype.itemsize}"
        )
    rec = np.frombuffer(payload, dtype=dtype)
    species = rec["species"].astype(np.int64)
    positions = rec["positions"].astype(np.float64)
    if np.any(positions < 0.0) or np.any(positions >= system.box_length):
        raise ConfigurationError("dataset contains unwrapped positions")
    if np.any(species >= system.n_species):
        raise ConfigurationError("dataset contains out-of-range species codes")
    return Dataset(system=system, species=species, positions=positions, header=header)
