"""Velocity-field regression along geodesic interpolation paths.

The generative model is trained by regression: draw a base configuration
(uniform positions, uniformly shuffled species of fixed composition), pair it
with a data configuration, walk the geodesic between them, and ask the
network to predict the constant path velocity. Pairing matters: within each
species group an optimal assignment (Hungarian algorithm) relabels base
particles so paths are short and never cross species, which is what makes
the regression target well-posed under permutation symmetry.

Training is full numpy + the local autodiff tape: Adam with global-norm
gradient clipping, a held-out validation split, and best-validation
checkpoint selection. Everything is deterministic given the config seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .configuration import SystemSpec
from .geometry import geodesic_interp, torus_log


class TrainingError(RuntimeError):
    """Raised for malformed batches, couplings, or training configs."""


# ---------------------------------------------------------------------------
# Base distribution
# ---------------------------------------------------------------------------


def sample_base_batch(
    system: SystemSpec, rng: np.random.Generator, n_samples: int
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform positions; species = composition multiset, shuffled per row."""
    positions = rng.uniform(0.0, system.box_length, size=(n_samples, system.n_particles, system.dim))
    template = system.species_template()
    species = np.tile(template, (n_samples, 1))
    species = rng.permuted(species, axis=1)
    return species, positions


def base_log_density(system: SystemSpec) -> float:
    """Log-density of the position block of the base law (uniform on the box)."""
    return -system.n_particles * system.dim * np.log(system.box_length)


# ---------------------------------------------------------------------------
# Optimal assignment
# ---------------------------------------------------------------------------


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching on a square matrix.

    Returns ``assign`` with row r matched to column assign[r]. Classic
    potentials-and-slack O(n^3) scheme; exact for any finite costs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape != (n, n):
        raise TrainingError("cost matrix must be square")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(cost)):
        raise TrainingError("cost matrix contains non-finite entries")

    # 1-indexed with column 0 as the virtual root.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row occupying column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            slack = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(slack)) + 1
            delta = slack[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assign = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[match[j] - 1] = j - 1
    return assign


def ot_couple(
    species0: np.ndarray,
    positions0: np.ndarray,
    species1: np.ndarray,
    positions1: np.ndarray,
    box_length: float,
    cost: str = "squared",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Relabel base particles toward their data partners, species by species.

    Both sides must share one composition per row. Returns the reordered base
    ``(species, positions, perm)`` where row b of ``perm`` maps data slot i to
    the base particle perm[b, i]; after coupling the species vectors match
    the data side elementwise and within every species group the summed
    (squared, by default) torus distance is minimal.
    """
    if cost not in ("squared", "plain"):
        raise TrainingError(f"unknown coupling cost {cost!r}")
    species0 = np.asarray(species0, dtype=np.int64)
    species1 = np.asarray(species1, dtype=np.int64)
    positions0 = np.asarray(positions0, dtype=np.float64)
    positions1 = np.asarray(positions1, dtype=np.float64)
    if species0.shape != species1.shape or positions0.shape != positions1.shape:
        raise TrainingError("batch shapes disagree")
    n_batch, n = species0.shape
    perm = np.empty((n_batch, n), dtype=np.int64)
    for b in range(n_batch):
        order = np.empty(n, dtype=np.int64)
        filled = 0
        for s in np.unique(species1[b]):
            idx0 = np.flatnonzero(species0[b] == s)
            idx1 = np.flatnonzero(species1[b] == s)
            if idx0.size != idx1.size:
                raise TrainingError("compositions differ; coupling is undefined")
            disp = torus_log(
                positions0[b, idx0][:, None, :], positions1[b, idx1][None, :, :], box_length
            )
            d2 = np.sum(disp * disp, axis=-1)
            c = d2 if cost == "squared" else np.sqrt(d2)
            assign = hungarian(c)
            order[idx1[assign]] = idx0
            filled += idx0.size
        if filled != n:
            raise TrainingError("species groups do not cover all particles")
        perm[b] = order
    batch_idx = np.arange(n_batch)[:, None]
    return species0[batch_idx, perm], positions0[batch_idx, perm], perm


# ---------------------------------------------------------------------------
# Interpolation batches and the regression loss
# ---------------------------------------------------------------------------


@dataclass
class TrainBatch:
    """One coupled mini-batch on the geodesic path."""

    species: np.ndarray  # [B, N] shared by both endpoints
    positions0: np.ndarray  # [B, N, d] base side, already reordered
    positions1: np.ndarray  # [B, N, d] data side
    perm: np.ndarray  # [B, N] base-particle relabeling that was applied
    t: np.ndarray  # [B]
    positions_t: np.ndarray  # [B, N, d] interpolated points
    target: np.ndarray  # [B, N, d] constant path velocity

    @property
    def n_samples(self) -> int:
        return self.t.shape[0]


def make_train_batch(
    system: SystemSpec,
    species: np.ndarray,
    positions0: np.ndarray,
    positions1: np.ndarray,
    perm: np.ndarray,
    t: np.ndarray,
) -> TrainBatch:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise TrainingError("path times must lie in [0, 1]")
    L = system.box_length
    target = torus_log(positions0, positions1, L)
    positions_t = geodesic_interp(t[:, None, None], positions0, positions1, L)
    return TrainBatch(
        species=species,
        positions0=positions0,
        positions1=positions1,
        perm=perm,
        t=t,
        positions_t=positions_t,
        target=target,
    )


def si_loss(model, params: dict, batch: TrainBatch) -> ad.Tensor:
    """Mean over the batch of the squared tangent-space regression error."""
    v = model.forward_positions(params, batch.t, batch.positions_t, batch.species)
    resid = ad.sub(v, ad.as_tensor(batch.target))
    return ad.scale(ad.total_sum(ad.square(resid)), 1.0 / batch.n_samples)


def si_loss_value(model, params: dict, batch: TrainBatch, micro_batch: int = 256) -> float:
    """Loss without recording; chunked so memory stays flat."""
    total = 0.0
    for lo in range(0, batch.n_samples, micro_batch):
        sl = slice(lo, min(lo + micro_batch, batch.n_samples))
        v = model.forward_positions(
            params, batch.t[sl], batch.positions_t[sl], batch.species[sl]
        )
        resid = v.data - batch.target[sl]
        total += float(np.sum(resid * resid))
    return total / batch.n_samples


def si_loss_grads(model, params: dict, batch: TrainBatch, micro_batch: int = 256) -> float:
    """Accumulate d(mean loss)/d(params) into ``.grad``; returns the loss.

    Micro-batches are reduced by summation in a fixed order, so gradients are
    reproducible bit-for-bit for a given batch layout.
    """
    total = 0.0
    inv = 1.0 / batch.n_samples
    for lo in range(0, batch.n_samples, micro_batch):
        sl = slice(lo, min(lo + micro_batch, batch.n_samples))
        with ad.Tape() as tape:
            v = model.forward_positions(
                params, batch.t[sl], batch.positions_t[sl], batch.species[sl]
            )
            resid = ad.sub(v, ad.as_tensor(batch.target[sl]))
            chunk_loss = ad.scale(ad.total_sum(ad.square(resid)), inv)
        ad.backward(tape, chunk_loss)
        total += float(chunk_loss.data)
    return total


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_grad_norm(params: dict) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_global_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def adam_step(
    params: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    state.step += 1
    t = state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * p.grad
        v = beta2 * v + (1.0 - beta2) * p.grad * p.grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 2048
    learning_rate: float = 1e-4
    clip_norm: float = 2.0
    val_fraction: float = 0.1
    seed: int = 0
    use_ot: bool = True
    ot_cost: str = "squared"
    micro_batch: int = 256

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.micro_batch < 1:
            raise TrainingError("epochs, batch_size, micro_batch must be >= 1")
        if not (0.0 < self.val_fraction < 1.0):
            raise TrainingError("val_fraction must lie in (0, 1)")
        if self.learning_rate <= 0.0 or self.clip_norm <= 0.0:
            raise TrainingError("learning_rate and clip_norm must be > 0")


@dataclass
class TrainResult:
    params: dict  # best-validation parameters
    best_epoch: int
    best_val_loss: float
    history: list  # rows of (epoch, train_loss, val_loss)
    grad_norms: list


def _couple_batch(system, cfg, rng, species1, pos1):
    species0, pos0 = sample_base_batch(system, rng, species1.shape[0])
    if cfg.use_ot:
        return ot_couple(species0, pos0, species1, pos1, system.box_length, cfg.ot_cost)
    # Without coupling the base species are still relabeled to match the data
    # side (the path must conserve every particle's species); positions keep
    # their independent draw.
    perm = np.argsort(np.argsort(species1, kind="stable"), kind="stable")
    n_batch, n = species1.shape
    sort0 = np.argsort(species0, kind="stable", axis=1)
    batch_idx = np.arange(n_batch)[:, None]
    aligned = sort0[batch_idx, perm]
    return species0[batch_idx, aligned], pos0[batch_idx, aligned], aligned


def train(
    model,
    system: SystemSpec,
    species: np.ndarray,
    positions: np.ndarray,
    cfg: TrainConfig,
    checkpoint_path: str | None = None,
    history_path: str | None = None,
    log_every: int = 0,
    provenance: dict | None = None,
) -> TrainResult:
    """Fit the velocity model on dataset frames; returns best-val parameters.

    ``provenance`` is stored verbatim in the checkpoint header; the CLI puts
    the system description and input hashes there so a checkpoint is enough
    to sample from.
    """
    from .velocity_net import save_checkpoint

    n_frames = positions.shape[0]
    if n_frames < 2:
        raise TrainingError("need at least two frames to split train/val")
    seed_root = np.random.SeedSequence(cfg.seed)
    split_rng, base_rng, t_rng, shuffle_rng, init_rng = (
        np.random.Generator(np.random.Philox(s)) for s in seed_root.spawn(5)
    )

    order = split_rng.permutation(n_frames)
    n_val = max(1, int(round(cfg.val_fraction * n_frames)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise TrainingError("validation split consumed every frame")

    # A fixed validation pairing keeps the model-selection signal smooth.
    val_species1, val_pos1 = species[val_idx], positions[val_idx]
    vs0, vp0, vperm = _couple_batch(system, cfg, base_rng, val_species1, val_pos1)
    val_batch = make_train_batch(
        system, val_species1, vp0, val_pos1, vperm, t_rng.uniform(size=val_idx.size)
    )

    params = model.init_params(init_rng)
    state = AdamState()
    history: list[tuple[int, float, float]] = []
    grad_norms: list[float] = []
    best_val = np.inf
    best_epoch = -1
    best_params: dict | None = None

    for epoch in range(1, cfg.epochs + 1):
        epoch_order = shuffle_rng.permutation(train_idx)
        seen = 0
        loss_accum = 0.0
        for lo in range(0, epoch_order.size, cfg.batch_size):
            idx = epoch_order[lo : lo + cfg.batch_size]
            species1, pos1 = species[idx], positions[idx]
            s0, p0, perm = _couple_batch(system, cfg, base_rng, species1, pos1)
            batch = make_train_batch(
                system, species1, p0, pos1, perm, t_rng.uniform(size=idx.size)
            )
            zero_grads(params)
            loss = si_loss_grads(model, params, batch, cfg.micro_batch)
            grad_norms.append(clip_global_norm(params, cfg.clip_norm))
            adam_step(params, state, cfg.learning_rate)
            loss_accum += loss * idx.size
            seen += idx.size
        train_loss = loss_accum / seen
        val_loss = si_loss_value(model, params, val_batch, cfg.micro_batch)
        history.append((epoch, train_loss, val_loss))
        if log_every and (epoch % log_every == 0 or epoch == 1):
            print(f"epoch {epoch:5d}  train {train_loss:.6f}  val {val_loss:.6f}")
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: ad.Tensor(p.data.copy(), requires_grad=True) for k, p in params.items()}
        if history_path:
            write_history(history_path, history)

    assert best_params is not None
    if checkpoint_path:
        save_checkpoint(
            checkpoint_path,
            model.config,
            best_params,
            seed=cfg.seed,
            provenance=provenance,
            loss_summary={
                "best_epoch": best_epoch,
                "best_val_loss": best_val,
                "final_train_loss": history[-1][1],
                "epochs": cfg.epochs,
            },
        )
    return TrainResult(
        params=best_params,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        history=history,
        grad_norms=grad_norms,
    )


def write_history(path: str, history: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            writer.writerow([row[0], f"{row[1]:.10g}", f"{row[2]:.10g}"])
