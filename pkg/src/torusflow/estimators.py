"""Self-normalized importance-sampling estimators over weighted samples.

The flow provides exact per-sample densities, so expectations under the
Boltzmann target follow from reweighting: w_i proportional to
exp(log p_target - log q_model), normalized over the draw. All weight math
subtracts the max log-weight first; only ratios survive, and the unknown
partition function cancels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import pairwise_distance


class EstimatorError(ValueError):
    """Raised for malformed sample sets or estimator inputs."""


@dataclass(frozen=True)
class WeightedSample:
    """One generated configuration with the three numbers reweighting needs."""

    species: np.ndarray
    positions: np.ndarray
    log_model_density: float
    energy: float
    log_target_unnorm: float


def _as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if len(samples) == 0:
        raise EstimatorError("no samples")
    log_w = np.array(
        [s.log_target_unnorm - s.log_model_density for s in samples], dtype=np.float64
    )
    energies = np.array([s.energy for s in samples], dtype=np.float64)
    if not np.all(np.isfinite(log_w)):
        raise EstimatorError("non-finite log-weights")
    return log_w, energies


def normalized_weights(log_weights: np.ndarray) -> np.ndarray:
    """exp(log w - max) / sum, stable for any weight spread."""
    log_weights = np.asarray(log_weights, dtype=np.float64)
    if log_weights.ndim != 1 or log_weights.size == 0:
        raise EstimatorError("log_weights must be a non-empty vector")
    if not np.all(np.isfinite(log_weights)):
        raise EstimatorError("non-finite log-weights")
    shifted = np.exp(log_weights - np.max(log_weights))
    return shifted / np.sum(shifted)


def effective_sample_size(log_weights: np.ndarray) -> float:
    """1 / sum(w_bar^2); equals n for flat weights, 1 for a single survivor."""
    w = normalized_weights(log_weights)
    return float(1.0 / np.sum(w * w))


def snis_mean(values: np.ndarray, log_weights: np.ndarray) -> tuple[float, float]:
    """Weighted mean and its delta-method standard error.

    stderr^2 = sum_i w_bar_i^2 (phi_i - mean)^2, which collapses to the
    familiar s/sqrt(n) for flat weights.
    """
    values = np.asarray(values, dtype=np.float64)
    w = normalized_weights(log_weights)
    if values.shape != w.shape:
        raise EstimatorError("values and weights disagree in length")
    mean = float(np.sum(w * values))
    stderr = float(np.sqrt(np.sum((w * (values - mean)) ** 2)))
    return mean, stderr


def mean_energy(samples) -> tuple[float, float]:
    log_w, energies = _as_arrays(samples)
    return snis_mean(energies, log_w)


def _prefix_weight_moments(log_w: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Per-prefix sums of (w, w^2, w v, w v^2), each prefix on its own scale.

    Shifting by the global max underflows every prefix before the dominant
    sample to 0/0. A running max with on-the-fly rescaling keeps the leading
    weight of each prefix at exactly 1, so prefix ratios are always finite.
    Returns [n, 4]; only ratios within a row are meaningful.
    """
    n = log_w.size
    out = np.empty((n, 4))
    m = -np.inf
    s_w = s_w2 = s_wv = s_wv2 = 0.0
    for k in range(n):
        lw = log_w[k]
        if lw > m:
            scale = np.exp(m - lw) if np.isfinite(m) else 0.0
            s_w *= scale
            s_w2 *= scale * scale
            s_wv *= scale
            s_wv2 *= scale
            m = lw
        w = np.exp(lw - m)
        v = values[k]
        s_w += w
        s_w2 += w * w
        s_wv += w * v
        s_wv2 += w * v * v
        out[k] = (s_w, s_w2, s_wv, s_wv2)
    return out


def mean_energy_curve(samples) -> np.ndarray:
    """Running reweighted mean energy over sample-count prefixes.

    Row k holds (k+1, estimate over the first k+1 samples).
    """
    log_w, energies = _as_arrays(samples)
    moments = _prefix_weight_moments(log_w, energies)
    counts = np.arange(1, log_w.size + 1, dtype=np.float64)
    return np.stack([counts, moments[:, 2] / moments[:, 0]], axis=1)


def ess_curve(samples) -> np.ndarray:
    """Running ESS over prefixes: (count, ESS of first count samples)."""
    log_w, energies = _as_arrays(samples)
    moments = _prefix_weight_moments(log_w, energies)
    counts = np.arange(1, log_w.size + 1, dtype=np.float64)
    return np.stack([counts, moments[:, 0] ** 2 / moments[:, 1]], axis=1)


@dataclass(frozen=True)
class SpecificHeatResult:
    value: float
    mean_energy: float
    mean_square_energy: float
    ess: float
    unreliable: bool  # set when the weights have effectively collapsed


def specific_heat(samples, temperature: float, n_particles: int) -> SpecificHeatResult:
    """Excess specific heat per particle: energy variance / (N T^2)."""
    if temperature <= 0.0 or n_particles < 1:
        raise EstimatorError("temperature must be > 0 and n_particles >= 1")
    log_w, energies = _as_arrays(samples)
    w = normalized_weights(log_w)
    e1 = float(np.sum(w * energies))
    e2 = float(np.sum(w * energies * energies))
    ess = float(1.0 / np.sum(w * w))
    variance = e2 - e1 * e1
    return SpecificHeatResult(
        value=variance / (n_particles * temperature * temperature),
        mean_energy=e1,
        mean_square_energy=e2,
        ess=ess,
        unreliable=ess < 2.0,
    )


# ---------------------------------------------------------------------------
# Radial distribution function
# ---------------------------------------------------------------------------


def specific_heat_curve(samples, temperature: float, n_particles: int) -> np.ndarray:
    """Running reweighted specific heat over prefixes: (count, estimate)."""
    if temperature <= 0.0 or n_particles < 1:
        raise EstimatorError("temperature must be > 0 and n_particles >= 1")
    log_w, energies = _as_arrays(samples)
    moments = _prefix_weight_moments(log_w, energies)
    mean = moments[:, 2] / moments[:, 0]
    variance = moments[:, 3] / moments[:, 0] - mean * mean
    counts = np.arange(1, log_w.size + 1, dtype=np.float64)
    return np.stack([counts, variance / (n_particles * temperature * temperature)], axis=1)


@dataclass(frozen=True)
class RadialDistribution:
    bin_centers: np.ndarray
    values: np.ndarray
    bin_width: float

    def as_table(self) -> np.ndarray:
        return np.stack([self.bin_centers, self.values], axis=1)


def _pair_distance_histograms(
    positions: np.ndarray, box_length: float, edges: np.ndarray
) -> np.ndarray:
    """Per-frame histograms of ordered-pair distances, [frames, bins]."""
    n_frames = positions.shape[0]
    counts = np.zeros((n_frames, edges.size - 1), dtype=np.float64)
    dist = pairwise_distance(positions, box_length)
    n = positions.shape[1]
    iu, ju = np.triu_indices(n, k=1)
    for f in range(n_frames):
        h, _ = np.histogram(dist[f, iu, ju], bins=edges)
        counts[f] = 2.0 * h  # ordered pairs: each unordered pair counts twice
    return counts


def radial_distribution(
    positions: np.ndarray,
    box_length: float,
    bin_width: float = 0.05,
    log_weights: np.ndarray | None = None,
    r_max: float | None = None,
) -> RadialDistribution:
    """Pair correlation g(r) on the torus, optionally frame-reweighted.

    Normalization per frame and bin: ordered-pair count divided by
    N^2/L^2 * 2 pi r_c dr (two dimensions; r_c is the bin center), averaged
    over frames with the given weights. Distances are capped at L/2, where
    the minimum-image shell is still a full circle.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3:
        raise EstimatorError("positions must be [frames, particles, dim]")
    n_frames, n, d = positions.shape
    if d != 2:
        raise EstimatorError("the shell measure implemented here is two-dimensional")
    if bin_width <= 0.0:
        raise EstimatorError("bin_width must be > 0")
    if r_max is None:
        r_max = box_length / 2.0
    if not 0.0 < r_max <= box_length / 2.0:
        raise EstimatorError("r_max must lie in (0, L/2]")
    n_bins = int(np.floor(r_max / bin_width + 1e-12))
    edges = bin_width * np.arange(n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    counts = _pair_distance_histograms(positions, box_length, edges)
    if log_weights is None:
        w = np.full(n_frames, 1.0 / n_frames)
    else:
        w = normalized_weights(np.asarray(log_weights, dtype=np.float64))
        if w.size != n_frames:
            raise EstimatorError("one log-weight per frame required")
    mean_counts = w @ counts
    density_sq = n * n / box_length**2
    shell = 2.0 * np.pi * centers * bin_width
    return RadialDistribution(
        bin_centers=centers, values=mean_counts / (density_sq * shell), bin_width=bin_width
    )


def radial_distribution_from_samples(
    samples, box_length: float, bin_width: float = 0.05, reweight: bool = True
) -> RadialDistribution:
    positions = np.stack([s.positions for s in samples])
    log_w = None
    if reweight:
        log_w, _ = _as_arrays(samples)
    return radial_distribution(positions, box_length, bin_width, log_w)
