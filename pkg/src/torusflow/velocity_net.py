"""Symmetry-respecting graph network for velocity fields on the torus.

The network maps (time, configuration) to one tangent vector per particle.
It is built so the map commutes with every configuration symmetry:

* particle permutations: all messages are pooled with symmetric sums over a
  fully connected graph;
* rigid translations: positions enter only through nearest-image
  displacements and distances;
* signed axis permutations: the only vector-valued quantities are the
  displacement vectors themselves, scaled by rotation-invariant per-edge
  scalars, so the axis action factors straight through.

Species never move: the species block of the output is structurally zero.

Layer recipe, starting from node features (t, one-hot species) and the raw
positions: per-edge features come from an encoder MLP of both endpoint
features and the squared distance between the ORIGINAL positions (every
layer sees layer-0 distances); a sigmoid gate picks which messages to pool;
a node MLP updates features; a scalar decoder per edge scales the
displacement pointing from neighbor to particle, damped by 1/(distance+1),
and the particle takes that step on the torus. After the last layer the
velocity is the torus log from each original position to its final one. The
decoder's last layer starts at zero, so a fresh network is exactly the zero
field and flows start from the identity map.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = "torusflow-checkpoint"
CHECKPOINT_VERSION = 1


class VelocityFieldError(RuntimeError):
    """Raised when a forward pass produces non-finite values."""


@dataclass(frozen=True)
class GnnConfig:
    """Architecture hyperparameters; defaults give ~22k parameters."""

    box_length: float
    n_species: int = 2
    dim: int = 2
    depth: int = 3
    width: int = 32
    edge_dim: int = 32

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.edge_dim < 1:
            raise ValueError("depth, width, and edge_dim must be positive")
        if self.n_species < 1 or self.dim < 1:
            raise ValueError("n_species and dim must be positive")
        if self.box_length <= 0:
            raise ValueError("box_length must be > 0")

    @property
    def node_in(self) -> int:
        return 1 + self.n_species


class TorusGnn:
    """Velocity model; parameters live in a named-tensor dict (the store)."""

    def __init__(self, config: GnnConfig):
        self.config = config

    # -- parameters ---------------------------------------------------------

    def _layer_dims(self, k: int) -> dict:
        cfg = self.config
        h_in = cfg.node_in if k == 0 else cfg.width
        return {
            "edge_in": 2 * h_in + 1,
            "h_in": h_in,
            "width": cfg.width,
            "edge_dim": cfg.edge_dim,
        }

    def init_params(self, rng: np.random.Generator) -> dict:
        """Variance-scaled random init; displacement decoder output at zero."""
        cfg = self.config
        params: dict[str, ad.Tensor] = {}

        def dense(name: str, n_in: int, n_out: int, zero: bool = False):
            if zero:
                w = np.zeros((n_in, n_out))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
            params[f"{name}/w"] = ad.Tensor(w, requires_grad=True)
            params[f"{name}/b"] = ad.Tensor(np.zeros(n_out), requires_grad=True)

        for k in range(cfg.depth):
            dims = self._layer_dims(k)
            dense(f"layer{k}/edge0", dims["edge_in"], cfg.width)
            dense(f"layer{k}/edge1", cfg.width, cfg.edge_dim)
            dense(f"layer{k}/gate", cfg.edge_dim, cfg.edge_dim)
            dense(f"layer{k}/node0", dims["h_in"] + cfg.edge_dim, cfg.width)
            dense(f"layer{k}/node1", cfg.width, cfg.width)
            dense(f"layer{k}/disp0", cfg.edge_dim, cfg.width)
            dense(f"layer{k}/disp1", cfg.width, 1, zero=True)
        return params

    def param_count(self, params: dict) -> int:
        return int(sum(p.data.size for p in params.values()))

    # -- forward ------------------------------------------------------------

    def forward_positions(self, params: dict, t, positions, species) -> ad.Tensor:
        """Batched position-velocity forward pass.

        ``positions`` is [B, N, d] (array or Tensor), ``species`` [B, N] int,
        ``t`` a scalar or per-sample [B] array. Returns a [B, N, d] tensor;
        record on a Tape to differentiate.
        """
        cfg = self.config
        L = cfg.box_length
        x0 = positions if isinstance(positions, ad.Tensor) else ad.as_tensor(positions)
        if x0.ndim != 3:
            raise VelocityFieldError("positions must be [batch, particles, dim]")
        batch, n, d = x0.shape
        if d != cfg.dim:
            raise VelocityFieldError(f"dimension mismatch: got {d}, config has {cfg.dim}")
        species = np.asarray(species, dtype=np.int64)
        if species.shape != (batch, n):
            raise VelocityFieldError("species must be [batch, particles]")
        if np.any(species < 0) or np.any(species >= cfg.n_species):
            raise VelocityFieldError("species codes out of range")

        # Node input features are constants w.r.t. differentiation.
        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0:
            t_col = np.full((batch, n, 1), float(t_arr))
        elif t_arr.shape == (batch,):
            t_col = np.broadcast_to(t_arr[:, None, None], (batch, n, 1))
        else:
            raise VelocityFieldError("t must be a scalar or one value per batch row")
        onehot = np.zeros((batch, n, cfg.n_species))
        np.put_along_axis(onehot, species[..., None], 1.0, axis=-1)
        h = ad.as_tensor(np.concatenate([np.ascontiguousarray(t_col), onehot], axis=-1))

        # Layer-0 geometry; these distances feed every layer.
        xi = ad.reshape(x0, (batch, n, 1, d))
        xj = ad.reshape(x0, (batch, 1, n, d))
        rel0 = ad.torus_log(xi, xj, L)
        dist2 = ad.sum_along(ad.square(rel0), -1, keepdims=True)  # [B,N,N,1]
        eye = np.eye(n)[None, :, :, None]
        offdiag = 1.0 - eye
        # The diagonal gets a dummy +1 before the sqrt so its infinite slope
        # at zero never produces NaN tangents; masked off downstream anyway.
        denom = ad.sqrt(ad.add(dist2, eye)) + ad.as_tensor(np.ones(()))

        xk = x0
        for k in range(self.config.depth):
            p = params
            hw = h.shape[-1]
            hi = ad.broadcast_to(ad.reshape(h, (batch, n, 1, hw)), (batch, n, n, hw))
            hj = ad.broadcast_to(ad.reshape(h, (batch, 1, n, hw)), (batch, n, n, hw))
            edge_in = ad.concat([hi, hj, dist2], axis=-1)
            m = ad.silu(ad.linear(edge_in, p[f"layer{k}/edge0/w"], p[f"layer{k}/edge0/b"]))
            m = ad.silu(ad.linear(m, p[f"layer{k}/edge1/w"], p[f"layer{k}/edge1/b"]))
            if k + 1 < self.config.depth:
                # Node-feature refresh feeds the next round's edge features;
                # the final round has no consumer, so its gate/node blocks
                # stay allocated but idle.
                gate = ad.sigmoid(ad.linear(m, p[f"layer{k}/gate/w"], p[f"layer{k}/gate/b"]))
                pooled = ad.sum_along(ad.mul(ad.mul(gate, m), offdiag), -2)  # [B,N,E]
                hcat = ad.concat([h, pooled], axis=-1)
                h = ad.linear(
                    ad.silu(ad.linear(hcat, p[f"layer{k}/node0/w"], p[f"layer{k}/node0/b"])),
                    p[f"layer{k}/node1/w"],
                    p[f"layer{k}/node1/b"],
                )
            edge_scalar = ad.linear(
                ad.silu(ad.linear(m, p[f"layer{k}/disp0/w"], p[f"layer{k}/disp0/b"])),
                p[f"layer{k}/disp1/w"],
                p[f"layer{k}/disp1/b"],
            )  # [B,N,N,1]
            xki = ad.reshape(xk, (batch, n, 1, d))
            xkj = ad.reshape(xk, (batch, 1, n, d))
            toward = ad.torus_log(xkj, xki, L)  # [b,i,j] points from j to i
            # Diagonal terms are exactly zero (log of a point to itself), so
            # no mask is needed on this sum.
            step = ad.sum_along(ad.div(ad.mul(toward, edge_scalar), denom), -2)
            xk = ad.wrap(ad.add(xk, step), L)
            if not (np.all(np.isfinite(h.data)) and np.all(np.isfinite(xk.data))):
                raise VelocityFieldError(f"non-finite activations in layer {k}")

        v = ad.torus_log(x0, xk, L)
        if not np.all(np.isfinite(v.data)):
            raise VelocityFieldError("non-finite velocity output")
        return v

    def forward(self, params: dict, t: float, config) -> tuple[np.ndarray, np.ndarray]:
        """Single-configuration convenience wrapper.

        Returns ``(species_velocity, position_velocity)``; the species block
        is structurally zero because labels never flow.
        """
        v = self.forward_positions(
            params, float(t), config.positions[None], config.species[None]
        )
        return (
            np.zeros((config.n_particles, self.config.n_species)),
            v.data[0],
        )


# ---------------------------------------------------------------------------
# Checkpoint files: one JSON header line, then named little-endian tensors.
#
#   u2  name length in bytes     (little-endian)
#   ..  name, UTF-8
#   u1  rank
#   u4  per-axis sizes           (little-endian)
#   f8  row-major data           (little-endian)
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str,
    config: GnnConfig,
    params: dict,
    seed: int | None = None,
    provenance: dict | None = None,
    loss_summary: dict | None = None,
) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "n_tensors": len(params),
        "param_count": int(sum(p.data.size for p in params.values())),
        "seed": seed,
        "provenance": provenance or {},
        "loss_summary": loss_summary or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(np.uint16(len(encoded)).astype("<u2").tobytes())
            fh.write(encoded)
            data = np.ascontiguousarray(tensor.data, dtype="<f8")
            fh.write(np.uint8(data.ndim).tobytes())
            fh.write(np.asarray(data.shape, dtype="<u4").tobytes())
            fh.write(data.tobytes())


def load_checkpoint(path: str) -> tuple[GnnConfig, dict, dict]:
    """Read a checkpoint; returns (config, params, full header)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        if not line.endswith(b"\n"):
            raise VelocityFieldError("missing checkpoint header line")
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise VelocityFieldError(f"malformed checkpoint header: {exc}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise VelocityFieldError(
                f"not a checkpoint file (format={header.get('format')!r})"
            )
        config = GnnConfig(**header["config"])
        params: dict[str, ad.Tensor] = {}
        for _ in range(int(header["n_tensors"])):
            raw = fh.read(2)
            if len(raw) != 2:
                raise VelocityFieldError("truncated checkpoint: name length")
            name_len = int(np.frombuffer(raw, dtype="<u2")[0])
            name_raw = fh.read(name_len)
            rank_raw = fh.read(1)
            if len(name_raw) != name_len or len(rank_raw) != 1:
                raise VelocityFieldError("truncated checkpoint: tensor name")
            name = name_raw.decode("utf-8")
            rank = int(np.frombuffer(rank_raw, dtype="u1")[0])
            shape_raw = fh.read(4 * rank)
            if len(shape_raw) != 4 * rank:
                raise VelocityFieldError(f"truncated checkpoint: tensor {name!r} shape")
            shape = tuple(np.frombuffer(shape_raw, dtype="<u4").astype(int))
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise VelocityFieldError(f"truncated checkpoint: tensor {name!r}")
            data = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
            params[name] = ad.Tensor(data, requires_grad=True)
        if fh.read(1):
            raise VelocityFieldError("trailing bytes after the last tensor")
    return config, params, header
