"""Offline transform: concatenated-group SVD of K/V projections.

For each group of ``m`` consecutive layers the K/V projection matrices are
concatenated column-wise, factorized once by truncated SVD, and split into a
shared left factor ``A`` (hidden -> latent) plus per-layer right factors
``B_k`` / ``B_v`` (latent -> keys / values).  Each layer's value factor is
additionally fused with its output projection so the runtime value path maps
latents straight to attention output.

SVD runs in float64 and factors are stored as float32 in the container.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError
from .model import ModelConfig, ModelWeights, weights_from_tensors
from . import tensorfile


@dataclass(frozen=True)
class GroupLayout:
    """Consecutive layer ranges of equal size covering all layers."""

    group_size: int
    groups: tuple[tuple[int, int], ...]  # (start, end) pairs, end exclusive

    @classmethod
    def for_model(cls, n_layers: int, group_size: int) -> "GroupLayout":
        if group_size < 1:
            raise ConfigurationError("group_size must be >= 1")
        if n_layers % group_size != 0:
            raise ConfigurationError(
                f"n_layers={n_layers} not divisible by group_size={group_size}")
        groups = tuple((s, s + group_size) for s in range(0, n_layers, group_size))
        return cls(group_size=group_size, groups=groups)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self, layer: int) -> int:
        return layer // self.group_size

    def layers_of(self, group: int) -> range:
        s, e = self.groups[group]
        return range(s, e)


def concat_group_weights(weights: ModelWeights, group: range | list[int]) -> np.ndarray:
    """Column-concatenate [W_k, W_v] of each member layer, front to back."""
    blocks = []
    for layer in group:
        lw = weights.layers[layer]
        blocks.append(lw.w_k)
        blocks.append(lw.w_v)
    return np.concatenate(blocks, axis=1)


def _fix_svd_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Largest-magnitude entry of each left singular vector made positive,
    # first occurrence on ties; the matching row of V^T flips with it.
    flip = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
    flip = np.where(flip == 0.0, 1.0, flip)
    return u * flip[None, :], vt * flip[:, None]


def factorize_group(w_g: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-``rank`` SVD split of the concatenated matrix.

    Returns (A, R) with ``A = U_r sqrt(S_r)`` and ``R = sqrt(S_r) V_r^T``;
    slice R column-block-wise to recover the per-layer factors.
    """
    if not 1 <= rank <= min(w_g.shape):
        raise ConfigurationError(
            f"rank {rank} outside [1, {min(w_g.shape)}] for shape {w_g.shape}")
    try:
        u, s, vt = np.linalg.svd(w_g.astype(np.float64), full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed to converge: {exc}") from exc
    u, vt = _fix_svd_signs(u, vt)
    root = np.sqrt(s[:rank])
    a = u[:, :rank] * root[None, :]
    r = root[:, None] * vt[:rank, :]
    return a, r


def split_right_factor(r: np.ndarray, group: range | list[int],
                       d_kv: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Slice the right factor into per-layer (B_k, B_v) following concat order."""
    out = {}
    col = 0
    for layer in group:
        b_k = r[:, col:col + d_kv]
        b_v = r[:, col + d_kv:col + 2 * d_kv]
        out[layer] = (b_k, b_v)
        col += 2 * d_kv
    return out


def fuse_value_output(b_v: np.ndarray, w_o: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Per-query-head products mapping latents directly to attention output.

    Returns (n_q_heads, r, d_hidden): entry q is the KV-head slice of B_v for
    q's key/value head times q's row block of W_o.
    """
    dh = config.d_head
    rank = b_v.shape[0]
    fused = np.empty((config.n_q_heads, rank, config.d_hidden), dtype=b_v.dtype)
    for q in range(config.n_q_heads):
        kv = config.kv_head_of(q)
        fused[q] = b_v[:, kv * dh:(kv + 1) * dh] @ w_o[q * dh:(q + 1) * dh, :]
    return fused


@dataclass
class SharedFactorization:
    """Shared/per-layer factors for one model, plus reconstruction report."""

    config: ModelConfig
    layout: GroupLayout
    rank: int
    rank_fraction: float
    shared: list[np.ndarray]            # per group: (d_hidden, r)
    k_factors: list[np.ndarray]         # per layer: (r, d_kv)
    v_factors: list[np.ndarray]         # per layer: (r, d_kv)
    fused_out: list[np.ndarray]         # per layer: (n_q_heads, r, d_hidden)
    recon_errors: dict[str, float]      # "layers.{l}.k" / ".v" -> rel Frobenius

    def shared_for_layer(self, layer: int) -> np.ndarray:
        return self.shared[self.layout.group_of(layer)]


def clamp_rank(rank_fraction: float, config: ModelConfig, group_size: int) -> int:
    """round(fraction * d_hidden), clamped into [1, min(d_hidden, 2*m*d_kv)]."""
    if not 0 < rank_fraction <= 1:
        raise ConfigurationError("rank_fraction must be in (0, 1]")
    r = round(rank_fraction * config.d_hidden)
    return max(1, min(r, config.d_hidden, 2 * group_size * config.d_kv))


def _rel_frobenius(approx: np.ndarray, exact: np.ndarray) -> float:
    denom = np.linalg.norm(exact.astype(np.float64))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(approx.astype(np.float64) - exact.astype(np.float64)) / denom)


def build_factorization(weights: ModelWeights, group_size: int,
                        rank_fraction: float | None = None,
                        rank: int | None = None) -> SharedFactorization:
    cfg = weights.config
    layout = GroupLayout.for_model(cfg.n_layers, group_size)
    if (rank is None) == (rank_fraction is None):
        raise ConfigurationError("pass exactly one of rank_fraction / rank")
    if rank is None:
        rank = clamp_rank(rank_fraction, cfg, group_size)
    else:
        if not 1 <= rank <= min(cfg.d_hidden, 2 * group_size * cfg.d_kv):
            raise ConfigurationError(f"rank {rank} out of range")
        rank_fraction = rank / cfg.d_hidden

    shared: list[np.ndarray] = []
    k_factors: list[np.ndarray | None] = [None] * cfg.n_layers
    v_factors: list[np.ndarray | None] = [None] * cfg.n_layers
    fused: list[np.ndarray | None] = [None] * cfg.n_layers
    errors: dict[str, float] = {}

    for gi in range(layout.n_groups):
        members = layout.layers_of(gi)
        w_g = concat_group_weights(weights, members)
        a, r = factorize_group(w_g, rank)
        a32 = a.astype(np.float32)
        shared.append(a32)
        for layer, (b_k, b_v) in split_right_factor(r, members, cfg.d_kv).items():
            bk32 = b_k.astype(np.float32)
            bv32 = b_v.astype(np.float32)
            k_factors[layer] = bk32
            v_factors[layer] = bv32
            fused[layer] = fuse_value_output(bv32, weights.layers[layer].w_o, cfg)
            errors[f"layers.{layer}.k"] = _rel_frobenius(a32 @ bk32, weights.layers[layer].w_k)
            errors[f"layers.{layer}.v"] = _rel_frobenius(a32 @ bv32, weights.layers[layer].w_v)

    return SharedFactorization(
        config=cfg, layout=layout, rank=rank, rank_fraction=rank_fraction,
        shared=shared, k_factors=k_factors, v_factors=v_factors,
        fused_out=fused, recon_errors=errors)


def factorization_tensors(fact: SharedFactorization) -> dict[str, np.ndarray]:
    out = {}
    for gi, a in enumerate(fact.shared):
        out[f"groups.{gi}.shared"] = a
    for l in range(fact.config.n_layers):
        out[f"layers.{l}.k_factor"] = fact.k_factors[l]
        out[f"layers.{l}.v_factor"] = fact.v_factors[l]
        out[f"layers.{l}.fused_out"] = fact.fused_out[l]
    return out


def transform_model(weights: ModelWeights, group_size: int, rank_fraction: float
                    ) -> tuple[bytes, dict]:
    """Factorize and serialize to container bytes plus a sidecar report dict.

    The container keeps every original weight (W_v and W_o included, so the
    unfused verification path still runs) alongside the factor tensors.
    """
    fact = build_factorization(weights, group_size, rank_fraction)
    tensors = dict(weights.named_tensors())
    tensors.update(factorization_tensors(fact))
    report = {
        "kind": "factorized_model",
        "config": weights.config.to_dict(),
        "seed": weights.seed,
        "group_size": group_size,
        "rank": fact.rank,
        "rank_fraction": rank_fraction,
        "groups": [list(g) for g in fact.layout.groups],
        "recon_errors": {k: fact.recon_errors[k] for k in sorted(fact.recon_errors)},
    }
    return tensorfile.serialize(tensors, meta=report), report


def load_factorized(blob_or_path) -> tuple[ModelWeights, SharedFactorization]:
    """Load a factorized container (path or bytes) back into runtime objects."""
    if isinstance(blob_or_path, (bytes, bytearray)):
        tensors, meta = tensorfile.deserialize(bytes(blob_or_path))
    else:
        tensors, meta = tensorfile.load(blob_or_path)
    if meta.get("kind") != "factorized_model":
        raise ConfigurationError("container is not a factorized model")
    cfg = ModelConfig.from_dict(meta["config"])
    weights = weights_from_tensors(cfg, tensors, seed=meta.get("seed"))
    layout = GroupLayout(group_size=meta["group_size"],
                         groups=tuple(tuple(g) for g in meta["groups"]))
    fact = SharedFactorization(
        config=cfg, layout=layout, rank=meta["rank"],
        rank_fraction=meta["rank_fraction"],
        shared=[tensors[f"groups.{gi}.shared"] for gi in range(layout.n_groups)],
        k_factors=[tensors[f"layers.{l}.k_factor"] for l in range(cfg.n_layers)],
        v_factors=[tensors[f"layers.{l}.v_factor"] for l in range(cfg.n_layers)],
        fused_out=[tensors[f"layers.{l}.fused_out"] for l in range(cfg.n_layers)],
        recon_errors=dict(meta.get("recon_errors", {})))
    return weights, fact
