"""Runtime latent KV cache and the compressed-inference session.

The cache stores position-free latent rows ``h = x_normed @ A`` per layer.
Keys are restored on the fly each step (``rope(h @ B_k)``) and values never
materialize: the value path goes through the pre-fused latent-to-output
matrices.  After prefill, groups selected by the budget plan collapse their
per-layer prefixes into one shared prefix; decode-time latents always stay
per layer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import budget as budget_mod
from . import tensorfile
from .errors import InputError, NumericError
from .factorization import SharedFactorization
from .model import (ModelConfig, ModelWeights, RopeTable, apply_rope, build_rope_table,
                    causal_attention_weights, mlp_block, rms_norm, _check_tokens)
from .errors import CapacityError


def compute_latent(x: np.ndarray, shared: np.ndarray) -> np.ndarray:
    """Project hidden rows into the latent space: (tokens, r), position-free."""
    return x @ shared


def restore_keys(latents: np.ndarray, k_factor: np.ndarray, position_ids: np.ndarray,
                 rope: RopeTable, n_kv_heads: int) -> np.ndarray:
    """Keys from latents: (tokens, n_kv_heads, d_head) with rotations applied."""
    flat = latents @ k_factor
    keys = flat.reshape(latents.shape[0], n_kv_heads, -1)
    return apply_rope(keys, position_ids, rope)


def attend_latent(q_rope: np.ndarray, latents: np.ndarray, k_factor: np.ndarray,
                  fused_out: np.ndarray, q_positions: np.ndarray, k_positions: np.ndarray,
                  rope: RopeTable, config: ModelConfig, *,
                  v_factor: np.ndarray | None = None,
                  w_o: np.ndarray | None = None) -> np.ndarray:
    """Causal attention over latent rows for one layer; returns (Tq, d_hidden).

    Default is the fused value path ``sum_q (P_q @ H) @ M_q``.  Passing
    ``v_factor`` and ``w_o`` switches to the unfused verification path that
    restores values explicitly and applies the output projection.
    """
    keys = restore_keys(latents, k_factor, k_positions, rope, config.n_kv_heads)
    scale = 1.0 / np.sqrt(config.d_head)
    unfused = v_factor is not None
    if unfused:
        values = (latents @ v_factor).reshape(latents.shape[0], config.n_kv_heads, -1)
        o_cat = np.empty((q_rope.shape[0], config.n_q_heads, config.d_head), dtype=np.float32)
    out = np.zeros((q_rope.shape[0], config.d_hidden), dtype=np.float32)
    for q in range(config.n_q_heads):
        kv = config.kv_head_of(q)
        scores = (q_rope[:, q, :] @ keys[:, kv, :].T) * scale
        probs = causal_attention_weights(scores, q_positions, k_positions)
        if unfused:
            o_cat[:, q, :] = probs @ values[:, kv, :]
        else:
            out += (probs @ latents) @ fused_out[q]
    if unfused:
        return o_cat.reshape(q_rope.shape[0], config.d_hidden) @ w_o
    return out


@dataclass
class GroupCache:
    layer_prefixes: list[np.ndarray]     # per member layer, (T_pre, r); unused once merged
    merged: bool = False
    shared_prefix: np.ndarray | None = None
    merge_checksum: str | None = None


@dataclass
class CacheAudit:
    """Element counts per stored part (float32 elements, not bytes)."""

    prefix_elements: int
    suffix_elements: int
    per_group_prefix: list[int]

    @property
    def total_elements(self) -> int:
        return self.prefix_elements + self.suffix_elements


def baseline_elements(config: ModelConfig, n_tokens: int) -> int:
    """Elements a full-KV cache stores for the same token count."""
    return config.n_layers * 2 * config.d_kv * n_tokens


class LatentCacheStore:
    """Per-group prefill prefixes plus per-layer decode suffixes."""

    def __init__(self, fact: SharedFactorization):
        self.fact = fact
        self.config = fact.config
        rank = fact.rank
        self.groups = [
            GroupCache(layer_prefixes=[np.empty((0, rank), dtype=np.float32)
                                       for _ in fact.layout.layers_of(gi)])
            for gi in range(fact.layout.n_groups)
        ]
        self.suffixes = [np.empty((0, rank), dtype=np.float32)
                         for _ in range(self.config.n_layers)]
        self.prefill_positions = np.empty(0, dtype=np.int64)
        self.decode_positions = np.empty(0, dtype=np.int64)

    @property
    def prefill_len(self) -> int:
        return len(self.prefill_positions)

    @property
    def decode_len(self) -> int:
        return len(self.decode_positions)

    def append_prefill(self, layer: int, latents: np.ndarray) -> None:
        gi = self.fact.layout.group_of(layer)
        gc = self.groups[gi]
        if gc.merged:
            raise InputError("cannot extend the prefix of a merged group")
        slot = layer - self.fact.layout.groups[gi][0]
        gc.layer_prefixes[slot] = np.concatenate([gc.layer_prefixes[slot], latents], axis=0)

    def append_decode(self, layer: int, latents: np.ndarray) -> None:
        self.suffixes[layer] = np.concatenate([self.suffixes[layer], latents], axis=0)

    def prefix_for_layer(self, layer: int) -> np.ndarray:
        gi = self.fact.layout.group_of(layer)
        gc = self.groups[gi]
        if gc.merged:
            return gc.shared_prefix
        return gc.layer_prefixes[layer - self.fact.layout.groups[gi][0]]

    def visible_latents(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated (latents, positions) this layer may attend to."""
        prefix = self.prefix_for_layer(layer)
        suffix = self.suffixes[layer]
        return (np.concatenate([prefix, suffix], axis=0),
                np.concatenate([self.prefill_positions, self.decode_positions]))

    def merge_group(self, gi: int, merged: np.ndarray) -> None:
        gc = self.groups[gi]
        if gc.merged:
            raise InputError(f"group {gi} already merged")
        if merged.shape != (self.prefill_len, self.fact.rank):
            raise InputError("merged prefix has wrong shape")
        gc.shared_prefix = merged
        gc.layer_prefixes = []
        gc.merged = True
        gc.merge_checksum = hashlib.sha256(merged.tobytes()).hexdigest()

    def merged_prefix_checksums(self) -> dict[int, str]:
        return {gi: hashlib.sha256(gc.shared_prefix.tobytes()).hexdigest()
                for gi, gc in enumerate(self.groups) if gc.merged}

    def verify_merged_prefixes(self) -> None:
        for gi, gc in enumerate(self.groups):
            if gc.merged and hashlib.sha256(gc.shared_prefix.tobytes()).hexdigest() \
                    != gc.merge_checksum:
                raise NumericError(f"merged prefix of group {gi} was mutated after merge")

    def audit(self) -> CacheAudit:
        per_group = []
        for gc in self.groups:
            if gc.merged:
                per_group.append(int(gc.shared_prefix.size))
            else:
                per_group.append(int(sum(p.size for p in gc.layer_prefixes)))
        suffix = int(sum(s.size for s in self.suffixes))
        return CacheAudit(prefix_elements=sum(per_group), suffix_elements=suffix,
                          per_group_prefix=per_group)

    def debug_dump(self) -> bytes:
        """Container snapshot of every stored latent array, for inspection.

        Position ids travel in the metadata so the payload holds exactly the
        audited cache elements (payload bytes / 4 == total element count).
        """
        tensors: dict[str, np.ndarray] = {}
        for gi, gc in enumerate(self.groups):
            if gc.merged:
                tensors[f"groups.{gi}.shared_prefix"] = gc.shared_prefix
            else:
                for slot, p in enumerate(gc.layer_prefixes):
                    tensors[f"groups.{gi}.prefix.{slot}"] = p
        for l, s in enumerate(self.suffixes):
            tensors[f"layers.{l}.suffix"] = s
        meta = {"kind": "latent_cache_dump",
                "prefill_positions": self.prefill_positions.tolist(),
                "decode_positions": self.decode_positions.tolist()}
        return tensorfile.serialize(tensors, meta=meta)


class LatentSession:
    """One compressed-inference session: prefill, plan/merge, decode."""

    def __init__(self, weights: ModelWeights, fact: SharedFactorization,
                 rope: RopeTable | None = None, unfused_values: bool = False):
        if fact.config != weights.config:
            raise InputError("factorization does not match model config")
        self.weights = weights
        self.fact = fact
        self.rope = rope if rope is not None else build_rope_table(weights.config)
        self.store = LatentCacheStore(fact)
        self.unfused_values = unfused_values
        self.plan: budget_mod.BudgetPlan | None = None
        self._prefill_frozen = False

    # -- phases ------------------------------------------------------------

    def prefill(self, token_ids) -> np.ndarray:
        """Process prompt tokens, caching per-layer latent prefixes."""
        if self._prefill_frozen:
            raise InputError("prefill phase already closed (merge or decode happened)")
        ids = _check_tokens(self.weights.config, token_ids)
        logits = self._forward(ids, phase="prefill")
        return logits

    def plan_and_merge(self, target_ratio: float, strategy: str = "fisher",
                       fisher: budget_mod.FisherWeights | None = None,
                       score_variant: str = "shortcut") -> budget_mod.BudgetPlan:
        """Score groups, allocate the budget, merge the selected prefixes."""
        scores = self.group_scores(score_variant)
        plan = budget_mod.allocate_budget(
            scores, target_ratio, self.fact.layout, self.fact.rank,
            self.weights.config, strategy=strategy)
        self.apply_plan(plan, fisher)
        return plan

    def group_scores(self, variant: str = "shortcut") -> list[float]:
        layout = self.fact.layout
        scores = []
        for gi in range(layout.n_groups):
            gc = self.store.groups[gi]
            if gc.merged:
                raise InputError("scores must be computed before merging")
            if variant == "shortcut":
                scores.append(budget_mod.group_score(gc.layer_prefixes[0],
                                                     gc.layer_prefixes[-1]))
            elif variant == "full":
                scores.append(budget_mod.group_score_full(gc.layer_prefixes))
            else:
                raise InputError(f"unknown score variant {variant!r}")
        return scores

    def apply_plan(self, plan: budget_mod.BudgetPlan,
                   fisher: budget_mod.FisherWeights | None = None) -> None:
        self._prefill_frozen = True
        self.plan = plan
        layout = self.fact.layout
        for gi in sorted(plan.merged_groups):
            members = list(layout.layers_of(gi))
            gc = self.store.groups[gi]
            merged, weights_used, fell_back = budget_mod.merge_group(
                gc.layer_prefixes, plan.strategy,
                fisher.for_layers(members) if fisher is not None else None)
            plan.merge_weights[gi] = weights_used
            if fell_back:
                plan.warnings.append(
                    f"group {gi}: zero Fisher mass, fell back to mean merge")
            self.store.merge_group(gi, merged)

    def decode(self, token_id: int) -> np.ndarray:
        """One generated token; its latent joins the layer-private suffix."""
        self._prefill_frozen = True
        ids = _check_tokens(self.weights.config, [token_id])
        return self._forward(ids, phase="decode")[0]

    # -- internals -----------------------------------------------------------

    def _forward(self, ids: np.ndarray, phase: str) -> np.ndarray:
        cfg = self.weights.config
        store = self.store
        start = store.prefill_len + store.decode_len
        if start + ids.size > cfg.max_seq:
            raise CapacityError(f"sequence of {start + ids.size} exceeds max_seq={cfg.max_seq}")
        positions = np.arange(start, start + ids.size, dtype=np.int64)
        # record positions up front so visible_latents lines up with the rows
        # each layer appends for the current chunk
        if phase == "prefill":
            store.prefill_positions = np.concatenate([store.prefill_positions, positions])
        else:
            store.decode_positions = np.concatenate([store.decode_positions, positions])

        x = self.weights.embed[ids]
        for li, lw in enumerate(self.weights.layers):
            xn = rms_norm(x, lw.attn_gain)
            q = apply_rope((xn @ lw.w_q).reshape(-1, cfg.n_q_heads, cfg.d_head),
                           positions, self.rope)
            h_new = compute_latent(xn, self.fact.shared_for_layer(li))
            if phase == "prefill":
                store.append_prefill(li, h_new)
            else:
                store.append_decode(li, h_new)
            latents, k_positions = store.visible_latents(li)
            kwargs = {}
            if self.unfused_values:
                kwargs = {"v_factor": self.fact.v_factors[li], "w_o": lw.w_o}
            x = x + attend_latent(q, latents, self.fact.k_factors[li],
                                  self.fact.fused_out[li], positions, k_positions,
                                  self.rope, cfg, **kwargs)
            x = x + mlp_block(rms_norm(x, lw.mlp_gain), lw)
        return rms_norm(x, self.weights.final_gain) @ self.weights.lm_head

    # -- accounting ----------------------------------------------------------

    def audit(self) -> CacheAudit:
        return self.store.audit()

    def achieved_ratio(self) -> float:
        """Compression vs the full-KV baseline, prefill and decode pooled."""
        n_tokens = self.store.prefill_len + self.store.decode_len
        if n_tokens == 0:
            return 0.0
        return 1.0 - self.audit().total_elements / baseline_elements(self.weights.config,
                                                                     n_tokens)
