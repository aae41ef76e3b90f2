"""Measurement harness: similarity profiling, perplexity, and mode sweeps.

Cache modes:

* ``baseline``          — full-KV engine, no compression
* ``commonkv``          — latent cache with budgeted cross-layer merging
* ``lowrank_perlayer``  — per-layer factorization (group size 1), no merging
* ``rawkv_meanmerge``   — full K/V tensors mean-merged across layer groups

Every reported compression ratio is recomputed from the element-level cache
audit; a mismatch against the budget plan's prediction is a hard failure,
never a warning.

The perplexity protocol splits the probe text into a prefill segment and a
teacher-forced decode segment: the prompt is prefilled, the plan's merges are
applied, and the remaining tokens are fed one by one, so the decode-segment
NLL reflects attention over the compressed cache.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import budget as budget_mod
from .budget import BudgetPlan, FisherWeights, group_score, top_k_groups
from .corpus import markov_byte_corpus
from .errors import ConfigurationError, InputError, NumericError
from .factorization import (SharedFactorization, build_factorization,
                            factorize_group, GroupLayout)
from .latent_cache import LatentSession, baseline_elements, compute_latent
from .model import (BaselineSession, ModelConfig, ModelWeights, apply_rope,
                    build_rope_table, causal_attention_weights, mlp_block,
                    nll_from_logits, rms_norm, _check_tokens)

MODES = ("baseline", "commonkv", "lowrank_perlayer", "rawkv_meanmerge")
CSV_COLUMNS = ("mode", "target_ratio", "achieved_ratio", "nll", "cache_elements",
               "wall_ms", "seed")


# ---------------------------------------------------------------------------
# Cross-layer similarity profiling
# ---------------------------------------------------------------------------

@dataclass
class SimilarityReport:
    """Mean adjacent-layer token cosine per cached quantity."""

    pairs: list[dict[str, float]]      # one entry per (l, l+1) pair
    means: dict[str, float]
    corpus_digest: str

    def to_dict(self) -> dict:
        return {"pairs": self.pairs, "means": self.means, "corpus_hash": self.corpus_digest}


def _collect_layer_states(weights: ModelWeights, ids: np.ndarray,
                          fact: SharedFactorization | None):
    """Prefill once, returning per-layer hidden/key/value (and latent) stacks."""
    cfg = weights.config
    rope = build_rope_table(cfg)
    positions = np.arange(ids.size, dtype=np.int64)
    hiddens, keys, values, latents = [], [], [], []
    x = weights.embed[ids]
    for li, lw in enumerate(weights.layers):
        hiddens.append(x.copy())
        xn = rms_norm(x, lw.attn_gain)
        q = apply_rope((xn @ lw.w_q).reshape(-1, cfg.n_q_heads, cfg.d_head), positions, rope)
        k = apply_rope((xn @ lw.w_k).reshape(-1, cfg.n_kv_heads, cfg.d_head), positions, rope)
        v = (xn @ lw.w_v).reshape(-1, cfg.n_kv_heads, cfg.d_head)
        keys.append(k.reshape(ids.size, -1))
        values.append(v.reshape(ids.size, -1))
        if fact is not None:
            latents.append(compute_latent(xn, fact.shared_for_layer(li)))
        scale = 1.0 / np.sqrt(cfg.d_head)
        o_cat = np.empty((ids.size, cfg.n_q_heads, cfg.d_head), dtype=np.float32)
        for qh in range(cfg.n_q_heads):
            kv = cfg.kv_head_of(qh)
            probs = causal_attention_weights((q[:, qh, :] @ k[:, kv, :].T) * scale,
                                             positions, positions)
            o_cat[:, qh, :] = probs @ v[:, kv, :]
        x = x + o_cat.reshape(ids.size, cfg.d_hidden) @ lw.w_o
        x = x + mlp_block(rms_norm(x, lw.mlp_gain), lw)
    return hiddens, keys, values, latents


def _mean_token_cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(group_score(a, b), -1.0, 1.0))


def profile_similarity(weights: ModelWeights, probe_ids,
                       fact: SharedFactorization | None = None) -> SimilarityReport:
    """Adjacent-layer cosine profile of keys, values, hidden states, latents."""
    ids = _check_tokens(weights.config, probe_ids)
    if ids.size == 0:
        raise InputError("probe corpus is empty")
    hiddens, keys, values, latents = _collect_layer_states(weights, ids, fact)
    pairs = []
    for l in range(weights.config.n_layers - 1):
        entry = {
            "pair": float(l),
            "key": _mean_token_cosine(keys[l], keys[l + 1]),
            "value": _mean_token_cosine(values[l], values[l + 1]),
            "hidden": _mean_token_cosine(hiddens[l], hiddens[l + 1]),
        }
        if latents:
            entry["latent"] = _mean_token_cosine(latents[l], latents[l + 1])
        pairs.append(entry)
    categories = [c for c in ("key", "value", "hidden", "latent") if c in pairs[0]]
    means = {c: float(np.mean([p[c] for p in pairs])) for c in categories}
    digest = hashlib.sha256(ids.astype("<i8").tobytes()).hexdigest()
    return SimilarityReport(pairs=pairs, means=means, corpus_digest=digest)


def similarity_construction_trial(seed: int, n_layers: int = 4, d_hidden: int = 32,
                                  d_kv: int = 16, tokens: int = 64,
                                  neighbor_cos: float = 0.97) -> tuple[float, float]:
    """Synthetic check that shared-factor latents out-cohere raw keys.

    Hidden states for consecutive layers are built with an exact pairwise
    cosine (orthogonalized noise at fixed relative scale), key projections
    are independent per layer, and the shared factor comes from the group
    SVD of the stacked projections.  Returns (latent_similarity,
    key_similarity), each a mean adjacent-layer token cosine.
    """
    rng = np.random.default_rng(seed)
    lam = np.sqrt(1.0 / neighbor_cos**2 - 1.0)  # cos(x, x + lam*|x|*n_perp) == neighbor_cos
    xs = [rng.standard_normal((tokens, d_hidden))]
    for _ in range(n_layers - 1):
        x = xs[-1]
        noise = rng.standard_normal((tokens, d_hidden))
        proj = (np.sum(noise * x, axis=1, keepdims=True)
                / np.sum(x * x, axis=1, keepdims=True)) * x
        perp = noise - proj
        perp *= (np.linalg.norm(x, axis=1, keepdims=True)
                 / np.linalg.norm(perp, axis=1, keepdims=True)) * lam
        xs.append(x + perp)
    w_ks = [rng.standard_normal((d_hidden, d_kv)) / np.sqrt(d_hidden)
            for _ in range(n_layers)]
    w_vs = [rng.standard_normal((d_hidden, d_kv)) / np.sqrt(d_hidden)
            for _ in range(n_layers)]
    stacked = np.concatenate([m for pair in zip(w_ks, w_vs) for m in pair], axis=1)
    shared, _ = factorize_group(stacked, rank=max(1, round(0.7 * d_hidden)))

    key_sims, latent_sims = [], []
    for l in range(n_layers - 1):
        key_sims.append(group_score(xs[l] @ w_ks[l], xs[l + 1] @ w_ks[l + 1]))
        latent_sims.append(group_score(xs[l] @ shared, xs[l + 1] @ shared))
    return float(np.mean(latent_sims)), float(np.mean(key_sims))


# ---------------------------------------------------------------------------
# Raw-KV mean-merge reference mode
# ---------------------------------------------------------------------------

class RawKVSession:
    """Full-KV session whose prefill caches are mean-merged across groups.

    Stands in for direct cross-layer sharing baselines: after prefill the
    ``round(ratio * n_groups)`` most similar groups (first/last raw-cache
    cosine, ties to the lower index) share the arithmetic mean of their
    members' key and value tensors.  Decode tokens keep per-layer caches.
    """

    def __init__(self, weights: ModelWeights, group_size: int):
        self.weights = weights
        self.config = weights.config
        self.layout = GroupLayout.for_model(weights.config.n_layers, group_size)
        self.rope = build_rope_table(weights.config)
        self.prefix_keys: list[np.ndarray] = []   # per layer until merged
        self.prefix_values: list[np.ndarray] = []
        self.group_prefix: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.suffix_keys = [np.empty((0, self.config.n_kv_heads, self.config.d_head),
                                     dtype=np.float32) for _ in range(self.config.n_layers)]
        self.suffix_values = [s.copy() for s in self.suffix_keys]
        self.prefill_positions = np.empty(0, dtype=np.int64)
        self.decode_positions = np.empty(0, dtype=np.int64)
        self.merged_groups: list[int] = []

    def prefill(self, token_ids) -> np.ndarray:
        if self.prefix_keys:
            raise InputError("raw-KV session supports a single prefill call")
        session = BaselineSession(self.weights, self.rope)
        logits = session.prefill(token_ids)
        self.prefix_keys = [lk.keys for lk in session.cache.layers]
        self.prefix_values = [lk.values for lk in session.cache.layers]
        self.prefill_positions = session.cache.positions
        return logits

    def group_scores(self) -> list[float]:
        scores = []
        for gi in range(self.layout.n_groups):
            members = list(self.layout.layers_of(gi))
            first, last = members[0], members[-1]
            t = self.prefill_positions.size
            k_sim = group_score(self.prefix_keys[first].reshape(t, -1),
                                self.prefix_keys[last].reshape(t, -1))
            v_sim = group_score(self.prefix_values[first].reshape(t, -1),
                                self.prefix_values[last].reshape(t, -1))
            scores.append(0.5 * (k_sim + v_sim))
        return scores

    def merge(self, target_ratio: float) -> dict:
        if not 0.0 <= target_ratio < 1.0:
            raise ConfigurationError("target ratio must be in [0, 1)")
        k = round(target_ratio * self.layout.n_groups)
        scores = self.group_scores()
        self.merged_groups = top_k_groups(scores, k)
        for gi in self.merged_groups:
            members = list(self.layout.layers_of(gi))
            mk = np.mean([self.prefix_keys[l].astype(np.float64) for l in members], axis=0)
            mv = np.mean([self.prefix_values[l].astype(np.float64) for l in members], axis=0)
            self.group_prefix[gi] = (mk.astype(np.float32), mv.astype(np.float32))
        return {"scores": scores, "merged_groups": self.merged_groups, "count": k}

    def _layer_prefix(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        gi = self.layout.group_of(layer)
        if gi in self.group_prefix:
            return self.group_prefix[gi]
        return self.prefix_keys[layer], self.prefix_values[layer]

    def decode(self, token_id: int) -> np.ndarray:
        cfg = self.config
        ids = _check_tokens(cfg, [token_id])
        start = self.prefill_positions.size + self.decode_positions.size
        if start + 1 > cfg.max_seq:
            raise ConfigurationError(f"sequence exceeds max_seq={cfg.max_seq}")
        positions = np.array([start], dtype=np.int64)
        self.decode_positions = np.concatenate([self.decode_positions, positions])

        x = self.weights.embed[ids]
        scale = 1.0 / np.sqrt(cfg.d_head)
        for li, lw in enumerate(self.weights.layers):
            xn = rms_norm(x, lw.attn_gain)
            q = apply_rope((xn @ lw.w_q).reshape(-1, cfg.n_q_heads, cfg.d_head),
                           positions, self.rope)
            k = apply_rope((xn @ lw.w_k).reshape(-1, cfg.n_kv_heads, cfg.d_head),
                           positions, self.rope)
            v = (xn @ lw.w_v).reshape(-1, cfg.n_kv_heads, cfg.d_head)
            self.suffix_keys[li] = np.concatenate([self.suffix_keys[li], k], axis=0)
            self.suffix_values[li] = np.concatenate([self.suffix_values[li], v], axis=0)
            pk, pv = self._layer_prefix(li)
            keys = np.concatenate([pk, self.suffix_keys[li]], axis=0)
            values = np.concatenate([pv, self.suffix_values[li]], axis=0)
            k_positions = np.concatenate([self.prefill_positions, self.decode_positions])
            o_cat = np.empty((1, cfg.n_q_heads, cfg.d_head), dtype=np.float32)
            for qh in range(cfg.n_q_heads):
                kv = cfg.kv_head_of(qh)
                probs = causal_attention_weights((q[:, qh, :] @ keys[:, kv, :].T) * scale,
                                                 positions, k_positions)
                o_cat[:, qh, :] = probs @ values[:, kv, :]
            x = x + o_cat.reshape(1, cfg.d_hidden) @ lw.w_o
            x = x + mlp_block(rms_norm(x, lw.mlp_gain), lw)
        return (rms_norm(x, self.weights.final_gain) @ self.weights.lm_head)[0]

    def element_count(self) -> int:
        total = 0
        counted_groups = set()
        for li in range(self.config.n_layers):
            gi = self.layout.group_of(li)
            if gi in self.group_prefix:
                if gi not in counted_groups:
                    mk, mv = self.group_prefix[gi]
                    total += mk.size + mv.size
                    counted_groups.add(gi)
            else:
                total += self.prefix_keys[li].size + self.prefix_values[li].size
            total += self.suffix_keys[li].size + self.suffix_values[li].size
        return total


# ---------------------------------------------------------------------------
# Perplexity under a cache mode
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    mode: str
    nll: float
    target_ratio: float
    achieved_ratio: float
    cache_elements: int
    n_tokens: int
    plan: BudgetPlan | None = None
    extras: dict = field(default_factory=dict)


def _split_point(n_tokens: int, prefill_fraction: float) -> int:
    split = int(round(n_tokens * prefill_fraction))
    return min(max(split, 1), n_tokens - 1)


def perplexity(mode: str, weights: ModelWeights, text_ids,
               fact: SharedFactorization | None = None,
               target_ratio: float = 0.0,
               strategy: str = "mean",
               fisher: FisherWeights | None = None,
               score_variant: str = "shortcut",
               prefill_fraction: float = 0.875,
               group_size: int = 4) -> EvalResult:
    """Teacher-forced mean NLL of ``text_ids`` under one cache mode.

    The achieved ratio is always recomputed from the session's element
    audit; for ``commonkv`` the prefill part is additionally cross-checked
    against the budget plan's exact cost prediction.
    """
    ids = _check_tokens(weights.config, text_ids)
    if ids.size < 2:
        raise InputError("text must hold at least 2 tokens")
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    n_base = baseline_elements(weights.config, ids.size)

    if mode == "baseline":
        # One-shot prefill: bit-identical to the model module's own loss path.
        session = BaselineSession(weights)
        logits = session.prefill(ids)
        nll = nll_from_logits(logits[:-1], ids[1:])
        elements = session.cache_element_count()
        if elements != n_base:
            raise NumericError("baseline audit does not match closed form")
        return EvalResult(mode=mode, nll=nll, target_ratio=0.0,
                          achieved_ratio=1.0 - elements / n_base,
                          cache_elements=elements, n_tokens=int(ids.size))

    if mode == "rawkv_meanmerge":
        session = RawKVSession(weights, group_size)
        split = _split_point(ids.size, prefill_fraction)
        logits = session.prefill(ids[:split])
        merge_info = session.merge(target_ratio)
        rows = [logits]
        for t in ids[split:-1]:
            rows.append(session.decode(int(t))[None, :])
        nll = nll_from_logits(np.concatenate(rows, axis=0)[: ids.size - 1], ids[1:])
        elements = session.element_count()
        expected = ((merge_info["count"] * 1 +
                     (session.layout.n_groups - merge_info["count"]) * group_size)
                    * 2 * weights.config.d_kv * split
                    + weights.config.n_layers * 2 * weights.config.d_kv
                    * (ids.size - 1 - split))
        if elements != expected:
            raise NumericError("raw-KV audit does not match merge accounting")
        return EvalResult(mode=mode, nll=nll, target_ratio=target_ratio,
                          achieved_ratio=1.0 - elements / n_base,
                          cache_elements=elements, n_tokens=int(ids.size),
                          extras=merge_info)

    # latent modes need a factorization
    if mode == "lowrank_perlayer":
        rank = max(1, int((1.0 - target_ratio) * 2 * weights.config.d_kv))
        fact = build_factorization(weights, group_size=1, rank=rank)
        session = LatentSession(weights, fact)
        split = _split_point(ids.size, prefill_fraction)
        logits = session.prefill(ids[:split])
        # per-layer reference never merges; with m=1 the cost is rank-driven only
        plan = budget_mod.allocate_budget([1.0] * fact.layout.n_groups, 0.0, fact.layout,
                                          fact.rank, weights.config, strategy="mean")
        session.apply_plan(plan)
        rows = [logits]
        for t in ids[split:-1]:
            rows.append(session.decode(int(t))[None, :])
        nll = nll_from_logits(np.concatenate(rows, axis=0)[: ids.size - 1], ids[1:])
    else:  # commonkv
        if fact is None:
            raise ConfigurationError("commonkv mode needs a factorized model")
        session = LatentSession(weights, fact)
        split = _split_point(ids.size, prefill_fraction)
        logits = session.prefill(ids[:split])
        plan = session.plan_and_merge(target_ratio, strategy=strategy, fisher=fisher,
                                      score_variant=score_variant)
        rows = [logits]
        for t in ids[split:-1]:
            rows.append(session.decode(int(t))[None, :])
        nll = nll_from_logits(np.concatenate(rows, axis=0)[: ids.size - 1], ids[1:])

    audit = session.audit()
    expected_prefix = plan.cost_per_token * session.store.prefill_len
    if audit.prefix_elements != expected_prefix:
        raise NumericError(
            f"prefill audit {audit.prefix_elements} != plan prediction {expected_prefix}")
    elements = audit.total_elements
    return EvalResult(mode=mode, nll=nll, target_ratio=target_ratio,
                      achieved_ratio=1.0 - elements / n_base,
                      cache_elements=elements, n_tokens=int(ids.size), plan=plan)


# ---------------------------------------------------------------------------
# Benchmark sweep
# ---------------------------------------------------------------------------

@dataclass
class BenchRecord:
    mode: str
    target_ratio: float
    achieved_ratio: float | None
    nll: float | None
    cache_elements: int | None
    wall_ms: float
    seed: int
    unreachable: bool = False
    note: str = ""

    def csv_row(self) -> list[str]:
        if self.unreachable:
            return [self.mode, f"{self.target_ratio:g}", "", "", "",
                    f"{self.wall_ms:.3f}", str(self.seed)]
        return [self.mode, f"{self.target_ratio:g}", f"{self.achieved_ratio:.9f}",
                f"{self.nll:.9f}", str(self.cache_elements),
                f"{self.wall_ms:.3f}", str(self.seed)]


def bench_sweep(weights: ModelWeights, fact: SharedFactorization | None,
                ratios: list[float], modes: list[str], seeds: list[int],
                strategy: str = "mean", fisher: FisherWeights | None = None,
                score_variant: str = "shortcut", probe_tokens: int = 128,
                prefill_fraction: float = 0.875,
                group_size: int = 4, workers: int = 1) -> list[BenchRecord]:
    """One record per (mode, ratio, seed); fresh session and probe per record.

    Baseline ignores the ratio axis and is run once per seed at ratio 0.
    Unreachable (mode, ratio) pairs are recorded with empty measurements.
    Entries are independent; ``workers > 1`` runs them on a thread pool with
    the output order preserved.
    """
    for mode in modes:
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}")
    tasks = [(mode, ratio, seed)
             for mode in modes
             for ratio in ([0.0] if mode == "baseline" else ratios)
             for seed in seeds]

    def run_one(task) -> BenchRecord:
        mode, ratio, seed = task
        ids = markov_byte_corpus(seed, 1, probe_tokens)[0]
        start = time.perf_counter()
        try:
            res = perplexity(mode, weights, ids, fact=fact, target_ratio=ratio,
                             strategy=strategy, fisher=fisher,
                             score_variant=score_variant,
                             prefill_fraction=prefill_fraction,
                             group_size=group_size)
        except ConfigurationError as exc:
            return BenchRecord(mode=mode, target_ratio=ratio, achieved_ratio=None,
                               nll=None, cache_elements=None,
                               wall_ms=(time.perf_counter() - start) * 1e3, seed=seed,
                               unreachable=True, note=str(exc))
        return BenchRecord(mode=mode, target_ratio=ratio,
                           achieved_ratio=res.achieved_ratio, nll=res.nll,
                           cache_elements=res.cache_elements,
                           wall_ms=(time.perf_counter() - start) * 1e3, seed=seed)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_one, tasks))
    return [run_one(t) for t in tasks]


def records_to_csv(records: list[BenchRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for rec in records:
        lines.append(",".join(rec.csv_row()))
    return "\n".join(lines) + "\n"


def sweep_summary(records: list[BenchRecord], config: ModelConfig,
                  extra: dict | None = None) -> dict:
    out = {
        "config": config.to_dict(),
        "n_records": len(records),
        "unreachable": [
            {"mode": r.mode, "target_ratio": r.target_ratio, "note": r.note}
            for r in records if r.unreachable],
        "by_mode": {},
    }
    for mode in sorted({r.mode for r in records}):
        rows = [r for r in records if r.mode == mode and not r.unreachable]
        if rows:
            out["by_mode"][mode] = {
                "mean_nll": float(np.mean([r.nll for r in rows])),
                "mean_achieved_ratio": float(np.mean([r.achieved_ratio for r in rows])),
            }
    if extra:
        out.update(extra)
    return out
