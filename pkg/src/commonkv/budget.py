"""Adaptive compression budgets, Fisher calibration, and prefix merging.

The per-group score is the mean per-token cosine between the first and last
member layer's latent prefixes (a cheaper stand-in for averaging every
adjacent pair, which ``group_score_full`` provides).  Budgets map a target
compression ratio to the number of groups to merge via exact storage
arithmetic: a merged group stores one latent prefix of width ``r`` per token,
an unmerged group stores ``m`` of them, and the full-KV baseline stores
``2 * d_kv`` per layer per token.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError
from .model import ModelConfig, ModelWeights, loss_and_grads


# ---------------------------------------------------------------------------
# Group scores
# ---------------------------------------------------------------------------

def _token_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    dots = np.sum(x * y, axis=-1)
    norms = np.linalg.norm(x, axis=-1) * np.linalg.norm(y, axis=-1)
    out = np.zeros_like(dots)
    ok = norms > 0.0
    out[ok] = dots[ok] / norms[ok]
    return out


def group_score(h_first: np.ndarray, h_last: np.ndarray) -> float:
    """Mean token cosine between a group's first and last latent prefixes."""
    if h_first.shape != h_last.shape:
        raise InputError("latent prefixes differ in shape")
    if h_first.shape[0] == 0:
        raise InputError("cannot score an empty prefix")
    return float(np.mean(_token_cosines(h_first, h_last)))


def group_score_full(prefixes: list[np.ndarray]) -> float:
    """Mean over adjacent member-layer pairs of the mean token cosine."""
    if not prefixes:
        raise InputError("empty group")
    if len(prefixes) == 1:
        return group_score(prefixes[0], prefixes[0])
    pair_scores = [group_score(prefixes[i], prefixes[i + 1])
                   for i in range(len(prefixes) - 1)]
    return float(np.mean(pair_scores))


# ---------------------------------------------------------------------------
# Budget allocation
# ---------------------------------------------------------------------------

@dataclass
class BudgetPlan:
    scores: list[float]
    target_ratio: float
    merged_groups: list[int]
    strategy: str
    rank: int
    cost_per_token: int               # prefill latent elements per token
    predicted_prefill_ratio: float
    merge_weights: dict[int, list[float]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def merged_count(self) -> int:
        return len(self.merged_groups)

    def to_dict(self) -> dict:
        return {
            "scores": self.scores,
            "target_ratio": self.target_ratio,
            "merged_groups": self.merged_groups,
            "strategy": self.strategy,
            "rank": self.rank,
            "cost_per_token": self.cost_per_token,
            "predicted_prefill_ratio": self.predicted_prefill_ratio,
            "merge_weights": {str(g): w for g, w in self.merge_weights.items()},
            "warnings": self.warnings,
        }


def prefill_cost_per_token(merged_count: int, n_groups: int, group_size: int,
                           rank: int) -> int:
    return merged_count * rank + (n_groups - merged_count) * group_size * rank


def max_achievable_ratio(layout, rank: int, config: ModelConfig) -> float:
    """Prefill compression with every group merged."""
    baseline = config.n_layers * 2 * config.d_kv
    return 1.0 - prefill_cost_per_token(layout.n_groups, layout.n_groups,
                                        layout.group_size, rank) / baseline


def top_k_groups(scores: list[float], k: int) -> list[int]:
    """Indices of the k highest scores; ties resolved toward lower index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:k])


def allocate_budget(scores: list[float], target_ratio: float, layout, rank: int,
                    config: ModelConfig, strategy: str = "fisher") -> BudgetPlan:
    """Smallest merged-group count whose prefill storage meets the target.

    Raises ``ConfigurationError`` (carrying the maximum achievable ratio)
    when even merging every group cannot reach ``target_ratio``.
    """
    if not 0.0 <= target_ratio < 1.0:
        raise ConfigurationError("target ratio must be in [0, 1)")
    if strategy not in ("mean", "fisher", "shallow", "deep"):
        raise ConfigurationError(f"unknown merge strategy {strategy!r}")
    n_groups = layout.n_groups
    if len(scores) != n_groups:
        raise InputError(f"expected {n_groups} scores, got {len(scores)}")
    baseline = config.n_layers * 2 * config.d_kv
    chosen = None
    for k in range(n_groups + 1):
        cost = prefill_cost_per_token(k, n_groups, layout.group_size, rank)
        ratio = 1.0 - cost / baseline
        if ratio >= target_ratio:
            chosen = (k, cost, ratio)
            break
    if chosen is None:
        best = max_achievable_ratio(layout, rank, config)
        raise ConfigurationError(
            f"target ratio {target_ratio} unreachable at rank {rank}; "
            f"maximum achievable is {best:.6f}", max_achievable=best)
    k, cost, ratio = chosen
    return BudgetPlan(scores=list(scores), target_ratio=target_ratio,
                      merged_groups=top_k_groups(scores, k), strategy=strategy,
                      rank=rank, cost_per_token=cost, predicted_prefill_ratio=ratio)


# ---------------------------------------------------------------------------
# Fisher calibration
# ---------------------------------------------------------------------------

def corpus_hash(sequences: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for seq in sequences:
        arr = np.asarray(seq, dtype=np.int64)
        h.update(len(arr).to_bytes(8, "little"))
        h.update(arr.astype("<i8").tobytes())
    return h.hexdigest()


@dataclass
class FisherWeights:
    """Per-layer importance: summed squared loss gradients of W_k and W_v."""

    per_layer: list[float]
    corpus_digest: str
    seed: int | None = None
    n_sequences: int = 0

    def for_layers(self, layers) -> list[float]:
        return [self.per_layer[l] for l in layers]

    def to_json(self) -> str:
        return json.dumps({
            "kind": "fisher_weights",
            "per_layer": self.per_layer,
            "corpus_hash": self.corpus_digest,
            "seed": self.seed,
            "n_sequences": self.n_sequences,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FisherWeights":
        d = json.loads(text)
        if d.get("kind") != "fisher_weights":
            raise ConfigurationError("not a Fisher weights file")
        return cls(per_layer=d["per_layer"], corpus_digest=d["corpus_hash"],
                   seed=d.get("seed"), n_sequences=d.get("n_sequences", 0))


def estimate_fisher(weights: ModelWeights, corpus: list[np.ndarray],
                    seed: int | None = None) -> FisherWeights:
    """Empirical Fisher over the calibration corpus.

    For each sequence the gradient of its mean NLL is taken with respect to
    every W_k and W_v; squared element sums are averaged over sequences, and
    the per-layer weight is the key and value contributions added together.
    """
    if not corpus:
        raise InputError("calibration corpus is empty")
    n_layers = weights.config.n_layers
    acc = np.zeros(n_layers, dtype=np.float64)
    for seq in corpus:
        _, grads = loss_and_grads(weights, seq)
        for l in range(n_layers):
            acc[l] += np.sum(grads[l]["w_k"] ** 2) + np.sum(grads[l]["w_v"] ** 2)
    acc /= len(corpus)
    return FisherWeights(per_layer=[float(v) for v in acc],
                         corpus_digest=corpus_hash(corpus), seed=seed,
                         n_sequences=len(corpus))


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------

MERGE_STRATEGIES = ("mean", "fisher", "shallow", "deep")


def merge_group(prefixes: list[np.ndarray], strategy: str,
                fisher_values: list[float] | None = None
                ) -> tuple[np.ndarray, list[float], bool]:
    """Collapse per-layer prefixes into one shared prefix.

    Returns (merged, weights_used, fisher_fell_back).  Weights are always
    nonnegative and sum to one, so merged rows stay in the convex hull of
    the member rows.
    """
    if not prefixes:
        raise InputError("nothing to merge")
    shapes = {p.shape for p in prefixes}
    if len(shapes) != 1:
        raise InputError("prefixes differ in shape")
    m = len(prefixes)
    fell_back = False
    if strategy == "mean":
        w = [1.0 / m] * m
    elif strategy == "shallow":
        w = [0.0] * m
        w[0] = 1.0
    elif strategy == "deep":
        w = [0.0] * m
        w[-1] = 1.0
    elif strategy == "fisher":
        if fisher_values is None:
            raise InputError("fisher strategy needs Fisher weights")
        if len(fisher_values) != m:
            raise InputError("Fisher weight count does not match group size")
        if any(f < 0 for f in fisher_values):
            raise InputError("Fisher weights must be nonnegative")
        total = float(sum(fisher_values))
        if total == 0.0:
            w = [1.0 / m] * m
            fell_back = True
        else:
            w = [float(f) / total for f in fisher_values]
    else:
        raise InputError(f"unknown merge strategy {strategy!r}")
    merged = np.zeros(prefixes[0].shape, dtype=np.float64)
    for weight, prefix in zip(w, prefixes):
        if weight != 0.0:
            merged += weight * prefix.astype(np.float64)
    return merged.astype(np.float32), w, fell_back
