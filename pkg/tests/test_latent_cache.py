import numpy as np
import pytest

from commonkv import tensorfile
from commonkv.budget import allocate_budget
from commonkv.errors import InputError, NumericError
from commonkv.latent_cache import (LatentSession, attend_latent, baseline_elements,
                                   compute_latent, restore_keys)
from commonkv.model import (BaselineSession, apply_rope, attention_block,
                            build_rope_table, rms_norm)


# -- latent projection ---------------------------------------------------------

def test_identity_projection():
    x = np.random.default_rng(0).standard_normal((6, 8)).astype(np.float32)
    np.testing.assert_array_equal(compute_latent(x, np.eye(8, dtype=np.float32)), x)


def test_zero_input():
    a = np.random.default_rng(1).standard_normal((8, 5)).astype(np.float32)
    assert not compute_latent(np.zeros((4, 8), dtype=np.float32), a).any()


def test_orthonormal_columns_preserve_cosine():
    # QR gives the orthonormal basis; rows built inside its column span keep
    # their pairwise cosine under the projection.
    rng = np.random.default_rng(2)
    q, _ = np.linalg.qr(rng.standard_normal((8, 5)))
    a = q.astype(np.float32)  # (8, 5), orthonormal columns
    u = rng.standard_normal((2, 5)).astype(np.float32)
    x = u @ a.T
    h = compute_latent(x, a)

    def cos(p, q_):
        return float(p @ q_ / (np.linalg.norm(p) * np.linalg.norm(q_)))

    assert cos(h[0], h[1]) == pytest.approx(cos(x[0], x[1]), abs=1e-6)


# -- key restoration ------------------------------------------------------------

def test_restored_keys_match_baseline_cache(fact_full, probe_ids):
    weights, fact = fact_full
    cfg = weights.config
    rope = build_rope_table(cfg)
    session = BaselineSession(weights, rope)
    session.prefill(probe_ids[:32])
    positions = np.arange(32)
    x = weights.embed[probe_ids[:32]]
    worst = 0.0
    for layer, lw in enumerate(weights.layers):
        xn = rms_norm(x, lw.attn_gain)
        h = compute_latent(xn, fact.shared_for_layer(layer))
        restored = restore_keys(h, fact.k_factors[layer], positions, rope, cfg.n_kv_heads)
        worst = max(worst, np.abs(restored - session.cache.layers[layer].keys).max())
        # advance x exactly as the baseline does
        q = apply_rope((xn @ lw.w_q).reshape(-1, cfg.n_q_heads, cfg.d_head),
                       positions, rope)
        x = x + attention_block(q, session.cache.layers[layer].keys,
                                session.cache.layers[layer].values,
                                positions, positions, lw.w_o, cfg)
        from commonkv.model import mlp_block
        x = x + mlp_block(rms_norm(x, lw.mlp_gain), lw)
    assert worst < 1e-5


def test_zero_factor_restores_zero_keys(toy_cfg):
    rope = build_rope_table(toy_cfg)
    h = np.random.default_rng(3).standard_normal((5, 45)).astype(np.float32)
    b_k = np.zeros((45, toy_cfg.d_kv), dtype=np.float32)
    assert not restore_keys(h, b_k, np.arange(5), rope, toy_cfg.n_kv_heads).any()


def test_restoration_is_stateless(fact07):
    weights, fact, _ = fact07
    rope = build_rope_table(weights.config)
    h = np.random.default_rng(4).standard_normal((7, fact.rank)).astype(np.float32)
    one = restore_keys(h, fact.k_factors[2], np.arange(7), rope,
                       weights.config.n_kv_heads)
    two = restore_keys(h, fact.k_factors[2], np.arange(7), rope,
                       weights.config.n_kv_heads)
    assert one.tobytes() == two.tobytes()


# -- attention over latents -------------------------------------------------------

def test_latent_attention_matches_baseline_at_full_rank(fact_full):
    weights, fact = fact_full
    cfg = weights.config
    rope = build_rope_table(cfg)
    rng = np.random.default_rng(5)
    xn = rng.standard_normal((10, cfg.d_hidden)).astype(np.float32) * 0.3
    positions = np.arange(10)
    for layer in (0, 3, 7):
        lw = weights.layers[layer]
        q = apply_rope((xn @ lw.w_q).reshape(-1, cfg.n_q_heads, cfg.d_head),
                       positions, rope)
        keys = apply_rope((xn @ lw.w_k).reshape(-1, cfg.n_kv_heads, cfg.d_head),
                          positions, rope)
        values = (xn @ lw.w_v).reshape(-1, cfg.n_kv_heads, cfg.d_head)
        baseline = attention_block(q, keys, values, positions, positions, lw.w_o, cfg)
        h = compute_latent(xn, fact.shared_for_layer(layer))
        latent = attend_latent(q, h, fact.k_factors[layer], fact.fused_out[layer],
                               positions, positions, rope, cfg)
        assert np.abs(latent - baseline).max() < 1e-5


def test_singleton_softmax(fact07):
    weights, fact, _ = fact07
    cfg = weights.config
    rope = build_rope_table(cfg)
    rng = np.random.default_rng(6)
    h = rng.standard_normal((1, fact.rank)).astype(np.float32)
    q = rng.standard_normal((1, cfg.n_q_heads, cfg.d_head)).astype(np.float32)
    pos = np.arange(1)
    out = attend_latent(q, h, fact.k_factors[0], fact.fused_out[0], pos, pos, rope, cfg)
    expected = sum(h @ fact.fused_out[0][qh] for qh in range(cfg.n_q_heads))
    np.testing.assert_allclose(out, expected, atol=1e-6)


def _force_identical_prefixes(session):
    for gc in session.store.groups:
        gc.layer_prefixes = [gc.layer_prefixes[0].copy() for _ in gc.layer_prefixes]


def test_merged_identical_latents_change_nothing(fact07, probe_ids):
    weights, fact, _ = fact07
    plain = LatentSession(weights, fact)
    merged = LatentSession(weights, fact)
    for s in (plain, merged):
        s.prefill(probe_ids[:24])
        _force_identical_prefixes(s)
    plan = allocate_budget(merged.group_scores(), 0.6, fact.layout, fact.rank,
                           weights.config, strategy="mean")
    assert plan.merged_count == len(fact.layout.groups)
    merged.apply_plan(plan)
    for t in probe_ids[24:32]:
        diff = np.abs(plain.decode(int(t)) - merged.decode(int(t))).max()
        assert diff < 1e-6


# -- decode bookkeeping --------------------------------------------------------

def test_suffix_lengths_count_decode_steps(fact07, probe_ids):
    weights, fact, _ = fact07
    session = LatentSession(weights, fact)
    session.prefill(probe_ids[:16])
    session.plan_and_merge(0.3, strategy="mean")
    for k, t in enumerate(probe_ids[16:21], start=1):
        session.decode(int(t))
        assert all(s.shape[0] == k for s in session.store.suffixes)


def test_decode_without_prefill_matches_baseline(fact_full, probe_ids):
    weights, fact = fact_full
    latent = LatentSession(weights, fact)
    base = BaselineSession(weights)
    for t in probe_ids[:6]:
        diff = np.abs(latent.decode(int(t)) - base.decode(int(t))).max()
        assert diff < 1e-5


def test_merged_group_suffixes_stay_per_layer(fact07, probe_ids):
    weights, fact, _ = fact07
    session = LatentSession(weights, fact)
    session.prefill(probe_ids[:16])
    session.plan_and_merge(0.6, strategy="mean")   # merges both groups
    for t in probe_ids[16:20]:
        session.decode(int(t))
    group0 = list(fact.layout.layers_of(0))
    assert session.store.suffixes[group0[0]].tobytes() \
        != session.store.suffixes[group0[1]].tobytes()


def test_zero_fisher_fallback_recorded_in_plan(fact07, probe_ids):
    from commonkv.budget import FisherWeights
    weights, fact, _ = fact07
    session = LatentSession(weights, fact)
    session.prefill(probe_ids[:16])
    plan = allocate_budget(session.group_scores(), 0.5, fact.layout, fact.rank,
                           weights.config, strategy="fisher")
    session.apply_plan(plan, FisherWeights(per_layer=[0.0] * 8, corpus_digest="none"))
    assert plan.warnings and "fell back to mean" in plan.warnings[0]
    assert all(w == 0.25 for ws in plan.merge_weights.values() for w in ws)


def test_session_rejects_mismatched_factorization(fact07):
    from commonkv.model import ModelConfig, gen_toy_model
    _, fact, _ = fact07
    other = gen_toy_model(ModelConfig(n_layers=4), 1)
    with pytest.raises(InputError):
        LatentSession(other, fact)


def test_prefill_rejected_after_merge(fact07, probe_ids):
    weights, fact, _ = fact07
    session = LatentSession(weights, fact)
    session.prefill(probe_ids[:8])
    session.plan_and_merge(0.0, strategy="mean")
    with pytest.raises(InputError):
        session.prefill(probe_ids[8:12])


# -- audit ----------------------------------------------------------------------

def test_audit_counts_by_part(fact07, probe_ids):
    weights, fact, _ = fact07
    cfg = weights.config
    session = LatentSession(weights, fact)
    session.prefill(probe_ids[:100])
    plan = session.plan_and_merge(0.6, strategy="mean")  # both groups merged
    assert plan.merged_count == 2
    audit = session.audit()
    assert audit.prefix_elements == 2 * fact.rank * 100 == 9000
    for t in probe_ids[100:104]:
        session.decode(int(t))
    audit = session.audit()
    assert audit.suffix_elements == cfg.n_layers * fact.rank * 4
    assert audit.total_elements == audit.prefix_elements + audit.suffix_elements


def test_audit_unmerged_counts(fact07, probe_ids):
    weights, fact, _ = fact07
    session = LatentSession(weights, fact)
    session.prefill(probe_ids[:100])
    audit = session.audit()
    assert audit.prefix_elements == 8 * fact.rank * 100 == 36000


def test_audit_equals_dump_payload(fact07, probe_ids):
    weights, fact, _ = fact07
    session = LatentSession(weights, fact)
    session.prefill(probe_ids[:20])
    session.plan_and_merge(0.3, strategy="mean")
    for t in probe_ids[20:24]:
        session.decode(int(t))
    blob = session.store.debug_dump()
    assert tensorfile.payload_nbytes(blob) == 4 * session.audit().total_elements


def test_baseline_elements_formula(toy_cfg):
    assert baseline_elements(toy_cfg, 10) == 8 * 2 * 32 * 10


# -- immutability and shared tables ----------------------------------------------

def test_merged_prefix_immutable_through_decode(fact07, probe_ids):
    weights, fact, _ = fact07
    session = LatentSession(weights, fact)
    session.prefill(probe_ids[:32])
    session.plan_and_merge(0.5, strategy="mean")
    before = session.store.merged_prefix_checksums()
    for t in probe_ids[32:48]:
        session.decode(int(t))
    assert session.store.merged_prefix_checksums() == before
    session.store.verify_merged_prefixes()
    # sabotage is detected
    gi = next(iter(before))
    session.store.groups[gi].shared_prefix[0, 0] += 1.0
    with pytest.raises(NumericError):
        session.store.verify_merged_prefixes()


def test_rope_values_shared_across_layers(fact07):
    weights, fact, _ = fact07
    session = LatentSession(weights, fact)
    # every layer reads the same table values for a given decode position
    tables = [session.rope for _ in range(weights.config.n_layers)]
    pos = 17
    rows = {(t.cos[pos].tobytes(), t.sin[pos].tobytes()) for t in tables}
    assert len(rows) == 1
