import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmprune import DecodeCache, ModelConfig, init_model, model_forward
from ssmprune.activity import ActivityScores, activity_scores, collect_activity, synthetic_sequences
from ssmprune.errors import FormatError, PlanError
from ssmprune.pruning import (
    LayerPlan,
    PruningPlan,
    apply_optimized,
    apply_sparse,
    kept_count,
    make_bridge,
    plan_from_activity,
    select_heads,
    select_states,
)

RATIOS = [0.1, 0.3, 0.5, 0.7, 0.9]


def sort_oracle(scores, r):
    k = math.floor(len(scores) * (1 - Fraction(str(r))))
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:k])


@settings(max_examples=300, deadline=None)
@given(
    scores=st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0, 2.0]) | st.floats(0, 10), min_size=1, max_size=40),
    r=st.sampled_from([0.0, 0.1, 0.25, 0.3, 0.5, 0.7, 0.9, 0.95]),
)
def test_select_states_matches_sort_oracle(scores, r):
    k = math.floor(len(scores) * (1 - Fraction(str(r))))
    if k == 0:
        with pytest.raises(PlanError, match="too aggressive"):
            select_states(scores, r)
        return
    keep = select_states(scores, r)
    assert keep.tolist() == sort_oracle(scores, r)
    assert len(keep) == k


def test_kept_count_reads_ratio_as_decimal():
    assert kept_count(10, 0.9) == 1
    assert kept_count(10, 0.7) == 3
    assert kept_count(128, 0.9) == 12
    assert kept_count(16, 0) == 16
    with pytest.raises(PlanError):
        kept_count(16, 1.0)
    with pytest.raises(PlanError):
        kept_count(16, -0.1)


def test_ties_prefer_lower_index():
    assert select_states([1.0, 1.0, 1.0, 1.0], 0.5).tolist() == [0, 1]
    assert select_states([0.0, 2.0, 2.0, 1.0], 0.5).tolist() == [1, 2]


def test_select_states_rejects_bad_scores():
    with pytest.raises(PlanError):
        select_states([1.0, np.nan], 0.5)


def test_bridge_structure():
    b = make_bridge([0, 3, 5], 6)
    assert b.shape == (6, 3)
    assert (b.sum(axis=0) == 1).all() and set(np.unique(b)) == {0.0, 1.0}
    np.testing.assert_array_equal(make_bridge(range(4), 4), np.eye(4))
    with pytest.raises(PlanError):
        make_bridge([1, 1], 4)


def test_select_heads_keeps_whole_groups():
    keep = select_heads([0.5, 0.1, 0.9, 0.3], 0.5, head_size=3)
    assert keep.tolist() == [0, 1, 2, 6, 7, 8]


def scored_model(variant="mamba2", n=10, heads=2, layers=3, D=6, seed=0):
    cfg = ModelConfig(variant=variant, d_model=D, d_state=n, n_layers=layers,
                      n_heads=heads if variant == "mamba2" else 1)
    model = init_model(cfg, seed=seed)
    rec = collect_activity(model, synthetic_sequences(D, 3, 12, seed=seed))
    return model, activity_scores(rec, n_heads=cfg.n_heads if variant == "mamba2" else None)


@pytest.mark.parametrize("variant", ["mamba1", "mamba2"])
@pytest.mark.parametrize("r", RATIOS)
def test_sparse_and_optimized_agree(variant, r):
    model, scores = scored_model(variant)
    plan = plan_from_activity(scores, r)
    x = np.random.default_rng(5).standard_normal((2, 11, 6))
    ys, _ = model_forward(x, apply_sparse(model, plan))
    yo, _ = model_forward(x, apply_optimized(model, plan))
    ye, _ = model_forward(x, apply_optimized(model, plan, fold_bridge=False))
    np.testing.assert_allclose(yo, ys, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(ye, ys, rtol=1e-10, atol=1e-10)


def test_sparse_decode_cache_has_full_width_and_optimized_has_k():
    model, scores = scored_model()
    plan = plan_from_activity(scores, 0.5)
    sp, op = apply_sparse(model, plan), apply_optimized(model, plan)
    assert DecodeCache.zeros(sp, 1).h[0].shape[-1] == 10
    assert DecodeCache.zeros(op, 1).h[0].shape[-1] == 5
    x = np.random.default_rng(0).standard_normal((1, 6, 6))
    _, cs = model_forward(x[:, :5], sp)
    _, co = model_forward(x[:, :5], op)
    ys, _ = model_forward(x[:, 5:], sp, "decode", cs)
    yo, _ = model_forward(x[:, 5:], op, "decode", co)
    np.testing.assert_allclose(yo, ys, rtol=1e-10, atol=1e-10)
    # pruned states of the sparse cache stay exactly zero
    assert not cs.h[0][..., list(plan.layers[0].pruned)].any()


@pytest.mark.parametrize("variant", ["mamba1", "mamba2"])
def test_ratio_zero_is_bit_identical(variant):
    model, scores = scored_model(variant)
    plan = plan_from_activity(scores, 0.0)
    assert plan.is_identity
    x = np.random.default_rng(2).standard_normal((1, 9, 6))
    dense, _ = model_forward(x, model)
    for pruned in (apply_sparse(model, plan), apply_optimized(model, plan)):
        out, _ = model_forward(x, pruned)
        np.testing.assert_array_equal(out, dense)


def test_per_head_mode():
    model, scores = scored_model(n=12, heads=4)
    plan = plan_from_activity(scores, 0.5, "per-head", n_heads=4, variant="mamba2")
    for lp in plan.layers:
        groups = {s // 3 for s in lp.keep}
        assert len(lp.keep) == 6 and len(groups) == 2
    mamba1, s1 = scored_model("mamba1")
    with pytest.raises(PlanError):
        plan_from_activity(s1, 0.5, "per-head", n_heads=1, variant="mamba1")


def test_per_layer_ratio_override():
    _, scores = scored_model()
    plan = plan_from_activity(scores, 0.5, layer_ratios={1: 0.9})
    assert [len(lp.keep) for lp in plan.layers] == [5, 1, 5]


def test_missing_layer_scores():
    sc = ActivityScores({0: np.ones(4), 2: np.ones(4)}, {0: 1, 2: 1})
    with pytest.raises(PlanError, match=r"\[1\]"):
        plan_from_activity(sc, 0.5)


def test_plan_round_trip_and_validation(tmp_path):
    _, scores = scored_model()
    plan = plan_from_activity(scores, 0.3)
    plan.save(tmp_path / "p.json")
    assert PruningPlan.load(tmp_path / "p.json") == plan
    assert plan.provenance["activity_digest"] == scores.digest()
    bad = plan.to_dict()
    bad["layers"][0]["keep"] = [3, 1]
    with pytest.raises(FormatError):
        PruningPlan.from_dict(bad)
    with pytest.raises(FormatError):
        PruningPlan.from_dict({**plan.to_dict(), "format": "other"})


def test_plan_model_mismatch():
    model, _ = scored_model()
    with pytest.raises(PlanError):
        apply_sparse(model, PruningPlan(0.5, [LayerPlan(10, (0, 1))]))
    with pytest.raises(PlanError):
        apply_optimized(model, PruningPlan(0.5, [LayerPlan(8, (0,))] * 3))


def test_optimized_shapes_and_metadata():
    model, scores = scored_model()
    plan = plan_from_activity(scores, 0.7)
    op = apply_optimized(model, plan)
    d = model.config.d_inner
    for lp, layer in zip(plan.layers, op.layers):
        assert layer.w_in.shape == (2 * d + 3 * 3, 6)
        np.testing.assert_array_equal(layer.a_diag, model.layers[0].a_diag[list(lp.keep)])
    assert op.metadata["pruning"]["keep"] == [list(lp.keep) for lp in plan.layers]
    with pytest.raises(PlanError, match="already pruned"):
        apply_sparse(apply_sparse(model, plan), plan)
