import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgetrain.autodiff import TrainConfig, build_training_graph
from edgetrain.builders import build_cct, build_toy_mlp, tiny_cct_config
from edgetrain.memplan import (AllocationPlan, CapacityError, LiveInterval, MemHierarchy, PlanError, TilePlan,
                               _search_tiles, allocate, dynamic_peak, liveness, max_live_bytes, optimal_peak, pack,
                               peak_report, plan_training_graph, plan_to_json, tile_gemm)
from edgetrain.peft import apply_strategy, preset

intervals = st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(1, 6)), min_size=0, max_size=6).map(
    lambda xs: [LiveInterval(f"t{i}", min(a, b), max(a, b), 4 * s) for i, (a, b, s) in enumerate(xs)])


def brute_force_peak(ivs):
    """Exhaustive search over offsets in multiples of 4 bytes."""
    if not ivs:
        return 0
    cap = sum(iv.bytes for iv in ivs)
    best = cap
    for offs in itertools.product(range(0, cap, 4), repeat=len(ivs)):
        ok = all(not (a.overlaps(b) and oa < ob + b.bytes and ob < oa + a.bytes)
                 for (a, oa), (b, ob) in itertools.combinations(zip(ivs, offs), 2))
        if ok:
            best = min(best, max(o + iv.bytes for iv, o in zip(ivs, offs)))
    return best


def test_three_interval_example():
    ivs = [LiveInterval("a", 0, 1, 4), LiveInterval("b", 1, 2, 4), LiveInterval("c", 2, 3, 4)]
    offsets, peak = pack(ivs)
    assert peak == 8 == brute_force_peak(ivs) == optimal_peak(ivs)
    assert offsets["a"] == offsets["c"]


def test_empty_plan():
    plan = allocate([])
    assert plan.peaks == {"L1": 0, "L2": 0, "L3": 0}
    assert optimal_peak([]) == 0


@settings(max_examples=60, deadline=None)
@given(intervals.filter(lambda v: len(v) <= 4))
def test_oracle_matches_brute_force(ivs):
    assert optimal_peak(ivs) == brute_force_peak(ivs)


@settings(max_examples=200, deadline=None)
@given(intervals)
def test_pack_is_safe_and_bounded(ivs):
    offsets, peak = pack(ivs)
    for a, b in itertools.combinations(ivs, 2):
        if a.overlaps(b):
            oa, ob = offsets[a.tensor], offsets[b.tensor]
            assert oa + a.bytes <= ob or ob + b.bytes <= oa
    lower = max_live_bytes(ivs)
    assert lower <= optimal_peak(ivs) <= peak <= 2 * lower


def _graph_plan(policy="l2-first", hier=MemHierarchy()):
    tg = build_training_graph(build_toy_mlp([16, 32, 8], dtype="FP32"))
    return tg, *plan_training_graph(tg, hier, policy=policy)


def test_liveness_rules():
    tg = build_training_graph(build_toy_mlp([4, 8, 3]))
    ivs = {iv.tensor: iv for iv in liveness(tg)}
    end = len(tg.schedule) - 1
    assert ivs["fc0.weight"].first_def == 0 and ivs["fc0.weight"].last_use == end
    pos = {n.name: i for i, n in enumerate(tg.schedule)}
    # act0 is read by fc1 in forward and by ReLUGrad / the fc1 weight gradient in backward
    readers = [pos[n.name] for n in tg.schedule if "act0" in n.inputs]
    assert ivs["act0"].first_def == pos["act0"] and ivs["act0"].last_use == max(readers) > pos["fc1"]
    for p, gname in tg.grads.items():
        upd = pos[f"sgd:{p}"]
        assert ivs[gname].last_use == upd


def test_lora_gradients_only_for_adapters():
    g = apply_strategy(build_cct(tiny_cct_config()), preset("LoRA-1"))
    tg = build_training_graph(g)
    grads = {iv.tensor for iv in liveness(tg) if iv.kind == "gradient"}
    weight_grads = {tg.graph.tensors[t].grad_of for t in grads
                    if tg.graph.tensors[tg.graph.tensors[t].grad_of].kind in ("weight", "bias")}
    assert weight_grads == {t.name for t in g.trainable()}


def test_everything_in_l2_moves_nothing_off_chip():
    tg, plan, tiles, ledger = _graph_plan()
    plan.check()
    assert ledger.total("L3", "L2") == 0 and not plan.spilled


def test_l3_resident_activation_is_written_once_and_read_per_consumer():
    tg, plan, tiles, ledger = _graph_plan("l3-home")
    readers = sum("act0" in n.inputs for n in tg.schedule)
    moved = sum(r.bytes for r in ledger.rows if r.tensor == "act0" and "L3" in (r.src, r.dst))
    assert readers >= 2 and moved == (1 + readers) * tg.graph.tensors["act0"].byte_size
    assert ledger.total("L3", "L2") == sum(r.bytes for r in ledger.rows if "L3" in (r.src, r.dst))


def test_spill_under_small_l2():
    tg = build_training_graph(build_toy_mlp([64, 64, 64, 4]))
    small = MemHierarchy(l1=1024, l2=20_000, l3=1 << 20)
    plan, tiles, ledger = plan_training_graph(tg, small)
    plan.check()
    assert plan.spilled and plan.peaks["L2"] <= small.l2 and ledger.total("L3", "L2") > 0
    with pytest.raises(CapacityError):
        plan_training_graph(tg, MemHierarchy(l1=64, l2=128, l3=4096))


def test_plan_rejects_overlap():
    ivs = [LiveInterval("a", 0, 3, 8), LiveInterval("b", 1, 2, 8)]
    plan = allocate(ivs)
    bad = AllocationPlan({k: type(p)(p.level, 0, p.interval) for k, p in plan.placements.items()},
                         plan.peaks, plan.hierarchy)
    with pytest.raises(PlanError):
        bad.check()


def test_peak_report_single_activation():
    assert dynamic_peak([LiveInterval("x", 0, 1, 100)]) == 100
    assert dynamic_peak([LiveInterval("w", 0, 1, 100, "weight")]) == 0
    plan = allocate([LiveInterval("x", 0, 1, 100), LiveInterval("w", 0, 1, 40, "weight")])
    rep = peak_report(plan)
    assert rep["dynamic_peak"] == 100 and rep["static_bytes"] == 40


def test_plan_json_roundtrip():
    tg, plan, tiles, ledger = _graph_plan()
    doc = json.loads(plan_to_json(plan, tiles, ledger))
    again = AllocationPlan.from_dict(doc["allocation"])
    assert again.placements == plan.placements and again.peaks == plan.peaks


def gemm_node(m, n, k):
    from edgetrain.builders import GraphBuilder
    b = GraphBuilder()
    a = b.input("a", (m, k))
    w = b.input("b", (k, n))
    b.op("Gemm", [a, w], "mm", {"transA": 0, "transB": 0})
    g = b.build(["mm"])
    return g.node("mm"), g


def test_tile_examples():
    node, g = gemm_node(64, 128, 384)
    tp = tile_gemm(node, g)
    assert tp.tile_bytes <= 65_536 and tp.l1_bytes <= 131_072
    node, g = gemm_node(1, 1, 1)
    tp = tile_gemm(node, g)
    assert tp.tile_count == 1
    with pytest.raises(PlanError):
        _search_tiles("x", 1, 4, 4, 4, 4, 16, False, 2)


def test_tile_coverage_large_gemm():
    tp = _search_tiles("big", 1, 4096, 4096, 4096, 4, 1024, False, 2)
    assert tp.split_k and tp.l1_bytes <= 1024
    im, in_, ik = tp.iterations
    assert im * tp.mt >= 4096 and in_ * tp.nt >= 4096 and ik * tp.kt >= 4096


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.sampled_from([256, 512, 2048, 131072]))
def test_tiles_cover_output_exactly_once(m, n, k, l1):
    tp = _search_tiles("t", 1, m, n, k, 4, l1, False, 2)
    assert tp.l1_bytes <= l1
    hits = np.zeros((m, n, k), dtype=int)
    for m0, m1, n0, n1, k0, k1 in tp.tiles():
        sub = TilePlan("t", 1, m1 - m0, n1 - n0, k1 - k0, m1 - m0, n1 - n0, k1 - k0, 4, 2)
        assert sub.tile_bytes <= tp.tile_bytes
        hits[m0:m1, n0:n1, k0:k1] += 1
    assert np.all(hits == 1)


def test_lora_dominance_on_cct(preset_runs):
    for k in (1, 2):
        ft, lo = preset_runs[f"FT-{k}"], preset_runs[f"LoRA-{k}"]
        assert lo.dynamic_peak <= ft.dynamic_peak
        assert lo.ledger.total("L3", "L2") < ft.ledger.total("L3", "L2")
    assert preset_runs["LoRA-2"].dynamic_peak < preset_runs["FT-2"].dynamic_peak


def test_update_placement_shrinks_gradient_lifetimes():
    g = build_toy_mlp([32, 64, 64, 4])
    end = build_training_graph(g, TrainConfig(update_placement="end"))
    eager = build_training_graph(g, TrainConfig(update_placement="eager"))
    assert dynamic_peak(liveness(eager)) <= dynamic_peak(liveness(end))


def test_unknown_policy_and_alias_errors():
    with pytest.raises(PlanError):
        allocate([], policy="random")
    with pytest.raises(PlanError):
        allocate([LiveInterval("u", 0, 1, 4, alias_of="ghost")])
