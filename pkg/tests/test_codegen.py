import json

import numpy as np
import pytest

from edgetrain.autodiff import TrainConfig, build_training_graph
from edgetrain.builders import GraphBuilder, build_cct, build_toy_mlp, tiny_cct_config
from edgetrain.codegen import EmitError, build, emit, emit_build_run, rel_diff, run
from edgetrain.interp import run_training_step
from edgetrain.memplan import AllocationPlan, MemHierarchy, plan_training_graph

pytestmark = pytest.mark.slow


def _planned(g, policy="l2-first", hier=MemHierarchy(), **cfg):
    tg = build_training_graph(g, TrainConfig(**cfg))
    return (tg, *plan_training_graph(tg, hier, policy=policy))


def _mlp_batch(widths, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return {"x": rng.standard_normal((1, widths[0])).astype(dtype), "labels": np.eye(widths[-1])[[1]].astype(dtype)}


def test_single_gemm_weight_gradient_matches_hand_value():
    b = GraphBuilder("FP64")
    w = b.param("W", [[1.0, 2.0], [3.0, 4.0]])
    x = b.input("X", (2, 1))
    y = b.op("Gemm", [w, x], "y", {"transA": 0, "transB": 0})
    loss = b.op("MseLoss", [y, b.input("T", (2, 1))], "loss")
    g = b.build([loss], loss)
    tg, plan, tiles, _ = _planned(g, loss="mse", learning_rate=0.0)
    batch = {"X": np.array([[1.0], [2.0]]), "T": np.array([[4.0], [10.0]])}
    out, exp = emit_build_run(tg, plan, tiles, batch)
    # upstream gradient is all ones, so dW = 1 x^T with entries 1, 2, 1, 2
    assert out["grads"]["W"] == 6.0 == exp["grads"]["W"]
    assert out["loss"] == exp["loss"]


def test_missing_tensor_is_rejected():
    tg, plan, tiles, _ = _planned(build_toy_mlp([4, 3], dtype="FP64"))
    cut = AllocationPlan({k: v for k, v in plan.placements.items() if k != "fc0"}, plan.peaks, plan.hierarchy)
    with pytest.raises(EmitError, match="fc0"):
        emit(tg, cut, tiles, _mlp_batch([4, 3]))
    with pytest.raises(EmitError, match="batch"):
        emit(tg, plan, tiles, None)
    with pytest.raises(EmitError, match="labels"):
        emit(tg, plan, tiles, {"x": np.zeros((1, 4))})


@pytest.mark.parametrize("policy", ["l2-first", "l3-home"])
def test_tiled_and_untiled_programs_agree_with_interpreter(policy, tmp_path):
    widths = [24, 40, 40, 6]
    small = MemHierarchy(l1=1024, l2=1 << 20, l3=1 << 24)
    tg, plan, tiles, _ = _planned(build_toy_mlp(widths, dtype="FP64"), policy, small)
    assert any(t.tile_count > 1 for t in tiles.values())
    batch = _mlp_batch(widths)
    tiled, exp = emit_build_run(tg, plan, tiles, batch, out_dir=tmp_path / "t")
    flat, _ = emit_build_run(tg, plan, {}, batch, out_dir=tmp_path / "u")
    for res in (tiled, flat):
        assert rel_diff(res["loss"], exp["loss"]) < 1e-12
        assert rel_diff(res["grad_checksum"], exp["grad_checksum"]) < 1e-12
    manifest = json.loads((tmp_path / "t" / "build.json").read_text())
    assert manifest["tiled_nodes"] and not json.loads((tmp_path / "u" / "build.json").read_text())["tiled_nodes"]


def test_fp32_program_is_bit_exact():
    widths = [16, 32, 32, 4]
    tg, plan, tiles, _ = _planned(build_toy_mlp(widths))
    batch = _mlp_batch(widths, dtype=np.float32)
    out, exp = emit_build_run(tg, plan, tiles, batch)
    assert out["loss"] == exp["loss"] and out["grad_checksum"] == exp["grad_checksum"]


def test_dma_counts_equal_the_transfer_ledger(tmp_path):
    g = build_cct(tiny_cct_config(dtype="FP64"))
    tg, plan, tiles, ledger = _planned(g, "l3-home")
    rng = np.random.default_rng(2)
    batch = {"image": rng.standard_normal((1, 2, 8, 8)), "labels": np.eye(3)[[0]]}
    out, exp = emit_build_run(tg, plan, tiles, batch, out_dir=tmp_path)
    totals = ledger.totals()
    assert out["dma_l3_to_l2"] == totals.get("L3->L2", 0) > 0
    assert out["dma_l2_to_l3"] == totals.get("L2->L3", 0) > 0
    assert rel_diff(out["loss"], exp["loss"]) < 1e-12


def test_bounds_profile_runs_clean(tmp_path):
    g = build_cct(tiny_cct_config(dtype="FP64"))
    tg, plan, tiles, _ = _planned(g, "l3-home", MemHierarchy(l1=2048, l2=1 << 20, l3=1 << 24))
    rng = np.random.default_rng(3)
    batch = {"image": rng.standard_normal((1, 2, 8, 8)), "labels": np.eye(3)[[2]]}
    out, exp = emit_build_run(tg, plan, tiles, batch, profile="bounds", out_dir=tmp_path)
    assert rel_diff(out["grad_checksum"], exp["grad_checksum"]) < 1e-12


def test_program_reads_a_fresh_fixture(tmp_path):
    widths = [5, 7, 3]
    g = build_toy_mlp(widths, dtype="FP64")
    tg, plan, tiles, _ = _planned(g)
    prog = emit(tg, plan, tiles, _mlp_batch(widths, 0))
    binary = build(prog.write(tmp_path / "a"))
    other = emit(tg, plan, tiles, _mlp_batch(widths, 9))
    other.write(tmp_path / "b")
    res = run(binary, tmp_path / "b" / "fixture.bin")
    ref = run_training_step(tg, _mlp_batch(widths, 9))
    assert rel_diff(res["loss"], ref.loss) < 1e-12
    (tmp_path / "bad.bin").write_bytes(b"\0" * 7)
    with pytest.raises(Exception):
        run(binary, tmp_path / "bad.bin")
