import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgetrain.autodiff import build_training_graph
from edgetrain.builders import GraphBuilder, build_cct, build_toy_mlp, tiny_cct_config
from edgetrain.interp import run_forward
from edgetrain.peft import (PRESETS, StrategyConfig, StrategyError, apply_lora, apply_strategy, load_strategy,
                            preset, strategy_flops, trainable_bytes)


@pytest.fixture(scope="module")
def cct():
    return build_cct()


def linear_graph(d, k, transpose_weight=True):
    b = GraphBuilder()
    x = b.input("x", (1, k))
    w = b.param("lin.weight", np.ones((d, k)) if transpose_weight else np.ones((k, d)))
    y = b.op("Gemm", [x, w], "lin", {"transA": 0, "transB": int(transpose_weight)})
    return b.build([y])


def test_rank_formula_examples():
    g, (ad,) = apply_lora(linear_graph(128, 128), ["lin"])
    assert ad.trainable_params == 1024
    assert sum(t.numel for t in g.trainable()) == 1024
    _, (ad,) = apply_lora(linear_graph(384, 128), ["lin"])
    assert ad.trainable_params == 2048


def test_lora_errors():
    g = build_toy_mlp([8, 8, 2])
    with pytest.raises(StrategyError):
        apply_lora(g, ["act0"])
    with pytest.raises(StrategyError):
        apply_lora(g, ["fc0"], r=5)
    with pytest.raises(StrategyError):
        apply_lora(g, ["nope"])
    g2, _ = apply_lora(g, ["fc0"])
    with pytest.raises(StrategyError):
        apply_lora(g2, ["fc0"])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(2, 12), min_size=2, max_size=5), st.data())
def test_lora_transparency_and_param_formula(widths, data):
    g = build_toy_mlp(widths, seed=len(widths))
    gemms = [n for n in g.nodes if n.op == "Gemm" and min(g.tensors[n.inputs[1]].shape) >= 2]
    if not gemms:
        return
    targets = data.draw(st.lists(st.sampled_from([n.name for n in gemms]), min_size=1, unique=True))
    r = data.draw(st.integers(1, min(min(g.tensors[g.node(t).inputs[1]].shape) for t in targets) // 2))
    before = trainable_bytes(g)
    h, ads = apply_lora(g, targets, r, seed=3)
    frozen = sum(g.tensors[a.weight].byte_size for a in ads)
    assert trainable_bytes(h) - before + frozen == 4 * sum(r * (a.d + a.k) for a in ads)
    x = np.random.default_rng(0).standard_normal((1, widths[0])).astype(np.float32)
    batch = {"x": x, "labels": np.eye(widths[-1])[[0]]}
    a, b = run_forward(g, batch), run_forward(h, batch)
    assert all(np.array_equal(a[t], b[t]) for t in g.outputs)


def test_lora_1_exact_count(cct):
    g = apply_strategy(cct, preset("LoRA-1"))
    assert sum(t.numel for t in g.trainable()) == 6410
    assert trainable_bytes(g) == 25_640
    names = {t.name for t in g.trainable()}
    assert names == {"head.weight", "head.bias"} | {f"blocks.1.{layer}.lora_{m}" for layer in
                                                    ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2") for m in "AB"}


def test_preset_configurations(cct):
    lp = apply_strategy(cct, preset("LP"))
    assert {t.name for t in lp.trainable()} == {"head.weight", "head.bias"}
    ft2 = apply_strategy(cct, preset("FT-2"))
    assert not any(t.name.startswith("tokenizer.") for t in ft2.trainable())
    full = apply_strategy(cct, preset("Full-FT"))
    assert trainable_bytes(full) == cct.param_bytes()
    assert trainable_bytes(cct.with_trainable([t.name for t in cct.params()], False)) == 0
    ft1 = apply_strategy(cct, preset("FT-1"))
    assert all(not t.name.startswith("blocks.0.") for t in ft1.trainable())


def test_adapted_weights_are_frozen_without_bias_terms(cct):
    g = apply_strategy(cct, preset("LoRA-2"))
    for i in range(2):
        for layer in ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"):
            assert not g.tensors[f"blocks.{i}.{layer}.weight"].trainable
            assert not g.tensors[f"blocks.{i}.{layer}.bias"].trainable
            assert f"blocks.{i}.{layer}.lora_bias" not in g.tensors
            assert not np.any(g.initializers[f"blocks.{i}.{layer}.lora_B"])


def test_flop_monotonicity(cct):
    base = cct
    flops = [strategy_flops(build_training_graph(apply_strategy(base, preset(p))))
             for p in ("LP", "LoRA-1", "FT-1", "LoRA-2", "FT-2", "Full-FT")]
    assert flops == sorted(flops) and len(set(flops)) == len(flops)


def test_empty_graph_costs_nothing():
    from edgetrain.autodiff import TrainingGraph
    b = GraphBuilder()
    b.input("x", (1, 1))
    g = b.build(["x"])
    assert strategy_flops(TrainingGraph(g, 0, 0, 0, {})) == 0


def test_strategy_lookup(tmp_path):
    assert load_strategy("lora-2").name == "LoRA-2"
    assert [preset(p).name for p in PRESETS] == list(PRESETS)
    f = tmp_path / "s.json"
    f.write_text(json.dumps({"name": "mine", "blocks": {"1": "lora:2"}, "head": True}))
    s = load_strategy(str(f))
    assert s.blocks == {1: "lora:2"}
    g = apply_strategy(build_cct(tiny_cct_config()), s)
    assert g.tensors["blocks.1.attn.qkv.lora_A"].shape[0] == 2
    with pytest.raises(StrategyError):
        load_strategy("FT-9")
    with pytest.raises(StrategyError):
        StrategyConfig.from_dict({"blocks": {}, "colour": 1})
    with pytest.raises(StrategyError):
        apply_strategy(build_cct(tiny_cct_config()), StrategyConfig(blocks={7: "full"}))
    with pytest.raises(StrategyError):
        StrategyConfig(blocks={0: "half"})
