import numpy as np
import pytest

from edgetrain.builders import (CctConfig, ConfigError, DeepAeConfig, build_cct, build_deep_ae, build_toy_mlp,
                                cct_block_param_count, tiny_cct_config)
from edgetrain.interp import run_forward
from edgetrain.ir import serialize_graph
from edgetrain.perf import graph_flops


def test_cct_parameter_budget():
    g = build_cct()
    assert abs(g.param_bytes() - 1.12e6) / 1.12e6 < 0.02
    per_block = sum(t.numel for t in g.params() if t.name.startswith("blocks.0."))
    assert per_block == cct_block_param_count(128, 128)
    # 128*384 + 384 + 128*128 + 128 + 2 * (128*128 + 128) + 4 * 128
    assert per_block == 99_584


def test_cct_structure():
    g = build_cct()
    ops = [n.op for n in g.nodes]
    assert ops.count("Conv2D") == 2 and ops.count("LayerNorm") == 5 and ops.count("GeLU") == 2
    assert g.tensors["head"].shape == (1, 10)
    assert CctConfig().tokens == 64


def test_cct_forward_flops_near_published_inference_cost():
    g = build_cct()
    fwd = [n for n in g.nodes if n.op != "CrossEntropyLoss"]
    assert abs(graph_flops(g, fwd) / 1e6 - 67) / 67 < 0.2


def test_builders_are_deterministic_in_the_seed():
    assert serialize_graph(build_cct(tiny_cct_config(seed=5))) == serialize_graph(build_cct(tiny_cct_config(seed=5)))
    assert serialize_graph(build_cct(tiny_cct_config(seed=5))) != serialize_graph(build_cct(tiny_cct_config(seed=6)))


def test_deep_ae_budget():
    g = build_deep_ae()
    assert abs(g.param_count() - 270_000) / 270_000 < 0.02
    macs = sum(np.prod(g.tensors[n.inputs[1]].shape) for n in g.nodes if n.op == "Gemm")
    assert macs == sum(a * b for a, b in zip(DeepAeConfig().widths, DeepAeConfig().widths[1:]))
    assert g.tensors["fc9"].shape == (1, 640)


def test_tiny_configs_run():
    g = build_cct(tiny_cct_config())
    x = np.random.default_rng(0).standard_normal((1, 2, 8, 8)).astype(np.float32)
    assert run_forward(g, {"image": x, "labels": np.eye(3)[[0]]})["head"].shape == (1, 3)
    assert build_toy_mlp([3, 5, 2], batch=4).tensors["fc1"].shape == (4, 2)


@pytest.mark.parametrize("cfg", [dict(embed_dim=130, heads=4, conv_channels=(64, 130)), dict(conv_channels=(64, 96)),
                                 dict(blocks=0)])
def test_bad_cct_config(cfg):
    with pytest.raises(ConfigError):
        build_cct(CctConfig(**cfg))


def test_bad_widths():
    with pytest.raises(ConfigError):
        build_deep_ae(DeepAeConfig(widths=(8, 4, 6)))
    with pytest.raises(ConfigError):
        build_toy_mlp([4])
