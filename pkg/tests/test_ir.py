import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgetrain.builders import GraphBuilder, build_cct, build_single_gemm
from edgetrain.ir import (CycleError, Graph, NodeSpec, ParseError, TensorSpec, ValidationError, check_node_signature,
                          infer_shapes, node_output_shapes, parse_graph, serialize_graph, structurally_equal, topo_schedule)
from graphgen import random_graph


def roundtrip(g):
    return parse_graph(*serialize_graph(g))


def test_single_gemm_document():
    g = roundtrip(build_single_gemm(np.eye(2), (2, 1)))
    assert len(g.nodes) == 1 and len(g.tensors) == 3
    assert g.tensors["gemm"].shape == (2, 1)


def test_missing_initializer_is_reported():
    text, blob = serialize_graph(build_single_gemm(np.eye(2), (2, 1)))
    doc = json.loads(text)
    doc["initializers"]["Wq"] = {"offset": 0, "length": 16}
    with pytest.raises(ValidationError, match="unresolved initializer"):
        parse_graph(json.dumps(doc), blob)


def test_short_blob_is_reported():
    text, blob = serialize_graph(build_single_gemm(np.eye(2), (2, 1)))
    with pytest.raises(ValidationError, match="unresolved initializer"):
        parse_graph(text, blob[:-4])


def test_schema_violation_names_path():
    text, blob = serialize_graph(build_single_gemm(np.eye(2), (2, 1)))
    doc = json.loads(text)
    doc["nodes"][0]["op"] = 7
    with pytest.raises(ParseError) as e:
        parse_graph(json.dumps(doc), blob)
    assert "nodes" in e.value.path
    with pytest.raises(ParseError):
        parse_graph("{not json", b"")


def test_cct_parameter_bytes():
    g = build_cct()
    assert abs(g.param_bytes() / 1e6 - 1.12) / 1.12 < 0.02
    assert structurally_equal(roundtrip(g), g)


@pytest.mark.parametrize("op,attrs,shapes,expect", [
    ("Gemm", {"transA": 0, "transB": 0}, [(3, 4), (4, 5)], (3, 5)),
    ("Gemm", {"transA": 1, "transB": 1}, [(4, 3), (5, 4)], (3, 5)),
    ("Conv2D", {"kernel": 3, "stride": 1, "padding": 1}, [(1, 3, 32, 32), (64, 3, 3, 3)], (1, 64, 32, 32)),
    ("Softmax", {"axis": -1}, [(2, 64, 64)], (2, 64, 64)),
    ("MaxPool2D", {"kernel": 3, "stride": 2, "padding": 1}, [(1, 8, 32, 32)], (1, 8, 16, 16)),
    ("Transpose", {"perm": [1, 0, 2]}, [(4, 2, 8)], (2, 4, 8)),
])
def test_shape_rules(op, attrs, shapes, expect):
    ins = tuple(f"i{k}" for k in range(len(shapes)))
    assert node_output_shapes(NodeSpec("n", op, ins, ("y",), attrs), shapes) == [expect]


def test_gemm_mismatch_names_node_and_dims():
    with pytest.raises(ValidationError) as e:
        node_output_shapes(NodeSpec("mm", "Gemm", ("a", "b"), ("y",), {"transA": 0, "transB": 0}), [(3, 4), (5, 2)])
    assert e.value.node == "mm" and "4" in str(e.value) and "5" in str(e.value)


def test_attribute_set_must_match():
    with pytest.raises(ValidationError):
        check_node_signature(NodeSpec("r", "ReLU", ("x",), ("y",), {"alpha": 1}))
    with pytest.raises(ValidationError):
        check_node_signature(NodeSpec("s", "Scale", ("x",), ("y",)))
    with pytest.raises(ValidationError):
        check_node_signature(NodeSpec("a", "Add", ("x",), ("y",)))


def test_infer_shapes_idempotent():
    g = build_cct()
    once = infer_shapes(g)
    assert structurally_equal(infer_shapes(once), once)


def _chain_with_cycle():
    t = {n: TensorSpec(n, (2, 2)) for n in ("x", "a", "b")}
    t["x"] = TensorSpec("x", (2, 2), kind="input")
    nodes = [NodeSpec("p", "Add", ("x", "b"), ("a",)), NodeSpec("q", "ReLU", ("a",), ("b",))]
    return Graph(t, nodes, ["x"], ["b"])


def test_cycle_is_listed():
    with pytest.raises(CycleError) as e:
        topo_schedule(_chain_with_cycle())
    assert set(e.value.cycle) == {"p", "q"}


def test_topo_ties_break_by_name():
    b = GraphBuilder()
    x = b.input("x", (2, 2))
    for name in ("zeta", "alpha", "mid"):
        b.op("ReLU", [x], name)
    g = b.build(["zeta", "alpha", "mid"])
    assert [n.name for n in topo_schedule(g)] == ["alpha", "mid", "zeta"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_random_graph_roundtrip_and_schedule(seed):
    g, _ = random_graph(seed)
    text, blob = serialize_graph(g)
    h = parse_graph(text, blob)
    assert serialize_graph(h) == (text, blob)
    order = {n.name: i for i, n in enumerate(topo_schedule(h))}
    prod = h.producers()
    for n in h.nodes:
        for t in n.inputs:
            if t in prod:
                assert order[prod[t].name] < order[n.name]
    assert [n.name for n in topo_schedule(h)] == [n.name for n in topo_schedule(g)]


@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.sampled_from(["FP32", "FP64"]))
def test_byte_size(shape, dtype):
    t = TensorSpec("t", tuple(shape), dtype)
    assert t.byte_size == int(np.prod(shape)) * (4 if dtype == "FP32" else 8)
