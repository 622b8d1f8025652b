import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgetrain.autodiff import TrainConfig, build_training_graph
from edgetrain.builders import GraphBuilder, build_cct, build_single_gemm, build_toy_mlp, tiny_cct_config
from edgetrain.interp import (NumericError, conv2d, conv2d_direct, finite_diff_grad, forward_loss, gemm, im2col,
                              run_forward, run_training_step, seqsum, softmax)
from graphgen import random_graph


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 7), st.sampled_from([1, 2, 3]),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31))
def test_im2col_lowering_matches_direct(c, co, hw, k, s, p, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, c, hw, hw))
    w = rng.standard_normal((co, c, k, k))
    assert np.allclose(conv2d(x, w, k, s, p), conv2d_direct(x, w, k, s, p), rtol=1e-6, atol=1e-9)


def test_im2col_column_order():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    cols = im2col(x, 2, 1, 0)
    assert cols.shape == (1, 4, 4)
    assert cols[0, 0].tolist() == [0, 1, 3, 4]


def test_gemm_accumulates_in_ascending_k():
    a = np.array([[1e8, 1.0, -1e8]], dtype=np.float32)
    b = np.ones((3, 1), dtype=np.float32)
    # left-to-right in FP32: (1e8 + 1) - 1e8 = 0, whereas pairwise would differ
    assert gemm(a, b)[0, 0] == np.float32(0)
    assert seqsum(a)[0] == np.float32(0)


def test_identity_gemm():
    x = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
    g = build_single_gemm(np.eye(4), (4, 3))
    assert np.array_equal(run_forward(g, {"X": x})["gemm"], x)


@given(st.integers(1, 5), st.integers(2, 9), st.integers(0, 2**31))
def test_softmax_rows_normalized(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 10
    assert np.allclose(softmax(x.astype(np.float32), -1).sum(-1), 1, atol=1e-6)


def test_cct_forward_is_finite():
    g = build_cct()
    x = np.random.default_rng(1).standard_normal((1, 3, 32, 32)).astype(np.float32)
    out = run_forward(g, {"image": x, "labels": np.eye(10)[[0]]})
    assert out["head"].shape == (1, 10) and np.all(np.isfinite(out["head"]))


@pytest.mark.filterwarnings("ignore:overflow")
def test_overflow_is_reported_with_node():
    b = GraphBuilder()
    x = b.input("x", (1, 2))
    y = b.op("Scale", [x], "blow", {"factor": 1e30})
    g = b.build([y])
    with pytest.raises(NumericError) as e:
        run_forward(g, {"x": np.full((1, 2), 1e30, np.float32)})
    assert e.value.node == "blow"


def test_zero_lr_keeps_weights_and_forward_loss():
    g = build_toy_mlp([4, 6, 3], seed=2)
    tg = build_training_graph(g)
    batch = {"x": np.ones((1, 4), np.float32), "labels": np.eye(3)[[1]]}
    res = run_training_step(tg, batch, lr=0.0)
    assert all(np.array_equal(res.weights[k], v) for k, v in g.initializers.items())
    assert res.loss == float(forward_loss(g, batch))


def test_hand_computed_gemm_gradient():
    # L = sum((W X - T)^2) / 2 with T = W X - 1 makes the upstream gradient all ones
    b = GraphBuilder("FP64")
    w = b.param("W", [[1.0, 2.0], [3.0, 4.0]])
    x = b.input("X", (2, 1))
    y = b.op("Gemm", [w, x], "y", {"transA": 0, "transB": 0})
    t = b.input("T", (2, 1))
    loss = b.op("MseLoss", [y, t], "loss")
    g = b.build([loss], loss)
    res = run_training_step(build_training_graph(g, TrainConfig(loss="mse")),
                            {"X": np.array([[1.0], [2.0]]), "T": np.array([[4.0], [10.0]])}, lr=0.0)
    assert np.array_equal(res.grads["W"], np.array([[1.0, 2.0], [1.0, 2.0]]))


def test_sgd_example():
    b = GraphBuilder("FP64")
    w = b.param("w", [[1.0, 2.0]])
    x = b.input("x", (2, 1))
    y = b.op("Gemm", [w, x], "y", {"transA": 0, "transB": 0})
    loss = b.op("MseLoss", [y, b.input("t", (1, 1))], "loss")
    g = b.build([loss], loss)
    tg = build_training_graph(g, TrainConfig(learning_rate=0.1, loss="mse"))
    # y = 1 + 2 = 3, t = 2.5: dL/dy = 1, so g = x^T = [1, 1]
    res = run_training_step(tg, {"x": np.ones((2, 1)), "t": np.array([[2.5]])})
    assert np.allclose(res.weights["w"], [[0.9, 1.9]], rtol=0, atol=1e-15)


def test_finite_differences_on_closed_forms():
    b = GraphBuilder("FP64")
    w = b.param("w", [[0.5, -1.0, 2.0]])
    side = b.param("side", [[3.0]])
    x = b.input("x", (3, 1))
    y = b.op("Gemm", [w, x], "y", {"transA": 0, "transB": 0})
    unused = b.op("Scale", [side], "unused", {"factor": 2.0})
    loss = b.op("MseLoss", [y, b.input("t", (1, 1))], "loss")
    g = b.build([loss, unused], loss)
    batch = {"x": np.ones((3, 1)), "t": np.array([[0.0]])}
    # L = (sum w)^2, so dL/dw = 2 sum(w) everywhere
    assert np.allclose(finite_diff_grad(g, "w", batch), 2 * 1.5, rtol=1e-9)
    assert np.allclose(finite_diff_grad(g, "side", batch), 0.0, atol=1e-12)


def test_fd_needs_fp64():
    g = build_toy_mlp([2, 2])
    with pytest.raises(Exception, match="FP64"):
        finite_diff_grad(g, "fc0.weight", {"x": np.ones((1, 2)), "labels": np.eye(2)[[0]]})


def test_toy_mlp_learns_separable_pair():
    g = build_toy_mlp([2, 8, 2], seed=3)
    tg = build_training_graph(g, TrainConfig(learning_rate=0.1))
    data = [{"x": np.array([[1.0, 0.5]], np.float32), "labels": np.eye(2)[[0]]},
            {"x": np.array([[-1.0, -0.5]], np.float32), "labels": np.eye(2)[[1]]}]
    w = dict(g.initializers)
    start = np.mean([forward_loss(g, d, w) for d in data])
    for s in range(200):
        w = run_training_step(tg, data[s % 2], weights=w).weights
    assert np.mean([forward_loss(g, d, w) for d in data]) <= start / 10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_step_is_deterministic(seed):
    g, batch = random_graph(seed)
    tg = build_training_graph(g)
    a, b = run_training_step(tg, batch), run_training_step(tg, batch)
    assert a.loss == b.loss and a.checksums == b.checksums
    assert all(np.array_equal(a.grads[k], b.grads[k]) for k in a.grads)


def test_tiny_cct_step_in_fp32_and_fp64_agree():
    g32 = build_cct(tiny_cct_config())
    g64 = g32.astype("FP64")
    rng = np.random.default_rng(4)
    batch = {"image": rng.standard_normal((1, 2, 8, 8)), "labels": np.eye(3)[[2]]}
    r32 = run_training_step(build_training_graph(g32), {k: v.astype(np.float32) for k, v in batch.items()})
    r64 = run_training_step(build_training_graph(g64), batch)
    assert abs(r32.loss - r64.loss) / abs(r64.loss) < 1e-5
