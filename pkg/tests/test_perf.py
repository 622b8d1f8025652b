import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgetrain.autodiff import build_training_graph
from edgetrain.builders import GraphBuilder, build_toy_mlp
from edgetrain.memplan import MemHierarchy, plan_training_graph
from edgetrain.perf import (Anchor, CostError, HwConfig, Workload, calibrate, estimate, estimate_workload, graph_flops,
                            node_cycles, node_flops)


def _gemm_graph(m, n, k, bias=False):
    b = GraphBuilder()
    a = b.input("a", (m, k))
    w = b.param("w", np.zeros((k, n)))
    ins = [a, w] + ([b.param("c", np.zeros(n))] if bias else [])
    b.op("Gemm", ins, "mm", {"transA": 0, "transB": 0})
    return b.build(["mm"])


def test_flop_examples():
    g = _gemm_graph(64, 128, 384)
    assert node_flops(g.node("mm"), g) == 6_291_456
    g = _gemm_graph(2, 3, 4, bias=True)
    assert node_flops(g.node("mm"), g) == 2 * 2 * 3 * 4 + 6
    b = GraphBuilder()
    x = b.input("x", (4, 6))
    t = b.op("Transpose", [x], "t", {"perm": [1, 0]})
    r = b.op("Reshape", [t], "r", {"shape": [24]})
    g = b.build([r])
    assert graph_flops(g) == 0


def _workload(widths, hier=MemHierarchy()):
    tg = build_training_graph(build_toy_mlp(widths))
    plan, tiles, ledger = plan_training_graph(tg, hier)
    return tg, plan, tiles, ledger, Workload.from_plan(tg, plan, tiles, ledger)


def test_zero_flop_graph_costs_only_transfers():
    b = GraphBuilder()
    x = b.input("x", (1, 8))
    b.op("Reshape", [x], "r", {"shape": [8, 1]})
    g = b.build(["r"])
    w = Workload(("r",), np.zeros(1), np.zeros(1, bool), np.zeros(1), np.zeros(1), np.ones(1), ("fw",))
    rep = estimate_workload(w, HwConfig())
    assert graph_flops(g) == 0 and rep.cycles == 0 and rep.flop_per_cycle == 0 and rep.speedup == 1


def test_accelerator_only_changes_gemm_nodes():
    *_, w = _workload([32, 64, 10])
    hw = HwConfig()
    on, off = node_cycles(w, hw, True), node_cycles(w, hw, False)
    assert np.array_equal(on[~w.gemm], off[~w.gemm])
    assert np.all(on[w.gemm] <= off[w.gemm]) and w.gemm.any()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(2, 48), min_size=2, max_size=4))
def test_throughput_never_exceeds_peak(widths):
    *_, w = _workload(widths)
    hw = HwConfig()
    rep = estimate_workload(w, hw, True)
    assert rep.flop_per_cycle <= hw.u_accel * hw.accel_peak + 1e-9
    cl = estimate_workload(w, hw, False)
    assert cl.flop_per_cycle <= hw.u_cluster * hw.cluster_peak + 1e-9
    assert rep.speedup >= 1
    assert rep.total_flops == sum(rep.flops.values())


def test_latency_is_monotone_in_work_and_bandwidth():
    small = estimate(*_workload([16, 16, 4])[:3])
    big = estimate(*_workload([64, 64, 4])[:3])
    assert big.cycles > small.cycles and big.total_flops > small.total_flops
    tg, plan, tiles, ledger, w = _workload([64, 64, 4])
    slow = estimate_workload(w, HwConfig(bw_l2l1=1.0))
    assert slow.cycles >= estimate_workload(w, HwConfig()).cycles
    serial = estimate_workload(w, HwConfig(overlap=False))
    assert serial.cycles >= estimate_workload(w, HwConfig()).cycles
    assert math.isclose(serial.latency_ms, serial.cycles / 360e6 * 1e3)


def test_hw_config_validation_and_parsing():
    with pytest.raises(CostError):
        HwConfig(u_accel=0)
    with pytest.raises(CostError):
        HwConfig(bw_l3=-1)
    with pytest.raises(CostError):
        HwConfig.parse("warp=9")
    hw = HwConfig.parse("accel_rows=16,overlap=false")
    assert hw.accel_rows == 16 and hw.overlap is False and HwConfig.parse('{"bw_l3": 2}').bw_l3 == 2
    assert HwConfig.from_dict(hw.to_dict()) == hw


def test_calibration_rejects_degenerate_anchors():
    *_, w = _workload([16, 16, 4])
    with pytest.raises(CostError):
        calibrate(HwConfig(), [Anchor(w, True, 1.0)])
    with pytest.raises(CostError):
        calibrate(HwConfig(), [Anchor(w, True, 1.0), Anchor(w, True, 2.0)])
    with pytest.raises(CostError):
        calibrate(HwConfig(), [Anchor(w, True, 1.0), Anchor(w, False, 0.0)])


def test_calibration_reproduces_a_known_machine():
    truth = HwConfig(u_cluster=0.3, u_accel=0.7, accel_setup=500.0, bw_l3=2.0, bw_l2l1=4.0)
    tight = MemHierarchy(l1=4096, l2=60_000, l3=1 << 24)
    loads = [_workload(ws, tight)[-1] for ws in ([32, 64, 10], [128, 128, 16], [64, 256, 64, 8])]
    anchors = [Anchor(w, acc, float(node_cycles(w, truth, acc).sum() / truth.clock_hz * 1e3))
               for w in loads for acc in (True, False)]
    fit = calibrate(HwConfig(), anchors)
    for a in anchors:
        got = node_cycles(a.workload, fit, a.use_accel).sum() / fit.clock_hz * 1e3
        assert abs(got - a.latency_ms) / a.latency_ms <= 0.15
