"""End-to-end helpers shared by the CLI, the demos and the acceptance tests.

The reference calibration fits the cost model to published end-to-end
latencies: the cheapest and most expensive preset on the cluster alone and
with the accelerator, plus the Deep-AE throughput figure.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import TrainConfig, TrainingGraph, build_training_graph
from .builders import CctConfig, DeepAeConfig, build_cct, build_deep_ae
from .ir import Graph, serialize_graph
from .memplan import MemHierarchy, dynamic_peak, liveness, plan_training_graph
from .peft import PRESETS, apply_strategy, preset, strategy_flops, trainable_bytes
from .perf import Anchor, HwConfig, Workload, calibrate, estimate_workload

# latency anchors in ms: (preset, accelerated) -> latency
CCT_ANCHORS = {("LP", False): 143.0, ("LoRA-2", False): 200.0, ("LP", True): 41.0, ("LoRA-2", True): 87.0}
# Deep-AE: 0.8 M forward+backward MAC at 13.4 per cycle, accelerated
DEEP_AE_MAC = 0.8e6
DEEP_AE_MAC_PER_CYCLE = 13.4
FIVE = ("LP", "FT-1", "LoRA-1", "FT-2", "LoRA-2")


def graph_hash(g: Graph) -> str:
    text, blob = serialize_graph(g)
    return hashlib.sha256(text.encode() + b"\0" + blob).hexdigest()


@dataclass
class PresetRun:
    name: str
    graph: Graph  # strategy applied, before differentiation
    tg: TrainingGraph
    plan: object
    tiles: dict
    ledger: object
    workload: Workload

    @property
    def trainable_bytes(self) -> int:
        return trainable_bytes(self.graph)

    @property
    def flops(self) -> int:
        return strategy_flops(self.tg)

    @property
    def dynamic_peak(self) -> int:
        return dynamic_peak(liveness(self.tg))


def run_preset(name: str, base: Graph | None = None, hier: MemHierarchy = MemHierarchy(),
               cfg: TrainConfig = TrainConfig(), policy: str = "l3-home") -> PresetRun:
    base = build_cct() if base is None else base
    n_blocks = len({n.name.split(".")[1] for n in base.nodes if n.name.startswith("blocks.")})
    g = apply_strategy(base, preset(name, n_blocks))
    tg = build_training_graph(g, cfg)
    plan, tiles, ledger = plan_training_graph(tg, hier, accel=True, policy=policy)
    return PresetRun(name, g, tg, plan, tiles, ledger, Workload.from_plan(tg, plan, tiles, ledger))


def run_presets(names=PRESETS, cfg: CctConfig = CctConfig(), hier: MemHierarchy = MemHierarchy()) -> dict:
    base = build_cct(cfg)
    return {p: run_preset(p, base, hier) for p in names}


def deep_ae_workload(hier: MemHierarchy = MemHierarchy(), cfg: DeepAeConfig = DeepAeConfig()) -> Workload:
    """Forward and backward nodes of one Deep-AE step (the figure excludes the update)."""
    tg = build_training_graph(build_deep_ae(cfg), TrainConfig(loss="mse", update_placement="eager"))
    plan, tiles, ledger = plan_training_graph(tg, hier, accel=True)
    w = Workload.from_plan(tg, plan, tiles, ledger)
    keep = np.array([p != "update" for p in w.phase])
    return Workload(tuple(np.array(w.names)[keep]), w.flops[keep], w.gemm[keep], w.l3_bytes[keep],
                    w.l1_bytes[keep], w.chunks[keep], tuple(np.array(w.phase)[keep]))


def deep_ae_anchor_ms(clock_hz: float) -> float:
    return DEEP_AE_MAC / DEEP_AE_MAC_PER_CYCLE / clock_hz * 1e3


def reference_anchors(runs: dict, hier: MemHierarchy = MemHierarchy(), clock_hz: float = 360e6,
                      deep_ae: bool = True) -> list[Anchor]:
    anchors = [Anchor(runs[p].workload, acc, ms, f"{p} {'accelerated' if acc else 'cluster'}")
               for (p, acc), ms in CCT_ANCHORS.items()]
    if deep_ae:
        anchors.append(Anchor(deep_ae_workload(hier), True, deep_ae_anchor_ms(clock_hz), "Deep-AE accelerated"))
    return anchors


def calibrated_hw(runs: dict | None = None, hier: MemHierarchy = MemHierarchy(), base: HwConfig = HwConfig()) -> HwConfig:
    if runs is None or not {"LP", "LoRA-2"} <= set(runs):
        runs = {**(runs or {}), **run_presets(("LP", "LoRA-2"), hier=hier)}
    return calibrate(base, reference_anchors(runs, hier, base.clock_hz))


def preset_rows(runs: dict, hw: HwConfig) -> list[dict]:
    """One row per preset with the quantities reported in the CSVs."""
    rows = []
    for name, r in runs.items():
        acc = estimate_workload(r.workload, hw, True)
        rows.append({
            "strategy": name,
            "trainable_bytes": r.trainable_bytes,
            "trainable_mb": r.trainable_bytes / 1e6,
            "flops_fw": int(acc.flops["fw"]),
            "flops_bw": int(acc.flops["bw"]),
            "flops_update": int(acc.flops["update"]),
            "flops_total_m": acc.total_flops / 1e6,
            "dynamic_peak_mb": r.dynamic_peak / 1e6,
            "l3_peak_mb": r.plan.peaks["L3"] / 1e6,
            "transfer_l3_l2_mb": r.ledger.total("L3", "L2") / 1e6,
            "transfer_l2_l1_mb": r.ledger.total("L2", "L1") / 1e6,
            "cluster_ms": acc.cycles_cluster / hw.clock_hz * 1e3,
            "accel_ms": acc.latency_ms,
            "speedup": acc.speedup,
            "steps_per_s": acc.steps_per_second,
            "flop_per_cycle": acc.flop_per_cycle,
        })
    return rows


# ---------------------------------------------------------------------------
# toy classification task for the tiny transformer

# LP trains a linear head on frozen random features and needs a larger step
TOY_LR = {"LP": 0.5, "FT-1": 0.1, "LoRA-1": 0.1, "FT-2": 0.1, "LoRA-2": 0.1, "Full-FT": 0.1}


def prototype_task(cfg: CctConfig, n: int = 6, noise: float = 0.3, seed: int = 0) -> list[dict]:
    """``n`` noisy copies of one random prototype image per class, labels cycling."""
    rng = np.random.default_rng(seed)
    shape = (1, cfg.in_channels, cfg.image_size, cfg.image_size)
    protos = rng.standard_normal((cfg.classes, *shape))
    eye = np.eye(cfg.classes)
    return [{"image": protos[i % cfg.classes] + noise * rng.standard_normal(shape),
             "labels": eye[[i % cfg.classes]]} for i in range(n)]


def mean_loss(g: Graph, data, weights=None) -> float:
    from .interp import forward_loss

    return float(np.mean([float(forward_loss(g, b, weights)) for b in data]))


def train(tg: TrainingGraph, data, steps: int, weights=None) -> dict:
    """Plain SGD cycling through ``data``; returns the final weights."""
    from .interp import run_training_step

    w = dict(tg.graph.initializers if weights is None else weights)
    for s in range(steps):
        w = run_training_step(tg, data[s % len(data)], weights=w).weights
    return w
