"""Analytical cost model of a cluster + systolic GEMM accelerator SoC.

FLOP convention: a GEMM costs ``2*M*N*K`` plus ``M*N`` for a bias;
convolutions are counted after im2col lowering. Other ops cost a constant
per output element (see ``ELEMENTWISE``); data movement ops cost nothing.

Per node, compute cycles are ``flops / (u * peak)`` of the engine that runs
it, plus a fixed setup for every accelerator offload. Transfer cycles come
from the ledger bytes of that node over the DMA bandwidths; the L3<->L2 and
L2<->L1 channels run concurrently. With overlap (double buffering) a node
of ``n`` chunks costs ``(n-1)/n * max(compute, transfer)`` plus the first
load and the last compute, which cannot be hidden; without overlap the two
add up.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.optimize import least_squares

from .ir import GEMM_LIKE, Graph, NodeSpec

# FLOP per output element
ELEMENTWISE = {
    "Add": 1, "Mul": 1, "Scale": 1, "ReLU": 1, "GeLU": 10, "Softmax": 5, "LayerNorm": 8,
    "Accumulate": 1,  # per extra operand
    "ReLUGrad": 1, "GeLUGrad": 14, "SoftmaxGrad": 4, "SgdUpdate": 2,
    "CrossEntropyGrad": 6, "MseGrad": 3,
}
FREE_OPS = ("Transpose", "Reshape", "Split", "Concat")


class CostError(ValueError):
    pass


def node_flops(node: NodeSpec, g: Graph) -> int:
    from .memplan import gemm_dims

    op = node.op
    shp = lambda t: g.tensors[t].shape  # noqa: E731
    numel = lambda t: math.prod(shp(t))  # noqa: E731
    if op in GEMM_LIKE:
        b, m, n, k = gemm_dims(node, g)
        f = 2 * b * m * n * k
        if op == "Gemm" and len(node.inputs) > 2:
            f += numel(node.outputs[0])
        return f
    if op in FREE_OPS:
        return 0
    if op == "Accumulate":
        return (len(node.inputs) - 1) * numel(node.outputs[0])
    if op == "ReduceSum":
        return numel(node.inputs[0])
    if op in ("MaxPool2D", "MaxPool2DGrad"):
        out = node.outputs[0] if op == "MaxPool2D" else node.inputs[1]
        return numel(out) * node.attrs["kernel"] ** 2
    if op == "CrossEntropyLoss":
        return 6 * numel(node.inputs[0])
    if op == "MseLoss":
        return 3 * numel(node.inputs[0])
    if op == "LayerNormGrad":
        x = numel(node.inputs[0])
        return (12 * x if node.attrs["grad_input"] else 0) + (3 * x if node.attrs["grad_params"] else 0)
    if op in ELEMENTWISE:
        return ELEMENTWISE[op] * numel(node.outputs[0])
    raise CostError(f"no FLOP rule for {op}")


def graph_flops(g: Graph, nodes=None) -> int:
    return sum(node_flops(n, g) for n in (g.nodes if nodes is None else nodes))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HwConfig:
    """Parametric SoC. Bandwidth defaults are configuration choices, not measurements."""

    clock_hz: float = 360e6
    cluster_cores: int = 8
    cluster_fpus: int = 4
    u_cluster: float = 0.5
    accel_rows: int = 12
    accel_cols: int = 4
    u_accel: float = 0.5
    accel_setup: float = 0.0  # cycles per accelerator offload
    bw_l3: float = 1.0  # bytes/cycle, L3 <-> L2
    bw_l2l1: float = 8.0  # bytes/cycle, L2 <-> L1
    overlap: bool = True

    def __post_init__(self):
        if self.clock_hz <= 0 or self.bw_l3 <= 0 or self.bw_l2l1 <= 0:
            raise CostError("clock and bandwidths must be positive")
        if not (0 < self.u_cluster <= 1 and 0 < self.u_accel <= 1):
            raise CostError("utilization factors must lie in (0, 1]")
        if min(self.cluster_cores, self.cluster_fpus, self.accel_rows, self.accel_cols) <= 0:
            raise CostError("unit counts must be positive")
        if self.accel_setup < 0:
            raise CostError("setup cycles must be non-negative")

    @property
    def cluster_peak(self) -> float:
        return 2.0 * self.cluster_fpus  # one FMA per shared FPU per cycle

    @property
    def accel_peak(self) -> float:
        return 2.0 * self.accel_rows * self.accel_cols

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HwConfig":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise CostError(f"unknown hardware keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def parse(cls, text: str) -> "HwConfig":
        """A JSON file path, a JSON object, or ``key=value,...`` overrides of the defaults."""
        text = text.strip()
        if text.startswith("{"):
            return cls.from_dict(json.loads(text))
        if "=" not in text:
            with open(text) as f:
                return cls.from_dict(json.load(f))
        types = {f.name: f.type for f in fields(cls)}
        vals = {}
        for item in text.split(","):
            k, _, v = item.partition("=")
            k = k.strip()
            if k not in types:
                raise CostError(f"unknown hardware key {k!r}")
            vals[k] = v.strip().lower() in ("1", "true", "yes") if types[k] in (bool, "bool") else float(v)
        for k in ("cluster_cores", "cluster_fpus", "accel_rows", "accel_cols"):
            if k in vals:
                vals[k] = int(vals[k])
        return cls(**vals)


@dataclass(frozen=True)
class Workload:
    """Per-node quantities the cost model needs, precomputed once per plan."""

    names: tuple
    flops: np.ndarray
    gemm: np.ndarray  # bool: GEMM-like (accelerator eligible)
    l3_bytes: np.ndarray
    l1_bytes: np.ndarray
    chunks: np.ndarray  # pipeline stages per node (tiles, or L1-sized chunks)
    phase: tuple  # "fw" | "bw" | "update" per node

    @classmethod
    def from_plan(cls, tg, plan, tiles, ledger=None) -> "Workload":
        from .memplan import transfer_volume

        g = tg.graph
        if ledger is None:
            ledger = transfer_volume(tg, plan, tiles)
        l3 = ledger.per_node("L3", "L2")
        l1 = ledger.per_node("L2", "L1")
        half = plan.hierarchy.l1 // 2
        names, flops, gemm, b3, b1, chunks, phase = [], [], [], [], [], [], []
        nf = tg.forward_count
        for i, n in enumerate(tg.schedule):
            names.append(n.name)
            flops.append(node_flops(n, g))
            gemm.append(n.op in GEMM_LIKE)
            b3.append(l3.get(i, 0))
            b1.append(l1.get(i, 0))
            if n.op in GEMM_LIKE:
                chunks.append(tiles[n.name].tile_count)
            else:
                chunks.append(max(1, -(-b1[-1] // max(half, 1))))
            phase.append("fw" if i < nf else "update" if n.op == "SgdUpdate" else "bw")
        return cls(tuple(names), np.array(flops, float), np.array(gemm, bool), np.array(b3, float),
                   np.array(b1, float), np.array(chunks, float), tuple(phase))


def node_cycles(w: Workload, hw: HwConfig, use_accel: bool) -> np.ndarray:
    on_accel = w.gemm & use_accel
    peak = np.where(on_accel, hw.u_accel * hw.accel_peak, hw.u_cluster * hw.cluster_peak)
    compute = w.flops / peak + np.where(on_accel, hw.accel_setup, 0.0)
    t3 = w.l3_bytes / hw.bw_l3
    t1 = w.l1_bytes / hw.bw_l2l1
    transfer = np.maximum(t3, t1)
    if not hw.overlap:
        return compute + transfer
    n = np.maximum(w.chunks, 1)
    return (transfer + compute) / n + (n - 1) / n * np.maximum(compute, transfer)


@dataclass(frozen=True)
class CostReport:
    flops: dict
    total_flops: float
    use_accel: bool
    cycles: float
    cycles_accel: float
    cycles_cluster: float
    latency_ms: float
    flop_per_cycle: float
    speedup: float
    transfer_bytes: dict
    clock_hz: float

    @property
    def steps_per_second(self) -> float:
        return 1e3 / self.latency_ms if self.latency_ms > 0 else math.inf

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_workload(w: Workload, hw: HwConfig, use_accel: bool = True) -> CostReport:
    acc = float(node_cycles(w, hw, True).sum())
    clu = float(node_cycles(w, hw, False).sum())
    cyc = acc if use_accel else clu
    ph = np.array(w.phase)
    flops = {k: float(w.flops[ph == k].sum()) for k in ("fw", "bw", "update")}
    total = float(w.flops.sum())
    return CostReport(
        flops=flops,
        total_flops=total,
        use_accel=use_accel,
        cycles=cyc,
        cycles_accel=acc,
        cycles_cluster=clu,
        latency_ms=cyc / hw.clock_hz * 1e3,
        flop_per_cycle=total / cyc if cyc > 0 else 0.0,
        speedup=clu / acc if acc > 0 else 1.0,
        transfer_bytes={"L3-L2": float(w.l3_bytes.sum()), "L2-L1": float(w.l1_bytes.sum())},
        clock_hz=hw.clock_hz,
    )


def estimate(tg, plan, tiles, hw: HwConfig = HwConfig(), use_accel: bool = True, ledger=None) -> CostReport:
    return estimate_workload(Workload.from_plan(tg, plan, tiles, ledger), hw, use_accel)


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class Anchor:
    workload: Workload
    use_accel: bool
    latency_ms: float
    label: str = ""


FIT_PARAMS = ("u_cluster", "u_accel", "accel_setup", "bw_l3", "bw_l2l1")
_BOUNDS = {"u_cluster": (1e-3, 1.0), "u_accel": (1e-3, 1.0), "accel_setup": (1.0, 1e6),
           "bw_l3": (1e-2, 64.0), "bw_l2l1": (1e-1, 512.0)}


def calibrate(hw: HwConfig, anchors, params=FIT_PARAMS, prior_weight: float = 1e-2) -> HwConfig:
    """Least-squares fit of ``params`` so that the model reproduces anchor latencies.

    Residuals are log latency ratios. A weak pull towards the starting
    configuration keeps parameters that the anchors do not constrain near
    their defaults.
    """
    anchors = list(anchors)
    keys = {(id(a.workload), a.use_accel) for a in anchors}
    if len(anchors) < 2 or len(keys) < 2:
        raise CostError("calibration needs at least two distinct anchors")
    if any(not a.latency_ms > 0 for a in anchors):
        raise CostError("anchor latencies must be positive")
    lo = np.log([_BOUNDS[p][0] for p in params])
    hi = np.log([_BOUNDS[p][1] for p in params])
    x0 = np.clip(np.log([max(getattr(hw, p), _BOUNDS[p][0]) for p in params]), lo, hi)

    def make(x):
        return replace(hw, **{p: float(np.exp(v)) for p, v in zip(params, x)})

    def resid(x):
        h = make(x)
        r = [math.log(node_cycles(a.workload, h, a.use_accel).sum() / h.clock_hz * 1e3 / a.latency_ms)
             for a in anchors]
        return np.concatenate([r, prior_weight * (x - x0)])

    sol = least_squares(resid, x0, bounds=(lo, hi), method="trf", x_scale=1.0)
    return make(sol.x)
