"""Random small FP64 training graphs covering every forward primitive."""
from __future__ import annotations

import numpy as np

from edgetrain.builders import GraphBuilder

KINDS = ("Gemm", "Conv2D", "MaxPool2D", "Add", "Mul", "Scale", "Transpose", "Reshape",
         "ReLU", "GeLU", "Softmax", "LayerNorm", "Split", "CrossEntropyLoss", "MseLoss")
SPATIAL = ("Conv2D", "MaxPool2D")


def _flat(s):
    return [s[0], int(np.prod(s[1:]))]


class _Gen:
    def __init__(self, rng: np.random.Generator, seed: int):
        self.rng = rng
        self.b = GraphBuilder("FP64", seed)
        self.live: list[tuple[str, tuple]] = []  # tensors available as operands
        self.n = 0
        self.has_param = False

    def name(self, op):
        self.n += 1
        return f"{op.lower()}{self.n}"

    def param(self, shape, kind="weight"):
        self.has_param = True
        return self.b.param(f"p{self.n}_{len(self.b.inits)}", self.rng.normal(0, 0.6, shape), kind=kind)

    def shape(self, t):
        return self.b.tensors[t].shape

    def push(self, t):
        self.live.append((t, self.shape(t)))
        return t

    def apply(self, op: str, x: str) -> str:
        r, s = self.rng, self.shape(x)
        nm = self.name(op)
        if op == "Gemm":
            if len(s) == 3:  # batched, weight carries the batch dim
                w = self.param((s[0], s[2], int(r.integers(2, 5))))
                return self.b.op("Gemm", [x, w], nm, {"transA": 0, "transB": 0})
            x2 = x if len(s) == 2 else self.b.op("Reshape", [x], self.name("reshape"), {"shape": _flat(s)})
            m, k = self.shape(x2)
            n = int(r.integers(2, 5))
            variant = r.integers(0, 3)
            if variant == 0:
                tb = int(r.integers(0, 2))
                w = self.param((n, k) if tb else (k, n))
                ins = [x2, w] + ([self.param((n,), "bias")] if r.random() < 0.6 else [])
                return self.b.op("Gemm", ins, nm, {"transA": 0, "transB": tb})
            if variant == 1:  # weight on the left: W [n, m] . X
                return self.b.op("Gemm", [self.param((n, m)), x2], nm, {"transA": 0, "transB": 0})
            return self.b.op("Gemm", [x2, self.param((n, k))], nm, {"transA": 0, "transB": 1})
        if op == "Conv2D":
            k = int(r.choice([1, 2, 3]))
            st, p = int(r.integers(1, 3)), int(r.integers(0, 2))
            w = self.param((int(r.integers(1, 4)), s[1], k, k))
            return self.b.op("Conv2D", [x, w], nm, {"kernel": k, "stride": st, "padding": p})
        if op == "MaxPool2D":
            k = int(r.choice([2, 3]))
            p = int(r.integers(0, 2))
            return self.b.op("MaxPool2D", [x], nm, {"kernel": k, "stride": int(r.integers(1, 3)), "padding": p})
        if op in ("Add", "Mul"):
            other = [t for t, sh in self.live if sh == s and t != x]
            y = other[-1] if other and r.random() < 0.6 else self.param(s)
            return self.b.op(op, [x, y] if r.random() < 0.5 else [y, x], nm)
        if op == "Scale":
            return self.b.op("Scale", [x], nm, {"factor": float(r.uniform(-2, 2))})
        if op == "Transpose":
            return self.b.op("Transpose", [x], nm, {"perm": [int(v) for v in r.permutation(len(s))]})
        if op == "Reshape":
            return self.b.op("Reshape", [x], nm, {"shape": _flat(s) if len(s) > 2 else [s[1], s[0]]})
        if op in ("ReLU", "GeLU"):
            return self.b.op(op, [x], nm)
        if op == "Softmax":
            return self.b.op("Softmax", [x], nm, {"axis": int(r.integers(-len(s), len(s)))})
        if op == "LayerNorm":
            d = s[-1]
            g = self.param((d,))
            bb = self.param((d,), "bias")
            return self.b.op("LayerNorm", [x, g, bb], nm, {"epsilon": 1e-5})
        if op == "Split":
            axes = [a for a in range(len(s)) if s[a] >= 2]
            if not axes:
                return self.b.op("Scale", [x], nm, {"factor": 1.5})
            a = int(r.choice(axes))
            cut = int(r.integers(1, s[a]))
            outs = self.b.op("Split", [x], nm, {"axis": a, "sizes": [cut, s[a] - cut]}, n_out=2)
            keep = int(r.integers(0, 2))
            self.push(outs[1 - keep])
            return outs[keep]
        raise ValueError(op)


def random_graph(seed: int, first: str | None = None, max_nodes: int = 6):
    """A graph of at most ``max_nodes`` nodes ending in a loss, plus a matching batch.

    ``first`` forces the first operator (or the loss kind), so that cycling it
    over :data:`KINDS` covers every primitive.
    """
    for attempt in range(100):
        g, batch = _attempt(np.random.default_rng([seed, attempt]), seed, first, max_nodes)
        if len(g.nodes) <= max_nodes:
            return g, batch
    raise RuntimeError("could not draw a small enough graph")


def _attempt(rng, seed, first, max_nodes):
    gen = _Gen(rng, seed)
    spatial = first in SPATIAL or (first is None and rng.random() < 0.25)
    shape = (1, 2, 5, 5) if spatial else tuple(int(v) for v in rng.integers(2, 5, size=int(rng.integers(2, 4))))
    x = gen.b.input("x", shape)
    gen.push(x)
    loss_kind = first if first in ("CrossEntropyLoss", "MseLoss") else None
    ops = [] if first is None or loss_kind else [first]
    # body + optional param node + optional Gemm to 2-D + loss <= max_nodes
    n_body = int(rng.integers(len(ops), max(len(ops) + 1, max_nodes - 2)))
    pool = [k for k in KINDS if k not in ("CrossEntropyLoss", "MseLoss") and (spatial or k not in SPATIAL)]
    while len(ops) < n_body:
        ops.append(str(rng.choice(pool)))
    cur = x
    used = 0
    for op in ops:
        if op in SPATIAL and (len(gen.shape(cur)) != 4 or min(gen.shape(cur)[2:]) < 3):
            op = "ReLU"
        before = gen.n
        cur = gen.push(gen.apply(op, cur))
        used += gen.n - before
        if used >= max_nodes - 2:
            break
    if not gen.has_param:
        cur = gen.push(gen.b.op("Mul", [cur, gen.param(gen.shape(cur))], gen.name("mul")))
    if loss_kind is None:
        loss_kind = "CrossEntropyLoss" if len(gen.shape(cur)) == 2 and rng.random() < 0.5 else "MseLoss"
    if loss_kind == "CrossEntropyLoss" and len(gen.shape(cur)) != 2:
        s = gen.shape(cur)
        cur = gen.b.op("Reshape", [cur], gen.name("reshape"), {"shape": _flat(s)})
    out_shape = gen.shape(cur)
    if loss_kind == "CrossEntropyLoss":
        t = gen.b.input("labels", out_shape)
        target = np.eye(out_shape[1])[rng.integers(0, out_shape[1], out_shape[0])]
    else:
        t = gen.b.input("target", out_shape)
        target = rng.normal(size=out_shape)
    loss = gen.b.op(loss_kind, [cur, t], "loss")
    g = gen.b.build([loss], loss)
    batch = {"x": rng.normal(size=shape), t: target}
    return g, batch
