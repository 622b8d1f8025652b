"""Fine-tuning strategies: freezing, LoRA injection and strategy cost metrics.

A LoRA-adapted linear layer ``Y = X W0^T + b`` becomes four nodes::

    {name}.base    Gemm(X, W0, b)          frozen path
    {name}.lora_a  Gemm(X, A)              A: [r, k]
    {name}.lora_b  Gemm(XA, B)             B: [d, r]
    {name}         Add(base, lora_b)       writes the original output tensor

so downstream consumers are untouched. ``A ~ U(-1/sqrt(r), 1/sqrt(r))`` and
``B = 0``, which makes the adapted graph reproduce the original at init.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ir import NUMPY_DTYPE, Graph, NodeSpec, TensorSpec, infer_shapes, validate

DEFAULT_RANK = 4
LORA_LAYERS = ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2")
BLOCK_RE = re.compile(r"^blocks\.(\d+)\.")


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class LoraAdapter:
    target: str  # Gemm node name
    weight: str
    rank: int
    d: int  # output features
    k: int  # input features
    a: str
    b: str

    @property
    def trainable_params(self) -> int:
        return self.rank * (self.d + self.k)


def _weight_layout(g: Graph, node: NodeSpec):
    """Return (weight index, d, k) for a Gemm whose weight is an initializer."""
    if node.op != "Gemm":
        raise StrategyError(f"LoRA target {node.name!r} is a {node.op}, not a Gemm")
    ta, tb = node.attrs["transA"], node.attrs["transB"]
    for idx in (1, 0):
        w = node.inputs[idx]
        if w in g.initializers and g.tensors[w].kind == "weight":
            shape = g.tensors[w].shape
            if len(shape) != 2:
                raise StrategyError(f"LoRA target {node.name!r} needs a 2-D weight, got {shape}")
            if idx == 1:
                d, k = (shape if tb else shape[::-1])
            else:
                if ta:
                    raise StrategyError(f"LoRA target {node.name!r}: transposed left weight unsupported")
                d, k = shape
            return idx, d, k
    raise StrategyError(f"LoRA target {node.name!r} has no weight initializer")


def apply_lora(g: Graph, targets, r: int = DEFAULT_RANK, seed: int = 0) -> tuple[Graph, list[LoraAdapter]]:
    """Replace each target Gemm by the frozen-plus-low-rank composite."""
    targets = list(targets)
    if len(set(targets)) != len(targets):
        raise StrategyError("duplicate LoRA targets")
    by_name = {n.name: n for n in g.nodes}
    tensors = dict(g.tensors)
    inits = dict(g.initializers)
    replaced: dict[str, list[NodeSpec]] = {}
    adapters = []
    for i, name in enumerate(targets):
        if name not in by_name:
            raise StrategyError(f"unknown LoRA target {name!r}")
        node = by_name[name]
        idx, d, k = _weight_layout(g, node)
        if not isinstance(r, int) or r < 1 or 2 * r > min(d, k):
            raise StrategyError(f"rank {r} invalid for {name!r} ({d}x{k}); need 1 <= r <= {min(d, k) // 2}")
        w = node.inputs[idx]
        prefix = w[: -len(".weight")] if w.endswith(".weight") else w
        dtype = g.tensors[w].dtype
        rng = np.random.default_rng([seed, i])
        bound = 1.0 / math.sqrt(r)
        a_name, b_name = f"{prefix}.lora_A", f"{prefix}.lora_B"
        x = node.inputs[1 - idx]
        out = node.outputs[0]
        if idx == 1:
            a_val = rng.uniform(-bound, bound, (r, k))
            b_val = np.zeros((d, r))
            tb = node.attrs["transB"]
            if not tb:  # W0 is [k, d]: keep the same orientation for A and B
                a_val, b_val = a_val.T, b_val.T
            lora_a = NodeSpec(f"{name}.lora_a", "Gemm", (x, a_name), (f"{name}.lora_a",),
                              {"transA": node.attrs["transA"], "transB": tb})
            lora_b = NodeSpec(f"{name}.lora_b", "Gemm", (f"{name}.lora_a", b_name), (f"{name}.lora_b",),
                              {"transA": 0, "transB": tb})
        else:
            a_val = rng.uniform(-bound, bound, (r, k))
            b_val = np.zeros((d, r))
            lora_a = NodeSpec(f"{name}.lora_a", "Gemm", (a_name, x), (f"{name}.lora_a",),
                              {"transA": 0, "transB": node.attrs["transB"]})
            lora_b = NodeSpec(f"{name}.lora_b", "Gemm", (b_name, f"{name}.lora_a"), (f"{name}.lora_b",),
                              {"transA": 0, "transB": 0})
        for pname, val in ((a_name, a_val), (b_name, b_val)):
            if pname in tensors:
                raise StrategyError(f"{name!r} already carries a LoRA adapter")
            inits[pname] = np.asarray(val, dtype=NUMPY_DTYPE[dtype])
            tensors[pname] = TensorSpec(pname, tuple(val.shape), dtype, "weight", True)
        base = NodeSpec(f"{name}.base", "Gemm", node.inputs, (f"{name}.base",), dict(node.attrs))
        add = NodeSpec(name, "Add", (f"{name}.base", f"{name}.lora_b"), (out,), {})
        for t in (base, lora_a, lora_b):
            tensors[t.outputs[0]] = TensorSpec(t.outputs[0], None, dtype, "activation")
        tensors[w] = replace(tensors[w], trainable=False)
        replaced[name] = [base, lora_a, lora_b, add]
        adapters.append(LoraAdapter(name, w, r, d, k, a_name, b_name))
    nodes = []
    for n in g.nodes:
        nodes.extend(replaced.get(n.name, [n]))
    out = g.copy(tensors=tensors, nodes=nodes, initializers=inits)
    validate(out)
    return infer_shapes(out), adapters


# ---------------------------------------------------------------------------
# strategies


def _parse_mode(mode: str) -> tuple[str, int]:
    if mode in ("frozen", "full"):
        return mode, 0
    m = re.fullmatch(r"lora(?::(\d+))?", mode)
    if not m:
        raise StrategyError(f"unknown block mode {mode!r} (expected frozen, full or lora[:r])")
    return "lora", int(m.group(1) or DEFAULT_RANK)


@dataclass(frozen=True)
class StrategyConfig:
    """Which parts of a CCT-shaped graph are trained, and how.

    ``blocks`` maps encoder-block index to ``"frozen"``, ``"full"`` or
    ``"lora[:r]"``; blocks not listed are frozen. ``pool`` covers the final
    LayerNorm and the sequence-pooling projection.
    """

    name: str = "custom"
    blocks: dict = field(default_factory=dict)
    head: bool = True
    pool: bool = False
    tokenizer_frozen: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", {int(k): v for k, v in self.blocks.items()})
        for v in self.blocks.values():
            _parse_mode(v)

    def to_dict(self) -> dict:
        return {"name": self.name, "blocks": {str(k): v for k, v in sorted(self.blocks.items())},
                "head": self.head, "pool": self.pool, "tokenizer_frozen": self.tokenizer_frozen,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        known = {"name", "blocks", "head", "pool", "tokenizer_frozen", "seed"}
        extra = set(d) - known
        if extra:
            raise StrategyError(f"unknown strategy keys: {sorted(extra)}")
        return cls(**d)


PRESETS = ("LP", "FT-1", "LoRA-1", "FT-2", "LoRA-2", "Full-FT")


def preset(name: str, n_blocks: int = 2, rank: int = DEFAULT_RANK) -> StrategyConfig:
    canon = {p.lower(): p for p in PRESETS}
    key = canon.get(name.lower())
    if key is None:
        raise StrategyError(f"unknown strategy {name!r}; presets are {', '.join(PRESETS)}")
    if key == "LP":
        return StrategyConfig(key)
    if key == "Full-FT":
        return StrategyConfig(key, {i: "full" for i in range(n_blocks)}, pool=True, tokenizer_frozen=False)
    kind, k = key.split("-")
    k = int(k)
    if k > n_blocks:
        raise StrategyError(f"{key} needs at least {k} encoder blocks")
    mode = "full" if kind == "FT" else f"lora:{rank}"
    return StrategyConfig(key, {i: mode for i in range(n_blocks - k, n_blocks)})


def load_strategy(spec: str, n_blocks: int = 2) -> StrategyConfig:
    """A preset name (case-insensitive) or the path of a JSON strategy file."""
    if spec.lower() in {p.lower() for p in PRESETS}:
        return preset(spec, n_blocks)
    path = Path(spec)
    if not path.exists():
        raise StrategyError(f"unknown strategy {spec!r}: not a preset and no such file")
    return StrategyConfig.from_dict(json.loads(path.read_text()))


def block_indices(g: Graph) -> list[int]:
    return sorted({int(m.group(1)) for n in g.nodes if (m := BLOCK_RE.match(n.name))})


def apply_strategy(g: Graph, s: StrategyConfig) -> Graph:
    blocks = block_indices(g)
    if not blocks:
        raise StrategyError("graph has no encoder blocks named 'blocks.<i>.*'")
    unknown = sorted(set(s.blocks) - set(blocks))
    if unknown:
        raise StrategyError(f"unknown blocks {unknown}; graph has blocks {blocks}")
    if any(t.name.endswith((".lora_A", ".lora_B")) for t in g.params()):
        raise StrategyError("graph already carries LoRA adapters")

    def wanted(p: str) -> bool:
        if p.startswith("head."):
            return s.head
        if p.startswith(("norm.", "seqpool.")):
            return s.pool
        if p.startswith("tokenizer."):
            return not s.tokenizer_frozen
        m = BLOCK_RE.match(p)
        return bool(m) and _parse_mode(s.blocks.get(int(m.group(1)), "frozen"))[0] == "full"

    params = [t.name for t in g.params()]
    g = g.with_trainable(params, False).with_trainable([p for p in params if wanted(p)], True)
    by_rank: dict[int, list[str]] = {}
    for i, mode in sorted(s.blocks.items()):
        kind, r = _parse_mode(mode)
        if kind == "lora":
            by_rank.setdefault(r, []).extend(f"blocks.{i}.{layer}" for layer in LORA_LAYERS)
    for r, targets in sorted(by_rank.items()):
        g, _ = apply_lora(g, targets, r, seed=s.seed)
    return g


def trainable_bytes(g: Graph) -> int:
    return sum(t.byte_size for t in g.trainable())


def strategy_flops(tg) -> int:
    """Forward + backward + update FLOPs of a training graph."""
    from .perf import node_flops

    return sum(node_flops(n, tg.graph) for n in tg.schedule)
