"""Graph intermediate representation for training graphs.

A :class:`Graph` is a typed DAG of primitive operators over named tensors.
Weights and other constants live in ``Graph.initializers`` as numpy arrays;
on disk they are stored in a separate little-endian blob (see
:func:`serialize_graph`).
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable

import numpy as np

DTYPE_WIDTH = {"FP32": 4, "FP64": 8}
NUMPY_DTYPE = {"FP32": np.dtype("<f4"), "FP64": np.dtype("<f8")}

TENSOR_KINDS = (
    "input",
    "weight",
    "bias",
    "activation",
    "gradient",
    "optimizer-state",
    "constant",
)
PARAM_KINDS = ("weight", "bias")

FORMAT_NAME = "edgetrain-ir"
FORMAT_VERSION = 1


class IRError(Exception):
    pass


class ParseError(IRError):
    """Malformed IR document. ``path`` points at the offending JSON location."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


class ValidationError(IRError):
    def __init__(self, msg: str, node: str | None = None):
        super().__init__(f"node {node!r}: {msg}" if node else msg)
        self.node = node


class CycleError(ValidationError):
    def __init__(self, cycle: list[str]):
        super().__init__("cycle detected: " + " -> ".join(cycle + cycle[:1]))
        self.cycle = cycle


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...] | None
    dtype: str = "FP32"
    kind: str = "activation"
    trainable: bool = False
    grad_of: str | None = None

    @property
    def numel(self) -> int:
        if self.shape is None:
            raise ValidationError(f"tensor {self.name!r} has no concrete shape")
        return math.prod(self.shape)

    @property
    def byte_size(self) -> int:
        return self.numel * DTYPE_WIDTH[self.dtype]

    @property
    def is_param(self) -> bool:
        return self.kind in PARAM_KINDS


@dataclass(frozen=True)
class NodeSpec:
    name: str
    op: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: dict[str, Any] = field(default_factory=dict)

    def attr(self, key: str) -> Any:
        return self.attrs[key]


# ---------------------------------------------------------------------------
# operator signatures and shape rules


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _same(shapes, attrs):
    return [shapes[0]]


def _same_all(shapes, attrs):
    if any(s != shapes[0] for s in shapes):
        raise ValueError(f"operand shapes differ: {shapes}")
    return [shapes[0]]


def _gemm(shapes, attrs):
    a, b = shapes[0], shapes[1]
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"Gemm operands must be at least 2-D, got {a} and {b}")
    if a[:-2] != b[:-2]:
        raise ValueError(f"Gemm batch dims differ: {a} vs {b}")
    m, k = (a[-1], a[-2]) if attrs["transA"] else (a[-2], a[-1])
    k2, n = (b[-1], b[-2]) if attrs["transB"] else (b[-2], b[-1])
    if k != k2:
        raise ValueError(f"Gemm inner dims mismatch: {k} vs {k2} (A{list(a)}, B{list(b)})")
    if len(shapes) == 3:
        if len(a) != 2:
            raise ValueError("Gemm bias only supported for 2-D operands")
        if shapes[2] != (n,):
            raise ValueError(f"Gemm bias shape {shapes[2]} does not match N={n}")
    return [tuple(a[:-2]) + (m, n)]


def _conv(shapes, attrs):
    x, w = shapes
    if len(x) != 4 or len(w) != 4:
        raise ValueError("Conv2D expects NCHW input and OIHW weight")
    k, s, p = attrs["kernel"], attrs["stride"], attrs["padding"]
    if w[1] != x[1]:
        raise ValueError(f"Conv2D channel mismatch: input C={x[1]}, weight C={w[1]}")
    if w[2] != k or w[3] != k:
        raise ValueError(f"Conv2D weight spatial dims {w[2:]} != kernel {k}")
    ho, wo = _conv_out(x[2], k, s, p), _conv_out(x[3], k, s, p)
    if ho <= 0 or wo <= 0:
        raise ValueError("Conv2D output is empty")
    return [(x[0], w[0], ho, wo)]


def _pool(shapes, attrs):
    x = shapes[0]
    if len(x) != 4:
        raise ValueError("MaxPool2D expects NCHW input")
    k, s, p = attrs["kernel"], attrs["stride"], attrs["padding"]
    if p >= k:
        raise ValueError("MaxPool2D padding must be smaller than the kernel")
    return [(x[0], x[1], _conv_out(x[2], k, s, p), _conv_out(x[3], k, s, p))]


def _axis(attrs, rank):
    ax = attrs["axis"]
    ax = ax + rank if ax < 0 else ax
    if not 0 <= ax < rank:
        raise ValueError(f"axis {attrs['axis']} out of range for rank {rank}")
    return ax


def _softmax(shapes, attrs):
    _axis(attrs, len(shapes[0]))
    return [shapes[0]]


def _transpose(shapes, attrs):
    x, perm = shapes[0], list(attrs["perm"])
    if sorted(perm) != list(range(len(x))):
        raise ValueError(f"bad permutation {perm} for rank {len(x)}")
    return [tuple(x[i] for i in perm)]


def _reshape(shapes, attrs):
    new = tuple(int(d) for d in attrs["shape"])
    if any(d <= 0 for d in new) or math.prod(new) != math.prod(shapes[0]):
        raise ValueError(f"cannot reshape {shapes[0]} to {new}")
    return [new]


def _layernorm(shapes, attrs):
    x, g, b = shapes
    if g != (x[-1],) or b != (x[-1],):
        raise ValueError(f"LayerNorm affine shapes {g}, {b} do not match last dim {x[-1]}")
    return [x]


def _loss(shapes, attrs):
    if shapes[0] != shapes[1]:
        raise ValueError(f"prediction {shapes[0]} and target {shapes[1]} differ")
    return [(1,)]


def _ce(shapes, attrs):
    if len(shapes[0]) != 2:
        raise ValueError("CrossEntropyLoss expects [batch, classes] logits")
    return _loss(shapes, attrs)


def _split(shapes, attrs):
    x = shapes[0]
    ax = _axis(attrs, len(x))
    sizes = list(attrs["sizes"])
    if sum(sizes) != x[ax] or any(s <= 0 for s in sizes):
        raise ValueError(f"split sizes {sizes} do not cover dim {x[ax]}")
    return [x[:ax] + (s,) + x[ax + 1:] for s in sizes]


def _concat(shapes, attrs):
    present = list(attrs["present"])
    sizes = list(attrs["sizes"])
    if len(present) != len(sizes) or sum(present) != len(shapes) or not shapes:
        raise ValueError("Concat present-mask does not match inputs")
    ref = shapes[0]
    ax = _axis(attrs, len(ref))
    it = iter(shapes)
    for flag, size in zip(present, sizes):
        if flag:
            s = next(it)
            if s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:] or s[ax] != size:
                raise ValueError(f"Concat part {s} inconsistent with sizes {sizes}")
    return [ref[:ax] + (sum(sizes),) + ref[ax + 1:]]


def _reduce(shapes, attrs):
    x = shapes[0]
    ax = _axis(attrs, len(x))
    if len(x) == 1:
        return [(1,)]
    return [x[:ax] + x[ax + 1:]]


def _ln_grad(shapes, attrs):
    x, g, dy = shapes
    if dy != x or g != (x[-1],):
        raise ValueError("LayerNormGrad shape mismatch")
    out = []
    if attrs["grad_input"]:
        out.append(x)
    if attrs["grad_params"]:
        out += [g, g]
    if not out:
        raise ValueError("LayerNormGrad computes nothing")
    return out


def _pool_grad(shapes, attrs):
    x, dy = shapes
    if _pool([x], attrs)[0] != dy:
        raise ValueError("MaxPool2DGrad upstream shape mismatch")
    return [x]


def _conv_grad_input(shapes, attrs):
    w, dy = shapes
    h, wd = attrs["input_h"], attrs["input_w"]
    x = (dy[0], w[1], h, wd)
    if _conv([x, w], attrs)[0] != dy:
        raise ValueError("Conv2DGradInput shape mismatch")
    return [x]


def _conv_grad_weight(shapes, attrs):
    x, dy = shapes
    k = attrs["kernel"]
    w = (dy[1], x[1], k, k)
    if _conv([x, w], attrs)[0] != dy:
        raise ValueError("Conv2DGradWeight shape mismatch")
    return [w]


def _pair_same(shapes, attrs):
    if shapes[0] != shapes[1]:
        raise ValueError(f"operand shapes differ: {shapes}")
    return [shapes[0]]


@dataclass(frozen=True)
class OpSig:
    min_inputs: int
    max_inputs: int | None  # None: variadic
    n_outputs: int | None  # None: determined by attributes
    attrs: frozenset
    shape_fn: Callable


def _sig(lo, hi, nout, attrs, fn):
    return OpSig(lo, hi, nout, frozenset(attrs), fn)


CONV_ATTRS = ("kernel", "stride", "padding")

OPS: dict[str, OpSig] = {
    # forward primitives
    "Gemm": _sig(2, 3, 1, ("transA", "transB"), _gemm),
    "Conv2D": _sig(2, 2, 1, CONV_ATTRS, _conv),
    "MaxPool2D": _sig(1, 1, 1, CONV_ATTRS, _pool),
    "Add": _sig(2, 2, 1, (), _same_all),
    "Mul": _sig(2, 2, 1, (), _same_all),
    "Scale": _sig(1, 1, 1, ("factor",), _same),
    "Transpose": _sig(1, 1, 1, ("perm",), _transpose),
    "Reshape": _sig(1, 1, 1, ("shape",), _reshape),
    "ReLU": _sig(1, 1, 1, (), _same),
    "GeLU": _sig(1, 1, 1, (), _same),
    "Softmax": _sig(1, 1, 1, ("axis",), _softmax),
    "LayerNorm": _sig(3, 3, 1, ("epsilon",), _layernorm),
    "Split": _sig(1, 1, None, ("axis", "sizes"), _split),
    "CrossEntropyLoss": _sig(2, 2, 1, (), _ce),
    "MseLoss": _sig(2, 2, 1, (), _loss),
    # training primitives
    "SgdUpdate": _sig(2, 2, 1, ("lr",), _pair_same),
    "Accumulate": _sig(2, None, 1, (), _same_all),
    "Concat": _sig(1, None, 1, ("axis", "sizes", "present"), _concat),
    "ReduceSum": _sig(1, 1, 1, ("axis",), _reduce),
    "ReLUGrad": _sig(2, 2, 1, (), _pair_same),
    "GeLUGrad": _sig(2, 2, 1, (), _pair_same),
    "SoftmaxGrad": _sig(2, 2, 1, ("axis",), _pair_same),
    "LayerNormGrad": _sig(3, 3, None, ("epsilon", "grad_input", "grad_params"), _ln_grad),
    "MaxPool2DGrad": _sig(2, 2, 1, CONV_ATTRS, _pool_grad),
    "Conv2DGradInput": _sig(2, 2, 1, CONV_ATTRS + ("input_h", "input_w"), _conv_grad_input),
    "Conv2DGradWeight": _sig(2, 2, 1, CONV_ATTRS, _conv_grad_weight),
    "CrossEntropyGrad": _sig(2, 2, 1, (), _pair_same),
    "MseGrad": _sig(2, 2, 1, (), _pair_same),
}

LOSS_OPS = ("CrossEntropyLoss", "MseLoss")
GEMM_LIKE = ("Gemm", "Conv2D", "Conv2DGradInput", "Conv2DGradWeight")


def output_count(op: str, attrs: dict) -> int:
    sig = OPS[op]
    if sig.n_outputs is not None:
        return sig.n_outputs
    if op == "Split":
        return len(attrs["sizes"])
    if op == "LayerNormGrad":
        return int(bool(attrs["grad_input"])) + 2 * int(bool(attrs["grad_params"]))
    raise AssertionError(op)


def check_node_signature(node: NodeSpec) -> None:
    sig = OPS.get(node.op)
    if sig is None:
        raise ValidationError(f"unknown op kind {node.op!r}", node.name)
    n_in = len(node.inputs)
    if n_in < sig.min_inputs or (sig.max_inputs is not None and n_in > sig.max_inputs):
        raise ValidationError(f"{node.op} takes {sig.min_inputs}..{sig.max_inputs} inputs, got {n_in}", node.name)
    keys = frozenset(node.attrs)
    if keys != sig.attrs:
        raise ValidationError(
            f"{node.op} attributes must be exactly {sorted(sig.attrs)}, got {sorted(keys)}", node.name
        )
    if len(node.outputs) != output_count(node.op, node.attrs):
        raise ValidationError(f"{node.op} produces {output_count(node.op, node.attrs)} outputs, got {len(node.outputs)}", node.name)


def node_output_shapes(node: NodeSpec, in_shapes: list[tuple[int, ...]]) -> list[tuple[int, ...]]:
    try:
        return [tuple(s) for s in OPS[node.op].shape_fn(in_shapes, node.attrs)]
    except ValueError as e:
        raise ValidationError(str(e), node.name) from None


# ---------------------------------------------------------------------------
# graph


@dataclass
class Graph:
    tensors: dict[str, TensorSpec]
    nodes: list[NodeSpec]
    inputs: list[str]
    outputs: list[str]
    loss: str | None = None
    initializers: dict[str, np.ndarray] = field(default_factory=dict)

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def producers(self) -> dict[str, NodeSpec]:
        return {t: n for n in self.nodes for t in n.outputs}

    def consumers(self) -> dict[str, list[NodeSpec]]:
        out: dict[str, list[NodeSpec]] = {t: [] for t in self.tensors}
        for n in self.nodes:
            for t in dict.fromkeys(n.inputs):
                out.setdefault(t, []).append(n)
        return out

    def params(self) -> list[TensorSpec]:
        """Initializer-backed weights and biases (updated copies are excluded)."""
        return [t for t in self.tensors.values() if t.is_param and t.name in self.initializers]

    def trainable(self) -> list[TensorSpec]:
        return [t for t in self.params() if t.trainable]

    def param_count(self) -> int:
        return sum(t.numel for t in self.params())

    def param_bytes(self) -> int:
        return sum(t.byte_size for t in self.params())

    def copy(self, **changes) -> "Graph":
        fields = dict(
            tensors=dict(self.tensors),
            nodes=list(self.nodes),
            inputs=list(self.inputs),
            outputs=list(self.outputs),
            loss=self.loss,
            initializers=dict(self.initializers),
        )
        fields.update(changes)
        return Graph(**fields)

    def with_trainable(self, names: Iterable[str], trainable: bool = True) -> "Graph":
        tensors = dict(self.tensors)
        for n in names:
            t = tensors[n]
            if not t.is_param:
                raise ValidationError(f"{n!r} is not a weight or bias")
            tensors[n] = replace(t, trainable=trainable)
        return self.copy(tensors=tensors)

    def astype(self, dtype: str) -> "Graph":
        """Return a copy with every tensor (and initializer) cast to ``dtype``."""
        tensors = {k: replace(t, dtype=dtype) for k, t in self.tensors.items()}
        inits = {k: v.astype(NUMPY_DTYPE[dtype]) for k, v in self.initializers.items()}
        return self.copy(tensors=tensors, initializers=inits)


def validate(g: Graph) -> None:
    """Check structural invariants. Shapes are checked by :func:`infer_shapes`."""
    for name, t in g.tensors.items():
        if name != t.name:
            raise ValidationError(f"tensor key {name!r} != spec name {t.name!r}")
        if t.dtype not in DTYPE_WIDTH:
            raise ValidationError(f"tensor {name!r}: unknown dtype {t.dtype!r}")
        if t.kind not in TENSOR_KINDS:
            raise ValidationError(f"tensor {name!r}: unknown kind {t.kind!r}")
        if t.shape is not None and any((not isinstance(d, int)) or d <= 0 for d in t.shape):
            raise ValidationError(f"tensor {name!r}: dims must be positive integers, got {t.shape}")
        if t.kind == "gradient":
            if t.grad_of is None or t.grad_of not in g.tensors:
                raise ValidationError(f"gradient tensor {name!r} lacks a valid grad_of reference")
            if g.tensors[t.grad_of].kind == "gradient":
                raise ValidationError(f"gradient tensor {name!r} refers to another gradient")
    names = set()
    produced: dict[str, str] = {}
    for n in g.nodes:
        if n.name in names:
            raise ValidationError("duplicate node name", n.name)
        names.add(n.name)
        check_node_signature(n)
        for t in n.inputs + n.outputs:
            if t not in g.tensors:
                raise ValidationError(f"dangling tensor reference {t!r}", n.name)
        for t in n.outputs:
            if t in produced:
                raise ValidationError(f"tensor {t!r} already produced by {produced[t]!r}", n.name)
            if t in g.initializers or t in g.inputs:
                raise ValidationError(f"node overwrites graph input/initializer {t!r}", n.name)
            produced[t] = n.name
    for t in g.inputs + g.outputs:
        if t not in g.tensors:
            raise ValidationError(f"dangling graph input/output {t!r}")
    for t, arr in g.initializers.items():
        if t not in g.tensors:
            raise ValidationError(f"initializer {t!r} has no tensor spec")
    for n in g.nodes:
        for t in n.inputs:
            if t not in produced and t not in g.inputs and t not in g.initializers:
                raise ValidationError(f"input {t!r} is neither a graph input, an initializer nor produced", n.name)
    if g.loss is not None:
        if g.loss not in g.tensors:
            raise ValidationError(f"loss tensor {g.loss!r} missing")
        if g.loss in g.tensors and g.tensors[g.loss].shape not in (None, (1,)):
            raise ValidationError(f"loss tensor {g.loss!r} is not scalar")
    topo_schedule(g)


def infer_shapes(g: Graph) -> Graph:
    """Propagate shapes through the graph in schedule order.

    Declared shapes are checked against inferred ones. Idempotent.
    """
    tensors = dict(g.tensors)
    for t in list(g.inputs) + list(g.initializers):
        if tensors[t].shape is None:
            raise ValidationError(f"graph input/initializer {t!r} needs a concrete shape")
    for t, arr in g.initializers.items():
        if tuple(arr.shape) != tensors[t].shape:
            raise ValidationError(f"initializer {t!r} data shape {arr.shape} != declared {tensors[t].shape}")
    for n in topo_schedule(g):
        in_shapes = []
        for t in n.inputs:
            s = tensors[t].shape
            if s is None:
                raise ValidationError(f"input {t!r} has no shape", n.name)
            in_shapes.append(s)
        for t, s in zip(n.outputs, node_output_shapes(n, in_shapes)):
            old = tensors[t]
            if old.shape is not None and old.shape != s:
                raise ValidationError(f"declared shape {list(old.shape)} of {t!r} != inferred {list(s)}", n.name)
            tensors[t] = replace(old, shape=s)
    for t in tensors.values():
        if t.shape is None:
            raise ValidationError(f"tensor {t.name!r} is unreachable; shape unknown")
        if t.kind == "gradient" and tensors[t.grad_of].shape != t.shape:
            raise ValidationError(f"gradient {t.name!r} shape {t.shape} != {t.grad_of!r} shape {tensors[t.grad_of].shape}")
    return g.copy(tensors=tensors)


def topo_schedule(g: Graph) -> list[NodeSpec]:
    """Kahn's algorithm; ready nodes are released in lexicographic name order."""
    producer = {t: n.name for n in g.nodes for t in n.outputs}
    by_name = {n.name: n for n in g.nodes}
    deps: dict[str, set[str]] = {}
    users: dict[str, list[str]] = {n.name: [] for n in g.nodes}
    for n in g.nodes:
        d = {producer[t] for t in n.inputs if t in producer}
        deps[n.name] = d
        for p in d:
            users[p].append(n.name)
    indeg = {k: len(v) for k, v in deps.items()}
    ready = [k for k, v in indeg.items() if v == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        k = heapq.heappop(ready)
        order.append(by_name[k])
        for u in users[k]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(g.nodes):
        remaining = {k for k, v in indeg.items() if v > 0}
        raise CycleError(_find_cycle(remaining, deps))
    return order


def _find_cycle(remaining: set[str], deps: dict[str, set[str]]) -> list[str]:
    start = min(remaining)
    path, seen = [start], {start: 0}
    cur = start
    while True:
        nxt = min(d for d in deps[cur] if d in remaining)
        if nxt in seen:
            cyc = path[seen[nxt]:]
            return cyc[::-1]
        seen[nxt] = len(path)
        path.append(nxt)
        cur = nxt


def check_schedule(g: Graph, schedule: list[NodeSpec]) -> None:
    """Raise if some node runs before a producer of one of its inputs."""
    available = set(g.inputs) | set(g.initializers)
    if sorted(n.name for n in schedule) != sorted(n.name for n in g.nodes):
        raise ValidationError("schedule does not cover exactly the graph's nodes")
    for n in schedule:
        for t in n.inputs:
            if t not in available:
                raise ValidationError(f"input {t!r} used before it is defined", n.name)
        available.update(n.outputs)


# ---------------------------------------------------------------------------
# serialization


def serialize_graph(g: Graph) -> tuple[str, bytes]:
    """Return ``(json_text, blob)``. Deterministic byte-for-byte."""
    tensors = {}
    for name, t in g.tensors.items():
        d: dict[str, Any] = {
            "shape": list(t.shape) if t.shape is not None else None,
            "dtype": t.dtype,
            "kind": t.kind,
        }
        if t.is_param:
            d["trainable"] = t.trainable
        if t.grad_of is not None:
            d["grad_of"] = t.grad_of
        tensors[name] = d
    nodes = [
        {
            "name": n.name,
            "op": n.op,
            "attrs": {k: _jsonable(v) for k, v in sorted(n.attrs.items())},
            "inputs": list(n.inputs),
            "outputs": list(n.outputs),
        }
        for n in g.nodes
    ]
    chunks, index, offset = [], {}, 0
    for name in g.initializers:
        arr = np.ascontiguousarray(g.initializers[name], dtype=NUMPY_DTYPE[g.tensors[name].dtype])
        raw = arr.tobytes(order="C")
        index[name] = {"offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tensors": tensors,
        "nodes": nodes,
        "inputs": list(g.inputs),
        "outputs": list(g.outputs),
        "loss": g.loss,
        "initializers": index,
    }
    return json.dumps(doc, indent=1) + "\n", b"".join(chunks)


def _jsonable(v):
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ParseError(path, msg)


def parse_graph(ir_text: str, blobs: bytes) -> Graph:
    try:
        doc = json.loads(ir_text)
    except json.JSONDecodeError as e:
        raise ParseError("$", f"invalid JSON: {e}") from None
    _expect(isinstance(doc, dict), "$", "top level must be an object")
    for key in ("tensors", "nodes", "inputs", "outputs", "loss", "initializers"):
        _expect(key in doc, f"$.{key}", "missing required key")
    _expect(isinstance(doc["tensors"], dict), "$.tensors", "must be an object")
    tensors = {}
    for name, d in doc["tensors"].items():
        p = f"$.tensors.{name}"
        _expect(isinstance(d, dict), p, "must be an object")
        shape = d.get("shape")
        _expect(shape is None or (isinstance(shape, list) and all(isinstance(x, int) for x in shape)),
                f"{p}.shape", "must be a list of integers or null")
        _expect(d.get("dtype") in DTYPE_WIDTH, f"{p}.dtype", f"must be one of {sorted(DTYPE_WIDTH)}")
        _expect(d.get("kind") in TENSOR_KINDS, f"{p}.kind", f"must be one of {list(TENSOR_KINDS)}")
        _expect(isinstance(d.get("trainable", False), bool), f"{p}.trainable", "must be a boolean")
        tensors[name] = TensorSpec(
            name=name,
            shape=tuple(shape) if shape is not None else None,
            dtype=d["dtype"],
            kind=d["kind"],
            trainable=bool(d.get("trainable", False)),
            grad_of=d.get("grad_of"),
        )
    _expect(isinstance(doc["nodes"], list), "$.nodes", "must be a list")
    nodes = []
    for i, d in enumerate(doc["nodes"]):
        p = f"$.nodes[{i}]"
        _expect(isinstance(d, dict), p, "must be an object")
        for key in ("name", "op", "inputs", "outputs"):
            _expect(key in d, f"{p}.{key}", "missing required key")
        _expect(d["op"] in OPS, f"{p}.op", f"unknown op kind {d['op']!r}")
        for key in ("inputs", "outputs"):
            _expect(isinstance(d[key], list) and all(isinstance(x, str) for x in d[key]),
                    f"{p}.{key}", "must be a list of tensor names")
        attrs = d.get("attrs", {})
        _expect(isinstance(attrs, dict), f"{p}.attrs", "must be an object")
        nodes.append(NodeSpec(d["name"], d["op"], tuple(d["inputs"]), tuple(d["outputs"]), dict(attrs)))
    for key in ("inputs", "outputs"):
        _expect(isinstance(doc[key], list), f"$.{key}", "must be a list")
    _expect(doc["loss"] is None or isinstance(doc["loss"], str), "$.loss", "must be a string or null")
    _expect(isinstance(doc["initializers"], dict), "$.initializers", "must be an object")
    inits = {}
    for name, ref in doc["initializers"].items():
        p = f"$.initializers.{name}"
        if name not in tensors:
            raise ValidationError(f"unresolved initializer {name!r}: no tensor spec")
        _expect(isinstance(ref, dict) and "offset" in ref and "length" in ref, p, "needs offset and length")
        spec = tensors[name]
        off, length = ref["offset"], ref["length"]
        if off < 0 or off + length > len(blobs):
            raise ValidationError(f"unresolved initializer {name!r}: blob range [{off}, {off + length}) outside store")
        if spec.shape is None or length != spec.byte_size:
            raise ValidationError(f"unresolved initializer {name!r}: blob length {length} != expected bytes")
        arr = np.frombuffer(blobs, dtype=NUMPY_DTYPE[spec.dtype], count=spec.numel, offset=off)
        inits[name] = arr.reshape(spec.shape).copy()
    g = Graph(tensors, nodes, list(doc["inputs"]), list(doc["outputs"]), doc["loss"], inits)
    for n in g.nodes:
        for t in n.inputs:
            if t in g.tensors and g.tensors[t].is_param and t not in g.initializers:
                raise ValidationError(f"unresolved initializer {t!r}", n.name)
    validate(g)
    return infer_shapes(g)


def structurally_equal(a: Graph, b: Graph) -> bool:
    if a.tensors != b.tensors or a.nodes != b.nodes:
        return False
    if a.inputs != b.inputs or a.outputs != b.outputs or a.loss != b.loss:
        return False
    if list(a.initializers) != list(b.initializers):
        return False
    return all(
        a.initializers[k].dtype == b.initializers[k].dtype
        and a.initializers[k].shape == b.initializers[k].shape
        and a.initializers[k].tobytes() == b.initializers[k].tobytes()
        for k in a.initializers
    )
