"""Static reverse-mode differentiation of forward graphs.

:func:`build_training_graph` walks the forward schedule backwards from the loss,
expands every node through its gradient rule and finally appends one
``SgdUpdate`` node per trainable tensor. The result is an ordinary
:class:`~edgetrain.ir.Graph` whose node list is already in execution order.

Which tensors receive gradients
-------------------------------
Gradients flow to every tensor that depends on a trainable parameter, and to
the activation inputs of every GEMM or convolution that consumes a trainable
parameter directly. Nothing below the deepest trainable layer is differentiated, so a
frozen tokenizer costs no backward work. A single trainable ``Gemm`` therefore
yields exactly two backward GEMMs, while a trainable LayerNorm affine pair
adds no input gradient of its own (so FT-k and LoRA-k differentiate the same
activations).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .ir import (
    GEMM_LIKE,
    LOSS_OPS,
    Graph,
    NodeSpec,
    TensorSpec,
    ValidationError,
    check_schedule,
    infer_shapes,
    node_output_shapes,
    topo_schedule,
    validate,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 1
    loss: str = "cross-entropy"
    optimizer: str = "sgd"
    update_placement: str = "end"  # "end": after the backward pass; "eager": right after the last read

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError("learning rate must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("batch size must be positive")
        if self.optimizer != "sgd":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss not in ("cross-entropy", "mse"):
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if self.update_placement not in ("eager", "end"):
            raise ConfigError(f"unknown update placement {self.update_placement!r}")


@dataclass
class TrainingGraph:
    graph: Graph  # node list is in schedule order
    forward_count: int
    backward_count: int
    update_count: int
    grads: dict[str, str]  # param -> final gradient tensor
    updated: dict[str, str] = field(default_factory=dict)  # param -> updated value tensor

    @property
    def schedule(self) -> list[NodeSpec]:
        return self.graph.nodes

    def forward(self) -> list[NodeSpec]:
        return self.schedule[: self.forward_count]

    def backward(self) -> list[NodeSpec]:
        return [n for n in self.schedule[self.forward_count:] if n.op != "SgdUpdate"]

    def updates(self) -> list[NodeSpec]:
        return [n for n in self.schedule if n.op == "SgdUpdate"]

    @classmethod
    def from_graph(cls, g: Graph) -> "TrainingGraph":
        """Recover the training view of a deserialized training graph."""
        check_schedule(g, g.nodes)
        fwd = forward_nodes(g, g.nodes)
        if g.nodes[: len(fwd)] != fwd:
            raise ValidationError("forward nodes must precede backward nodes in a training graph")
        grads, updated = {}, {}
        for n in g.nodes:
            if n.op == "SgdUpdate":
                grads[n.inputs[0]] = n.inputs[1]
                updated[n.inputs[0]] = n.outputs[0]
        n_upd = len(updated)
        return cls(g, len(fwd), len(g.nodes) - len(fwd) - n_upd, n_upd, grads, updated)


def is_backward_node(g: Graph, node: NodeSpec) -> bool:
    return node.op == "SgdUpdate" or any(g.tensors[t].kind == "gradient" for t in node.outputs)


def forward_nodes(g: Graph, schedule: list[NodeSpec]) -> list[NodeSpec]:
    return [n for n in schedule if not is_backward_node(g, n)]


# ---------------------------------------------------------------------------
# rule infrastructure


class _Emitter:
    def __init__(self, g: Graph):
        self.g = g
        self.tensors = dict(g.tensors)
        self.nodes: list[NodeSpec] = []
        self._counter: dict[str, int] = {}

    def _name(self, base: str) -> str:
        i = self._counter.get(base, 0)
        self._counter[base] = i + 1
        return base if i == 0 else f"{base}#{i}"

    def emit(self, fwd: str, tag: str, op: str, inputs, attrs, grad_of) -> list[str]:
        """Emit a backward node; ``grad_of`` lists the tensor each output differentiates."""
        node_name = self._name(f"bwd:{fwd}:{tag}")
        outs = [self._name(f"grad:{of}@{fwd}") for of in grad_of]
        node = NodeSpec(node_name, op, tuple(inputs), tuple(outs), dict(attrs))
        shapes = node_output_shapes(node, [self.tensors[t].shape for t in inputs])
        for t, of, s in zip(outs, grad_of, shapes):
            ref = self.tensors[of]
            if s != ref.shape:
                raise ValidationError(f"gradient of {of!r} has shape {s}, expected {ref.shape}", node_name)
            self.tensors[t] = TensorSpec(t, s, ref.dtype, "gradient", grad_of=of)
        self.nodes.append(node)
        return outs

    def accumulate(self, tensor: str, parts: list[str]) -> str:
        node_name = self._name(f"bwd:accumulate:{tensor}")
        out = self._name(f"grad:{tensor}")
        ref = self.tensors[tensor]
        self.tensors[out] = TensorSpec(out, ref.shape, ref.dtype, "gradient", grad_of=tensor)
        self.nodes.append(NodeSpec(node_name, "Accumulate", tuple(parts), (out,), {}))
        return out


Rule = Callable[[_Emitter, NodeSpec, list, list], dict]
RULES: dict[str, Rule] = {}


def rule(*ops):
    def deco(fn):
        for op in ops:
            RULES[op] = fn
        return fn

    return deco


def gemm_grad_specs(trans_a: int, trans_b: int):
    """Backward GEMMs for ``Y = op(A) op(B)``: (operands, transA, transB) for dA and dB.

    Operands are symbolic: ``"A"``, ``"B"`` or ``"G"`` (the upstream gradient).
    """
    table = {
        (0, 0): ((("G", "B"), 0, 1), (("A", "G"), 1, 0)),
        (0, 1): ((("G", "B"), 0, 0), (("G", "A"), 1, 0)),
        (1, 0): ((("B", "G"), 0, 1), (("A", "G"), 0, 0)),
        (1, 1): ((("B", "G"), 1, 1), (("G", "A"), 1, 1)),
    }
    return table[(int(trans_a), int(trans_b))]


@rule("Gemm")
def _gemm_rule(em, node, gy, need):
    g = gy[0]
    sym = {"A": node.inputs[0], "B": node.inputs[1], "G": g}
    spec_a, spec_b = gemm_grad_specs(node.attrs["transA"], node.attrs["transB"])
    out = {}
    for idx, (ops, ta, tb), tag in ((0, spec_a, "dA"), (1, spec_b, "dB")):
        if need[idx]:
            (t,) = em.emit(node.name, tag, "Gemm", [sym[o] for o in ops], {"transA": ta, "transB": tb},
                           [node.inputs[idx]])
            out[idx] = t
    if len(node.inputs) == 3 and need[2]:
        (t,) = em.emit(node.name, "dC", "ReduceSum", [g], {"axis": 0}, [node.inputs[2]])
        out[2] = t
    return out


def gemm_backward(node: NodeSpec, delta: str, grad_a: bool = True, grad_b: bool = True,
                  graph: Graph | None = None, grad_bias: bool = False) -> tuple[list[NodeSpec], dict[int, str]]:
    """Backward nodes of a single Gemm given the upstream gradient tensor ``delta``.

    Returns the emitted nodes and a map from input position to gradient tensor.
    ``graph`` must contain the forward node's tensors and ``delta``.
    """
    if graph is None:
        raise ValidationError("gemm_backward needs the graph holding the operand specs", node.name)
    y = graph.tensors[node.outputs[0]]
    if graph.tensors[delta].shape != y.shape:
        raise ValidationError(f"upstream gradient shape {graph.tensors[delta].shape} != output {y.shape}", node.name)
    em = _Emitter(graph)
    need = [grad_a, grad_b, grad_bias]
    out = _gemm_rule(em, node, [delta], need[: len(node.inputs)])
    return em.nodes, out


@rule("Conv2D")
def _conv_rule(em, node, gy, need):
    x, w = node.inputs
    a = {k: node.attrs[k] for k in ("kernel", "stride", "padding")}
    out = {}
    if need[0]:
        shape = em.tensors[x].shape
        (out[0],) = em.emit(node.name, "dX", "Conv2DGradInput", [w, gy[0]],
                            {**a, "input_h": shape[2], "input_w": shape[3]}, [x])
    if need[1]:
        (out[1],) = em.emit(node.name, "dW", "Conv2DGradWeight", [x, gy[0]], a, [w])
    return out


@rule("MaxPool2D")
def _pool_rule(em, node, gy, need):
    (t,) = em.emit(node.name, "dX", "MaxPool2DGrad", [node.inputs[0], gy[0]], dict(node.attrs), [node.inputs[0]])
    return {0: t}


@rule("Add")
def _add_rule(em, node, gy, need):
    return {i: gy[0] for i in (0, 1) if need[i]}


@rule("Mul")
def _mul_rule(em, node, gy, need):
    a, b = node.inputs
    out = {}
    if need[0]:
        (out[0],) = em.emit(node.name, "dA", "Mul", [gy[0], b], {}, [a])
    if need[1]:
        (out[1],) = em.emit(node.name, "dB", "Mul", [gy[0], a], {}, [b])
    return out


@rule("Scale")
def _scale_rule(em, node, gy, need):
    (t,) = em.emit(node.name, "dX", "Scale", [gy[0]], dict(node.attrs), [node.inputs[0]])
    return {0: t}


@rule("Transpose")
def _transpose_rule(em, node, gy, need):
    perm = list(node.attrs["perm"])
    inv = [perm.index(i) for i in range(len(perm))]
    (t,) = em.emit(node.name, "dX", "Transpose", [gy[0]], {"perm": inv}, [node.inputs[0]])
    return {0: t}


@rule("Reshape")
def _reshape_rule(em, node, gy, need):
    shape = list(em.tensors[node.inputs[0]].shape)
    (t,) = em.emit(node.name, "dX", "Reshape", [gy[0]], {"shape": shape}, [node.inputs[0]])
    return {0: t}


@rule("ReLU", "GeLU")
def _act_rule(em, node, gy, need):
    (t,) = em.emit(node.name, "dX", node.op + "Grad", [node.inputs[0], gy[0]], {}, [node.inputs[0]])
    return {0: t}


@rule("Softmax")
def _softmax_rule(em, node, gy, need):
    (t,) = em.emit(node.name, "dX", "SoftmaxGrad", [node.outputs[0], gy[0]], dict(node.attrs), [node.inputs[0]])
    return {0: t}


@rule("LayerNorm")
def _layernorm_rule(em, node, gy, need):
    x, gamma, beta = node.inputs
    gi, gp = bool(need[0]), bool(need[1] or need[2])
    targets = ([x] if gi else []) + ([gamma, beta] if gp else [])
    outs = em.emit(node.name, "dX", "LayerNormGrad", [x, gamma, gy[0]],
                   {"epsilon": node.attrs["epsilon"], "grad_input": int(gi), "grad_params": int(gp)}, targets)
    res = {}
    it = iter(outs)
    if gi:
        res[0] = next(it)
    if gp:
        dg, db = next(it), next(it)
        if need[1]:
            res[1] = dg
        if need[2]:
            res[2] = db
    return res


@rule("Split")
def _split_rule(em, node, gy, need):
    present = [int(t is not None) for t in gy]
    (t,) = em.emit(node.name, "dX", "Concat", [t for t in gy if t is not None],
                   {"axis": node.attrs["axis"], "sizes": list(node.attrs["sizes"]), "present": present},
                   [node.inputs[0]])
    return {0: t}


def _loss_rule(em, node, need):
    pred, target = node.inputs
    out = {}
    op = "CrossEntropyGrad" if node.op == "CrossEntropyLoss" else "MseGrad"
    (dp,) = em.emit(node.name, "dX", op, [pred, target], {}, [pred])
    if need[0]:
        out[0] = dp
    if need[1]:
        if node.op != "MseLoss":
            raise ValidationError("cannot differentiate cross-entropy w.r.t. its labels", node.name)
        (out[1],) = em.emit(node.name, "dT", "Scale", [dp], {"factor": -1.0}, [target])
    return out


def softmax_backward(delta, y, axis: int = -1):
    """Numeric form of the softmax rule: ``(delta - rowsum(delta * y)) * y``."""
    from .interp import softmax_grad

    if delta.shape != y.shape:
        raise ValidationError(f"softmax gradient shape mismatch {delta.shape} vs {y.shape}")
    return softmax_grad(y, delta, axis)


# ---------------------------------------------------------------------------
# training graph construction


def gradient_targets(g: Graph, schedule: list[NodeSpec]) -> set[str]:
    """Tensors that receive a gradient (see module docstring)."""
    trainable = {t.name for t in g.trainable() if t.name in g.initializers}
    need = set(trainable)
    for n in schedule:
        if n.op in GEMM_LIKE and any(t in trainable for t in n.inputs):
            need.update(t for t in n.inputs if g.tensors[t].kind in ("input", "activation"))
    for n in schedule:
        if any(t in need for t in n.inputs):
            need.update(n.outputs)
    # only tensors that influence the loss
    reaches = {g.loss}
    for n in reversed(schedule):
        if any(t in reaches for t in n.outputs):
            reaches.update(n.inputs)
    dead = trainable - reaches
    if dead:
        raise ValidationError(f"trainable tensors do not influence the loss: {sorted(dead)}")
    return need & reaches


def build_training_graph(g: Graph, cfg: TrainConfig = TrainConfig()) -> TrainingGraph:
    cfg.validate()
    if g.loss is None:
        raise ConfigError("graph has no loss tensor; attach a loss before differentiating")
    validate(g)
    g = infer_shapes(g)
    schedule = topo_schedule(g)
    if any(is_backward_node(g, n) for n in schedule):
        raise ValidationError("graph already contains backward nodes")
    for n in schedule:
        if n.op not in RULES and n.op not in LOSS_OPS:
            raise ValidationError(f"non-differentiable operator {n.op!r}", n.name)
    producers = {t: n for n in schedule for t in n.outputs}
    loss_node = producers.get(g.loss)
    if loss_node is None or loss_node.op not in LOSS_OPS:
        raise ConfigError(f"loss tensor {g.loss!r} must be produced by a loss operator")

    need = gradient_targets(g, schedule)
    em = _Emitter(g)
    contribs: dict[str, list[str]] = {}
    final: dict[str, str] = {}
    trainable = [t.name for t in g.trainable() if t.name in g.initializers]
    pending = {p: sum(p in n.inputs for n in schedule) for p in trainable}

    def add(t, gname):
        contribs.setdefault(t, []).append(gname)

    def finalize(t):
        if t in final:
            return final[t]
        parts = contribs.get(t, [])
        if not parts:
            final[t] = None
        elif len(parts) == 1:
            final[t] = parts[0]
        else:
            final[t] = em.accumulate(t, parts)
        return final[t]

    for node in reversed(schedule):
        need_in = [t in need for t in node.inputs]
        if node is loss_node:
            if any(need_in):
                for i, t in _loss_rule(em, node, need_in).items():
                    add(node.inputs[i], t)
        else:
            gy = [finalize(t) if t in need else None for t in node.outputs]
            if any(x is not None for x in gy) and any(need_in):
                for i, t in RULES[node.op](em, node, gy, need_in).items():
                    add(node.inputs[i], t)
        for p in set(node.inputs):
            if p in pending:
                pending[p] -= 1
                if pending[p] == 0:
                    finalize(p)

    grads = {}
    for p in trainable:
        gp = finalize(p)
        if gp is None:
            raise ValidationError(f"trainable tensor {p!r} received no gradient")
        grads[p] = gp

    n_fwd = len(schedule)
    bwd = em.nodes
    graph = g.copy(tensors=em.tensors, nodes=list(schedule) + bwd)
    tg = TrainingGraph(graph, n_fwd, len(bwd), 0, grads, {})
    return append_sgd_updates(tg, cfg.learning_rate, cfg.update_placement)


def append_sgd_updates(tg: TrainingGraph, lr: float, placement: str = "end") -> TrainingGraph:
    """Insert ``w <- w - lr * g`` for every trainable tensor.

    With ``placement="eager"`` each update runs directly after the last node that
    reads ``w`` or produces its gradient, so gradients are released early.
    """
    g = tg.graph
    if tg.updated:
        raise ValidationError("training graph already has update nodes")
    trainable = [t.name for t in g.trainable() if t.name in g.initializers]
    missing = [p for p in trainable if p not in tg.grads]
    if missing:
        raise ValidationError(f"internal invariant: trainable tensors without gradient: {missing}")
    tensors = dict(g.tensors)
    updates: dict[int, list[NodeSpec]] = {}
    updated = {}
    nodes = list(g.nodes)
    for p in trainable:
        gname = tg.grads[p]
        out = f"{p}.updated"
        spec = tensors[p]
        tensors[out] = TensorSpec(out, spec.shape, spec.dtype, spec.kind, False)
        node = NodeSpec(f"sgd:{p}", "SgdUpdate", (p, gname), (out,), {"lr": float(lr)})
        if placement == "eager":
            last = max(i for i, n in enumerate(nodes) if p in n.inputs or gname in n.outputs)
        else:
            last = len(nodes) - 1
        updates.setdefault(last, []).append(node)
        updated[p] = out
    ordered = []
    for i, n in enumerate(nodes):
        ordered.append(n)
        ordered.extend(updates.get(i, []))
    graph = g.copy(tensors=tensors, nodes=ordered)
    check_schedule(graph, ordered)
    return TrainingGraph(graph, tg.forward_count, tg.backward_count, len(updated), dict(tg.grads), updated)
