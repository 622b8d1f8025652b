"""Constructors for the evaluation networks and small test graphs.

Naming convention (relied on by :mod:`edgetrain.peft`):

* tokenizer layers: ``tokenizer.conv{i}``
* encoder blocks: ``blocks.{i}.{ln1,attn.qkv,attn.proj,ln2,mlp.fc1,mlp.fc2}``
* pooling / classifier: ``norm``, ``seqpool.score``, ``head``

Every linear layer stores its weight as ``[out_features, in_features]`` and is
emitted as ``Gemm(x, W, b, transB=1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ir import NUMPY_DTYPE, Graph, NodeSpec, TensorSpec, infer_shapes, node_output_shapes, validate


class ConfigError(ValueError):
    pass


class GraphBuilder:
    """Incremental graph construction with eager shape inference."""

    def __init__(self, dtype: str = "FP32", seed: int = 0):
        self.dtype = dtype
        self.rng = np.random.default_rng(seed)
        self.tensors: dict[str, TensorSpec] = {}
        self.nodes: list[NodeSpec] = []
        self.inputs: list[str] = []
        self.inits: dict[str, np.ndarray] = {}

    def _add_tensor(self, spec: TensorSpec) -> str:
        if spec.name in self.tensors:
            raise ConfigError(f"duplicate tensor name {spec.name!r}")
        self.tensors[spec.name] = spec
        return spec.name

    def input(self, name: str, shape, kind: str = "input") -> str:
        self.inputs.append(name)
        return self._add_tensor(TensorSpec(name, tuple(shape), self.dtype, kind))

    def param(self, name: str, value: np.ndarray, kind: str = "weight", trainable: bool = True) -> str:
        value = np.asarray(value, dtype=NUMPY_DTYPE[self.dtype])
        self.inits[name] = value
        return self._add_tensor(TensorSpec(name, tuple(value.shape), self.dtype, kind, trainable))

    def uniform(self, shape, bound: float) -> np.ndarray:
        return self.rng.uniform(-bound, bound, size=shape)

    def op(self, op: str, inputs, name: str, attrs: dict | None = None, n_out: int = 1):
        """Add a node; returns the output tensor name (or a list if ``n_out > 1``)."""
        outs = [name] if n_out == 1 else [f"{name}:{i}" for i in range(n_out)]
        node = NodeSpec(name, op, tuple(inputs), tuple(outs), dict(attrs or {}))
        shapes = node_output_shapes(node, [self.tensors[t].shape for t in inputs])
        for t, s in zip(outs, shapes):
            self._add_tensor(TensorSpec(t, s, self.dtype, "activation"))
        self.nodes.append(node)
        return outs[0] if n_out == 1 else outs

    def linear(self, x: str, name: str, in_f: int, out_f: int, bias: bool = True) -> str:
        bound = 1.0 / math.sqrt(in_f)
        w = self.param(f"{name}.weight", self.uniform((out_f, in_f), bound))
        ins = [x, w]
        if bias:
            ins.append(self.param(f"{name}.bias", self.uniform((out_f,), bound), kind="bias"))
        return self.op("Gemm", ins, name, {"transA": 0, "transB": 1})

    def layernorm(self, x: str, name: str, dim: int, eps: float = 1e-5) -> str:
        g = self.param(f"{name}.weight", np.ones(dim))
        b = self.param(f"{name}.bias", np.zeros(dim), kind="bias")
        return self.op("LayerNorm", [x, g, b], name, {"epsilon": eps})

    def build(self, outputs, loss: str | None = None) -> Graph:
        g = Graph(dict(self.tensors), list(self.nodes), list(self.inputs), list(outputs), loss, dict(self.inits))
        validate(g)
        return infer_shapes(g)


def attach_cross_entropy(b: GraphBuilder, logits: str, classes: int, batch: int) -> str:
    labels = b.input("labels", (batch, classes))
    return b.op("CrossEntropyLoss", [logits, labels], "loss")


# ---------------------------------------------------------------------------
# CCT


@dataclass(frozen=True)
class CctConfig:
    image_size: int = 32
    in_channels: int = 3
    conv_channels: tuple[int, ...] = (64, 128)
    kernel: int = 3
    embed_dim: int = 128
    heads: int = 2
    blocks: int = 2
    mlp_hidden: int = 128
    classes: int = 10
    seed: int = 0
    dtype: str = "FP32"

    def validate(self) -> None:
        ints = (self.image_size, self.in_channels, self.kernel, self.embed_dim, self.heads,
                self.blocks, self.mlp_hidden, self.classes)
        if min(ints) <= 0 or not self.conv_channels or min(self.conv_channels) <= 0:
            raise ConfigError("CCT config fields must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.conv_channels[-1] != self.embed_dim:
            raise ConfigError("last tokenizer conv must produce embed_dim channels")

    @property
    def tokens(self) -> int:
        side = self.image_size
        for _ in self.conv_channels:
            side = (side + 2 - 3) // 2 + 1  # 3x3 max-pool, stride 2, pad 1
        return side * side


def build_cct(cfg: CctConfig = CctConfig()) -> Graph:
    """Compact Convolutional Transformer with attention-based sequence pooling.

    Batch size is fixed to 1: the token matrix is kept 2-D (``[tokens, dim]``).
    """
    cfg.validate()
    b = GraphBuilder(cfg.dtype, cfg.seed)
    d, h = cfg.embed_dim, cfg.heads
    dh = d // h
    x = b.input("image", (1, cfg.in_channels, cfg.image_size, cfg.image_size))
    c_in = cfg.in_channels
    for i, c_out in enumerate(cfg.conv_channels):
        k = cfg.kernel
        w = b.param(f"tokenizer.conv{i}.weight", b.uniform((c_out, c_in, k, k), 1.0 / math.sqrt(c_in * k * k)))
        x = b.op("Conv2D", [x, w], f"tokenizer.conv{i}", {"kernel": k, "stride": 1, "padding": k // 2})
        x = b.op("ReLU", [x], f"tokenizer.relu{i}")
        x = b.op("MaxPool2D", [x], f"tokenizer.pool{i}", {"kernel": 3, "stride": 2, "padding": 1})
        c_in = c_out
    n = cfg.tokens
    x = b.op("Reshape", [x], "tokenizer.flatten", {"shape": [d, n]})
    x = b.op("Transpose", [x], "tokenizer.tokens", {"perm": [1, 0]})

    for i in range(cfg.blocks):
        p = f"blocks.{i}"
        y = b.layernorm(x, f"{p}.ln1", d)
        qkv = b.linear(y, f"{p}.attn.qkv", d, 3 * d)
        parts = b.op("Split", [qkv], f"{p}.attn.split", {"axis": 1, "sizes": [d, d, d]}, n_out=3)
        heads = []
        for nm, t in zip("qkv", parts):
            t = b.op("Reshape", [t], f"{p}.attn.{nm}_heads", {"shape": [n, h, dh]})
            heads.append(b.op("Transpose", [t], f"{p}.attn.{nm}_t", {"perm": [1, 0, 2]}))
        q, k_, v = heads
        s = b.op("Gemm", [q, k_], f"{p}.attn.scores", {"transA": 0, "transB": 1})
        s = b.op("Scale", [s], f"{p}.attn.scale", {"factor": 1.0 / math.sqrt(dh)})
        a = b.op("Softmax", [s], f"{p}.attn.softmax", {"axis": -1})
        ctx = b.op("Gemm", [a, v], f"{p}.attn.context", {"transA": 0, "transB": 0})
        ctx = b.op("Transpose", [ctx], f"{p}.attn.merge_t", {"perm": [1, 0, 2]})
        ctx = b.op("Reshape", [ctx], f"{p}.attn.merge", {"shape": [n, d]})
        o = b.linear(ctx, f"{p}.attn.proj", d, d)
        x = b.op("Add", [x, o], f"{p}.residual1")
        y = b.layernorm(x, f"{p}.ln2", d)
        y = b.linear(y, f"{p}.mlp.fc1", d, cfg.mlp_hidden)
        y = b.op("GeLU", [y], f"{p}.mlp.gelu")
        y = b.linear(y, f"{p}.mlp.fc2", cfg.mlp_hidden, d)
        x = b.op("Add", [x, y], f"{p}.residual2")

    x = b.layernorm(x, "norm", d)
    s = b.linear(x, "seqpool.score", d, 1)
    s = b.op("Transpose", [s], "seqpool.score_t", {"perm": [1, 0]})
    w = b.op("Softmax", [s], "seqpool.softmax", {"axis": -1})
    pooled = b.op("Gemm", [w, x], "seqpool.pool", {"transA": 0, "transB": 0})
    logits = b.linear(pooled, "head", d, cfg.classes)
    loss = attach_cross_entropy(b, logits, cfg.classes, 1)
    return b.build([logits, loss], loss)


def tiny_cct_config(**overrides) -> CctConfig:
    """A transformer small enough for exhaustive numeric tests."""
    base = dict(image_size=8, in_channels=2, conv_channels=(8, 16), embed_dim=16, heads=2,
                blocks=2, mlp_hidden=16, classes=3)
    base.update(overrides)
    return CctConfig(**base)


def cct_block_param_count(d: int, mlp_hidden: int) -> int:
    """Parameters of one encoder block, counted from the layer shapes."""
    qkv = d * 3 * d + 3 * d
    proj = d * d + d
    mlp = (d * mlp_hidden + mlp_hidden) + (mlp_hidden * d + d)
    norms = 2 * 2 * d
    return qkv + proj + mlp + norms


# ---------------------------------------------------------------------------
# Deep-AE


@dataclass(frozen=True)
class DeepAeConfig:
    """Fully-connected autoencoder; default widths total 265,864 parameters."""

    widths: tuple[int, ...] = (640, 128, 128, 128, 128, 8, 128, 128, 128, 128, 640)
    batch: int = 1
    seed: int = 0
    dtype: str = "FP32"


def build_deep_ae(cfg: DeepAeConfig = DeepAeConfig()) -> Graph:
    widths = list(cfg.widths)
    if len(widths) < 2 or min(widths) <= 0 or cfg.batch <= 0:
        raise ConfigError("Deep-AE needs at least two positive widths")
    if widths[0] != widths[-1]:
        raise ConfigError("autoencoder input and output widths must match")
    b = GraphBuilder(cfg.dtype, cfg.seed)
    x = b.input("x", (cfg.batch, widths[0]))
    y = x
    last = len(widths) - 2
    for i, (wi, wo) in enumerate(zip(widths, widths[1:])):
        y = b.linear(y, f"fc{i}", wi, wo)
        if i != last:
            y = b.op("ReLU", [y], f"relu{i}")
    loss = b.op("MseLoss", [y, x], "loss")
    return b.build([y, loss], loss)


# ---------------------------------------------------------------------------
# toy graphs


def build_toy_mlp(widths, batch: int = 1, seed: int = 0, dtype: str = "FP32", activation: str = "ReLU") -> Graph:
    """Classifier MLP ``widths[0] -> ... -> widths[-1]`` with a cross-entropy loss."""
    widths = list(widths)
    if len(widths) < 2 or min(widths) <= 0:
        raise ConfigError(f"toy MLP needs at least two positive widths, got {widths}")
    b = GraphBuilder(dtype, seed)
    y = b.input("x", (batch, widths[0]))
    last = len(widths) - 2
    for i, (wi, wo) in enumerate(zip(widths, widths[1:])):
        y = b.linear(y, f"fc{i}", wi, wo)
        if i != last:
            y = b.op(activation, [y], f"act{i}")
    loss = attach_cross_entropy(b, y, widths[-1], batch)
    return b.build([y, loss], loss)


def build_single_gemm(w: np.ndarray, x_shape, trainable: bool = True, dtype: str = "FP32") -> Graph:
    """``Y = W X`` with no loss attached; W is the only initializer."""
    b = GraphBuilder(dtype)
    wt = b.param("W", np.asarray(w), trainable=trainable)
    x = b.input("X", x_shape)
    y = b.op("Gemm", [wt, x], "gemm", {"transA": 0, "transB": 0})
    return b.build([y])
