"""Reference interpreter for (training) graphs.

Kernels are deliberately naive. Every reduction runs sequentially in
ascending index order and every product is rounded before it is added, so the
emitted C kernels (compiled without FP contraction) reproduce these results
bit-for-bit. Transcendentals (exp, log, tanh) are evaluated in double
precision and rounded to the working dtype.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .ir import NUMPY_DTYPE, Graph, IRError, NodeSpec, topo_schedule

F64 = np.float64
EXTENDED = np.longdouble


def _hi(x: np.ndarray) -> np.ndarray:
    """Promote to at least double precision for transcendentals."""
    return x.astype(np.promote_types(x.dtype, F64))


class NumericError(IRError):
    def __init__(self, node: str, msg: str):
        super().__init__(f"node {node!r}: {msg}")
        self.node = node


def seqsum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum along ``axis`` strictly left to right."""
    x = np.moveaxis(x, axis, -1)
    acc = np.zeros(x.shape[:-1], dtype=x.dtype)
    for j in range(x.shape[-1]):
        acc = acc + x[..., j]
    return acc


def gemm(a: np.ndarray, b: np.ndarray, c: np.ndarray | None = None, trans_a: int = 0, trans_b: int = 0) -> np.ndarray:
    if trans_a:
        a = np.swapaxes(a, -1, -2)
    if trans_b:
        b = np.swapaxes(b, -1, -2)
    out = np.zeros(a.shape[:-1] + b.shape[-1:], dtype=a.dtype)
    for k in range(a.shape[-1]):
        out += a[..., :, k, None] * b[..., None, k, :]
    if c is not None:
        out += c
    return out


def _pad(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def im2col(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    """``[N,C,H,W] -> [N, Ho*Wo, C*k*k]`` with column order (c, kh, kw)."""
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
    xp = _pad(x, p)
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(n, c * k * k, ho * wo).transpose(0, 2, 1)


def col2im(cols: np.ndarray, shape, k: int, s: int, p: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
    cols = cols.transpose(0, 2, 1).reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, i, j]
    return xp[:, :, p:p + h, p:p + w]


def conv2d(x, w, k, s, p):
    n = x.shape[0]
    co = w.shape[0]
    cols = im2col(x, k, s, p)
    wm = w.reshape(co, -1)
    ho, wo = _out_size(x.shape[2], k, s, p), _out_size(x.shape[3], k, s, p)
    out = np.stack([gemm(cols[b], wm, trans_b=1).T for b in range(n)])
    return out.reshape(n, co, ho, wo)


def conv2d_direct(x, w, k, s, p):
    """Direct convolution; used only to check the im2col lowering."""
    n, c, h, wd = x.shape
    co = w.shape[0]
    ho, wo = _out_size(h, k, s, p), _out_size(wd, k, s, p)
    xp = _pad(x, p)
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out


def conv2d_grad_weight(x, dy, k, s, p):
    n, co = dy.shape[:2]
    cols = im2col(x, k, s, p).reshape(-1, x.shape[1] * k * k)
    d = dy.reshape(n, co, -1).transpose(1, 0, 2).reshape(co, -1)
    return gemm(d, cols).reshape(co, x.shape[1], k, k)


def conv2d_grad_input(w, dy, k, s, p, h, wd):
    n, co = dy.shape[:2]
    c = w.shape[1]
    wm = w.reshape(co, -1)
    dcols = np.stack([gemm(dy[b].reshape(co, -1), wm, trans_a=1) for b in range(n)])
    return col2im(dcols, (n, c, h, wd), k, s, p)


def maxpool_argmax(x, k, s, p):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, s, p), _out_size(w, k, s, p)
    xp = _pad(x, p, -np.inf)
    best = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    idx = np.zeros((n, c, ho, wo), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            v = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
            m = v > best
            best = np.where(m, v, best)
            idx = np.where(m, i * k + j, idx)
    return best, idx


def maxpool_grad(x, dy, k, s, p):
    n, c, h, w = x.shape
    ho, wo = dy.shape[2:]
    _, idx = maxpool_argmax(x, k, s, p)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(idx == i * k + j, dy, 0)
    return dxp[:, :, p:p + h, p:p + w]


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(_hi(x - m)).astype(x.dtype)
    y = e / seqsum(e)[..., None]
    return np.moveaxis(y, -1, axis)


def softmax_grad(y, dy, axis):
    y, dy = np.moveaxis(y, axis, -1), np.moveaxis(dy, axis, -1)
    dot = seqsum(dy * y)
    return np.moveaxis((dy - dot[..., None]) * y, -1, axis)


def _ln_stats(x, eps):
    n = x.shape[-1]
    mean = seqsum(x) / x.dtype.type(n)
    xc = x - mean[..., None]
    var = seqsum(xc * xc) / x.dtype.type(n)
    rstd = x.dtype.type(1) / np.sqrt(var + x.dtype.type(eps))
    return xc, rstd


def layernorm(x, g, b, eps):
    xc, rstd = _ln_stats(x, eps)
    return xc * rstd[..., None] * g + b


def layernorm_grad(x, g, dy, eps, grad_input, grad_params):
    dt = x.dtype.type
    n = x.shape[-1]
    xc, rstd = _ln_stats(x, eps)
    xhat = xc * rstd[..., None]
    out = []
    if grad_input:
        dxhat = dy * g
        a = seqsum(dxhat)
        bsum = seqsum(dxhat * xhat)
        out.append(((dxhat * dt(n) - a[..., None]) - xhat * bsum[..., None]) * (rstd / dt(n))[..., None])
    if grad_params:
        rows_dy = dy.reshape(-1, n)
        out.append(seqsum(rows_dy * xhat.reshape(-1, n), axis=0))
        out.append(seqsum(rows_dy, axis=0))
    return out


GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    xd = _hi(x)
    inner = GELU_C * (xd + 0.044715 * (xd * xd * xd))
    return (0.5 * xd * (1.0 + np.tanh(inner))).astype(x.dtype)


def gelu_grad(x, dy):
    xd = _hi(x)
    t = np.tanh(GELU_C * (xd + 0.044715 * (xd * xd * xd)))
    d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * (xd * xd))
    return (_hi(dy) * d).astype(x.dtype)


def _softmax_rows64(x):
    xd = _hi(x)
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    return e, seqsum(e), m


def cross_entropy(logits, labels):
    e, s, m = _softmax_rows64(logits)
    lse = m[..., 0] + np.log(s)
    per_row = seqsum(-_hi(labels) * (_hi(logits) - lse[..., None]))
    return np.array([seqsum(per_row, 0) / logits.shape[0]]).astype(logits.dtype)


def cross_entropy_grad(logits, labels):
    e, s, _ = _softmax_rows64(logits)
    p = e / s[..., None]
    return ((p - _hi(labels)) / logits.shape[0]).astype(logits.dtype)


def mse(y, t):
    d = (_hi(y) - _hi(t)).reshape(-1)
    return np.array([seqsum(d * d, 0) / d.size]).astype(y.dtype)


def mse_grad(y, t):
    return (2.0 * (_hi(y) - _hi(t)) / y.size).astype(y.dtype)


def concat(parts, axis, sizes, present, like_shape, dtype):
    it = iter(parts)
    full = []
    for flag, size in zip(present, sizes):
        if flag:
            full.append(next(it))
        else:
            shape = list(like_shape)
            shape[axis] = size
            full.append(np.zeros(shape, dtype=dtype))
    return np.concatenate(full, axis=axis)


def _accumulate(ins):
    acc = ins[0].copy()
    for x in ins[1:]:
        acc = acc + x
    return acc


def _split(x, a):
    idx = np.cumsum(a["sizes"])[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, idx, axis=a["axis"])]


def _reduce_sum(x, a):
    r = seqsum(x, a["axis"])
    return r.reshape(1) if x.ndim == 1 else r


Kernel = Callable[[list, dict], list]

KERNELS: dict[str, Kernel] = {
    "Gemm": lambda i, a: [gemm(i[0], i[1], i[2] if len(i) > 2 else None, a["transA"], a["transB"])],
    "Conv2D": lambda i, a: [conv2d(i[0], i[1], a["kernel"], a["stride"], a["padding"])],
    "MaxPool2D": lambda i, a: [maxpool_argmax(i[0], a["kernel"], a["stride"], a["padding"])[0]],
    "Add": lambda i, a: [i[0] + i[1]],
    "Mul": lambda i, a: [i[0] * i[1]],
    "Scale": lambda i, a: [i[0] * i[0].dtype.type(a["factor"])],
    "Transpose": lambda i, a: [np.ascontiguousarray(np.transpose(i[0], a["perm"]))],
    "Reshape": lambda i, a: [i[0].reshape(a["shape"]).copy()],
    "ReLU": lambda i, a: [np.where(i[0] > 0, i[0], 0).astype(i[0].dtype)],
    "GeLU": lambda i, a: [gelu(i[0])],
    "Softmax": lambda i, a: [softmax(i[0], a["axis"])],
    "LayerNorm": lambda i, a: [layernorm(i[0], i[1], i[2], a["epsilon"])],
    "Split": lambda i, a: _split(i[0], a),
    "CrossEntropyLoss": lambda i, a: [cross_entropy(i[0], i[1])],
    "MseLoss": lambda i, a: [mse(i[0], i[1])],
    "SgdUpdate": lambda i, a: [i[0] - i[0].dtype.type(a["lr"]) * i[1]],
    "Accumulate": lambda i, a: [_accumulate(i)],
    "ReduceSum": lambda i, a: [_reduce_sum(i[0], a)],
    "ReLUGrad": lambda i, a: [np.where(i[0] > 0, i[1], 0).astype(i[1].dtype)],
    "GeLUGrad": lambda i, a: [gelu_grad(i[0], i[1])],
    "SoftmaxGrad": lambda i, a: [softmax_grad(i[0], i[1], a["axis"])],
    "LayerNormGrad": lambda i, a: layernorm_grad(i[0], i[1], i[2], a["epsilon"], a["grad_input"], a["grad_params"]),
    "MaxPool2DGrad": lambda i, a: [maxpool_grad(i[0], i[1], a["kernel"], a["stride"], a["padding"])],
    "Conv2DGradInput": lambda i, a: [conv2d_grad_input(i[0], i[1], a["kernel"], a["stride"], a["padding"],
                                                       a["input_h"], a["input_w"])],
    "Conv2DGradWeight": lambda i, a: [conv2d_grad_weight(i[0], i[1], a["kernel"], a["stride"], a["padding"])],
    "CrossEntropyGrad": lambda i, a: [cross_entropy_grad(i[0], i[1])],
    "MseGrad": lambda i, a: [mse_grad(i[0], i[1])],
}


def _run_concat(node: NodeSpec, ins, g: Graph):
    out_shape = g.tensors[node.outputs[0]].shape
    a = node.attrs
    return [concat(ins, a["axis"], a["sizes"], a["present"], out_shape, ins[0].dtype)]


def execute(g: Graph, schedule: list[NodeSpec], env: dict[str, np.ndarray], lr: float | None = None,
             check_finite: bool = True, trace: Callable | None = None, compute_dtype=None) -> dict[str, np.ndarray]:
    """Run ``schedule`` over ``env`` (tensor name -> array), returning the final env.

    ``compute_dtype`` overrides the tensors' declared dtype (used by the
    finite-difference oracle).
    """
    env = dict(env)
    for node in schedule:
        ins = [env[t] for t in node.inputs]
        if node.op == "Concat":
            outs = _run_concat(node, ins, g)
        elif node.op == "SgdUpdate" and lr is not None:
            outs = [ins[0] - ins[0].dtype.type(lr) * ins[1]]
        else:
            outs = KERNELS[node.op](ins, node.attrs)
        for t, v in zip(node.outputs, outs):
            spec = g.tensors[t]
            v = np.asarray(v, dtype=compute_dtype or NUMPY_DTYPE[spec.dtype])
            if v.shape != spec.shape:
                v = v.reshape(spec.shape)
            if check_finite and not np.all(np.isfinite(v)):
                raise NumericError(node.name, f"non-finite values in {t!r}")
            env[t] = v
        if trace is not None:
            trace(node, env)
    return env


def _initial_env(g: Graph, inputs: Mapping[str, np.ndarray], weights: Mapping[str, np.ndarray] | None,
                 compute_dtype=None):
    env = {}
    for name in g.inputs:
        if name not in inputs:
            raise IRError(f"missing graph input {name!r}")
        spec = g.tensors[name]
        arr = np.asarray(inputs[name], dtype=compute_dtype or NUMPY_DTYPE[spec.dtype])
        if arr.shape != spec.shape:
            raise IRError(f"input {name!r} has shape {arr.shape}, expected {spec.shape}")
        env[name] = arr
    src = dict(g.initializers)
    if weights:
        src.update(weights)
    for name in g.initializers:
        spec = g.tensors[name]
        arr = np.asarray(src[name], dtype=compute_dtype or NUMPY_DTYPE[spec.dtype])
        if arr.shape != spec.shape:
            raise IRError(f"weight {name!r} has shape {arr.shape}, expected {spec.shape}")
        env[name] = arr
    return env


def run_forward(g: Graph, inputs: Mapping[str, np.ndarray], weights: Mapping[str, np.ndarray] | None = None,
                check_finite: bool = True, compute_dtype=None) -> dict[str, np.ndarray]:
    """Execute the forward nodes and return the graph outputs (and the loss, if any)."""
    from .autodiff import forward_nodes

    env = execute(g, forward_nodes(g, topo_schedule(g)), _initial_env(g, inputs, weights, compute_dtype),
                  check_finite=check_finite, compute_dtype=compute_dtype)
    names = list(g.outputs) + ([g.loss] if g.loss and g.loss not in g.outputs else [])
    return {t: env[t] for t in names}


def forward_loss(g: Graph, inputs, weights=None, compute_dtype=None):
    if g.loss is None:
        raise IRError("graph has no loss")
    return run_forward(g, inputs, weights, check_finite=False, compute_dtype=compute_dtype)[g.loss][0]


@dataclass
class StepResult:
    loss: float
    weights: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]
    checksums: dict[str, float] = field(default_factory=dict)

    @property
    def grad_checksum(self) -> float:
        return grad_checksum(self.grads)


def grad_checksum(grads: Mapping[str, np.ndarray]) -> float:
    """Sum of all gradient elements in double precision, in name order."""
    total = 0.0
    for k in sorted(grads):
        total += float(np.sum(grads[k].astype(F64)))
    return total


def run_training_step(tg, batch: Mapping[str, np.ndarray], lr: float | None = None,
                      weights: Mapping[str, np.ndarray] | None = None) -> StepResult:
    """Run one full forward/backward/update step of a :class:`TrainingGraph`."""
    g = tg.graph
    checksums: dict[str, float] = {}

    def trace(node, env):
        checksums[node.name] = float(sum(np.sum(env[t].astype(F64)) for t in node.outputs))

    env = execute(g, tg.schedule, _initial_env(g, batch, weights), lr=lr, trace=trace)
    new_weights = {}
    for name in g.initializers:
        upd = tg.updated.get(name)
        new_weights[name] = env[upd] if upd is not None else env[name]
    grads = {p: env[t] for p, t in tg.grads.items()}
    return StepResult(float(env[g.loss][0]), new_weights, grads, checksums)


def finite_diff_grad(g: Graph, tensor: str, batch: Mapping[str, np.ndarray], eps: float = 1e-5,
                     weights: Mapping[str, np.ndarray] | None = None, indices=None) -> np.ndarray:
    """Central-difference gradient of the loss w.r.t. ``tensor`` (FP64 graphs only).

    The perturbed losses are evaluated in extended precision (``np.longdouble``)
    so that cancellation noise stays well below FP64 gradient magnitudes.
    ``indices`` optionally restricts the evaluation to some flat element
    indices; the other entries of the result are NaN.
    """
    if g.tensors[tensor].dtype != "FP64":
        raise IRError("finite differences require an FP64 graph")
    if g.loss is None or g.tensors[g.loss].shape != (1,):
        raise IRError("finite differences need a scalar loss")
    base_w = dict(g.initializers)
    if weights:
        base_w.update(weights)
    base_in = {k: np.asarray(v, dtype=F64) for k, v in batch.items()}
    in_weights = tensor in g.initializers
    ref = (base_w if in_weights else base_in)[tensor]
    flat = np.array(ref, dtype=EXTENDED).reshape(-1)
    step = EXTENDED(eps)
    out = np.full(flat.size, np.nan)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        vals = []
        for sign in (1.0, -1.0):
            pert = flat.copy()
            pert[i] += EXTENDED(sign) * step
            arr = pert.reshape(ref.shape)
            if in_weights:
                vals.append(forward_loss(g, base_in, {**base_w, tensor: arr}, EXTENDED))
            else:
                vals.append(forward_loss(g, {**base_in, tensor: arr}, base_w, EXTENDED))
        out[i] = float((vals[0] - vals[1]) / (2 * step))
    return out.reshape(ref.shape)
