"""C backend: a self-contained C99 program that runs one planned training step.

Layout of an emitted tree::

    et_config.h   scalar type
    kernels.c/h   reference kernels (copied verbatim)
    buffers.h     one arena per memory level, tensor offsets, fixture table
    schedule.c    arenas, fixture loader and one block per scheduled node
    main.c        loads fixture.bin, runs the step, prints one JSON line
    fixture.bin   initial inputs and weights, little-endian, in table order
    build.json    sources and compiler flags per build profile

Tensors live at the (level, offset) the allocation plan assigns them.
Operands homed in L3 are staged into an L2 window around each node with
``memcpy`` and counted, so the printed DMA totals can be checked against the
transfer ledger. Gemm nodes with a tile plan run the tiled kernel, which
stages tiles through the L1 arena; convolutions run the direct kernels.
"""
from __future__ import annotations

import json
import math
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .ir import DTYPE_WIDTH, NUMPY_DTYPE, Graph, NodeSpec
from .memplan import AllocationPlan, TilePlan, gemm_dims

CFLAGS = ["-std=c99", "-O2", "-Wall", "-Wextra", "-Werror", "-pedantic", "-ffp-contract=off"]
PROFILES = {
    "strict": CFLAGS,
    "bounds": CFLAGS[:1] + ["-O1", "-g", "-Wall", "-Wextra", "-Werror", "-pedantic", "-ffp-contract=off",
                            "-DET_BOUNDS_CHECK", "-fsanitize=address,undefined", "-fno-omit-frame-pointer",
                            "-fno-sanitize-recover=all"],
}
LN_MAX = 4096


class EmitError(ValueError):
    pass


class BuildError(RuntimeError):
    pass


@dataclass
class EmittedProgram:
    files: dict  # relative path -> str | bytes
    manifest: dict
    expected: dict | None = None
    meta: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, body in sorted(self.files.items()):
            p = out / name
            if isinstance(body, bytes):
                p.write_bytes(body)
            else:
                p.write_text(body)
        if self.expected is not None:
            (out / "expected.json").write_text(json.dumps(self.expected, indent=1, sort_keys=True) + "\n")
        return out


def _c_str(s: str) -> str:
    return json.dumps(s)


def _lit(x: float) -> str:
    return f"(real){float(x)!r}"


def _axis_split(shape, axis):
    axis = axis % len(shape)
    return math.prod(shape[:axis]), shape[axis], math.prod(shape[axis + 1:])


class _Writer:
    def __init__(self, tg, plan: AllocationPlan, tiles, width: int):
        self.tg = tg
        self.g: Graph = tg.graph
        self.plan = plan
        self.tiles = tiles or {}
        self.width = width
        self.lines: list[str] = []
        self.stage_base = 0
        self.stage_size = 0
        self.scratch = 0
        self.l1 = 1

    # elements, not bytes
    def home(self, t: str) -> tuple[str, int]:
        p = self.plan.placements[t]
        if p.offset % self.width:
            raise EmitError(f"tensor {t!r}: offset {p.offset} is not aligned to {self.width} bytes")
        return p.level, p.offset // self.width

    def numel(self, t: str) -> int:
        return self.g.tensors[t].numel

    def shape(self, t: str):
        return self.g.tensors[t].shape

    def operands(self, node: NodeSpec):
        """Map each operand to a C pointer expression; stage L3 operands through L2."""
        ptr, pre, post = {}, [], []
        cursor = self.stage_base
        staged = list(dict.fromkeys(node.inputs)) + list(node.outputs)
        for j, t in enumerate(staged):
            level, off = self.home(t)
            n = self.numel(t)
            home = f"ET_SPAN(et_{level}, {off}, {n})"
            if level != "L3":
                ptr[t] = home
                continue
            local = f"ET_SPAN(et_L2, {cursor}, {n})"
            ptr[t] = local
            if j < len(dict.fromkeys(node.inputs)):
                pre.append(f"k_copy({home}, {local}, {n}); et_dma_in += {n * self.width}u;")
            else:
                post.append(f"k_copy({local}, {home}, {n}); et_dma_out += {n * self.width}u;")
            cursor += n
        self.stage_size = max(self.stage_size, cursor - self.stage_base)
        return ptr, pre, post

    def call(self, node: NodeSpec, p) -> list[str]:
        op, a = node.op, node.attrs
        ins, outs = node.inputs, node.outputs
        x = [p[t] for t in ins]
        y = [p[t] for t in outs]
        n0 = self.numel(outs[0])
        if op == "Gemm":
            b, m, n, k = gemm_dims(node, self.g)
            bias = x[2] if len(x) > 2 else "NULL"
            tp = self.tiles.get(node.name)
            if tp is None:
                return [f"et_offload.gemm({x[0]}, {x[1]}, {bias}, {y[0]}, {b}, {m}, {n}, {k}, "
                        f"{a['transA']}, {a['transB']});"]
            if (tp.batch, tp.m, tp.n, tp.k) != (b, m, n, k):
                raise EmitError(f"tile plan of {node.name!r} is for a different shape")
            self.l1 = max(self.l1, tp.l1_bytes // self.width)
            return [f"et_offload.gemm_tiled({x[0]}, {x[1]}, {bias}, {y[0]}, {b}, {m}, {n}, {k}, "
                    f"{a['transA']}, {a['transB']}, {tp.mt}, {tp.nt}, {tp.kt}, et_L1, ET_L1_ELEMS);"]
        if op in ("Conv2D", "Conv2DGradWeight", "Conv2DGradInput", "MaxPool2D", "MaxPool2DGrad"):
            kk, s, pad = a["kernel"], a["stride"], a["padding"]
            if op == "Conv2D":
                nb, c, h, w = self.shape(ins[0])
                co = self.shape(ins[1])[0]
                return [f"et_offload.conv2d({x[0]}, {x[1]}, {y[0]}, {nb}, {c}, {h}, {w}, {co}, {kk}, {s}, {pad});"]
            if op == "Conv2DGradWeight":
                nb, c, h, w = self.shape(ins[0])
                co = self.shape(ins[1])[1]
                return [f"et_offload.conv2d_grad_weight({x[0]}, {x[1]}, {y[0]}, {nb}, {c}, {h}, {w}, {co}, "
                        f"{kk}, {s}, {pad});"]
            if op == "Conv2DGradInput":
                co, c = self.shape(ins[0])[:2]
                nb, _, ho, wo = self.shape(ins[1])
                h, w = a["input_h"], a["input_w"]
                self.scratch = max(self.scratch, ho * wo * c * kk * kk)
                return [f"et_offload.conv2d_grad_input({x[0]}, {x[1]}, {y[0]}, et_scratch, {nb}, {c}, {h}, {w}, "
                        f"{co}, {kk}, {s}, {pad});"]
            nb, c, h, w = self.shape(ins[0])
            if op == "MaxPool2D":
                return [f"k_maxpool({x[0]}, {y[0]}, {nb}, {c}, {h}, {w}, {kk}, {s}, {pad});"]
            return [f"k_maxpool_grad({x[0]}, {x[1]}, {y[0]}, {nb}, {c}, {h}, {w}, {kk}, {s}, {pad});"]
        simple = {"Add": "k_add", "Mul": "k_mul", "ReLUGrad": "k_relu_grad", "GeLUGrad": "k_gelu_grad",
                  "MseGrad": "k_mse_grad"}
        if op in simple:
            return [f"{simple[op]}({x[0]}, {x[1]}, {y[0]}, {n0});"]
        if op in ("ReLU", "GeLU", "Reshape"):
            fn = {"ReLU": "k_relu", "GeLU": "k_gelu", "Reshape": "k_copy"}[op]
            return [f"{fn}({x[0]}, {y[0]}, {n0});"]
        if op == "Scale":
            return [f"k_scale({x[0]}, {_lit(a['factor'])}, {y[0]}, {n0});"]
        if op == "SgdUpdate":
            return [f"k_sgd({x[0]}, {x[1]}, {_lit(a['lr'])}, {y[0]}, {n0});"]
        if op == "MseLoss":
            return [f"k_mse({x[0]}, {x[1]}, {y[0]}, {self.numel(ins[0])});"]
        if op in ("CrossEntropyLoss", "CrossEntropyGrad"):
            shp = self.shape(ins[0])
            if len(shp) != 2:
                raise EmitError(f"{node.name!r}: cross-entropy expects 2-D logits")
            fn = "k_cross_entropy" if op == "CrossEntropyLoss" else "k_cross_entropy_grad"
            return [f"{fn}({x[0]}, {x[1]}, {y[0]}, {shp[0]}, {shp[1]});"]
        if op == "Transpose":
            shp = self.shape(ins[0])
            if len(shp) > 8:
                raise EmitError(f"{node.name!r}: transpose rank above 8")
            return ["static const int shape[] = {" + ", ".join(map(str, shp)) + "};",
                    "static const int perm[] = {" + ", ".join(str(v % len(shp)) for v in a["perm"]) + "};",
                    f"k_transpose({x[0]}, {y[0]}, {len(shp)}, shape, perm);"]
        if op in ("Softmax", "SoftmaxGrad", "ReduceSum"):
            o, ln, inner = _axis_split(self.shape(ins[0]), a["axis"])
            if op == "Softmax":
                return [f"k_softmax({x[0]}, {y[0]}, {o}, {ln}, {inner});"]
            if op == "SoftmaxGrad":
                return [f"k_softmax_grad({x[0]}, {x[1]}, {y[0]}, {o}, {ln}, {inner});"]
            return [f"k_reduce_sum({x[0]}, {y[0]}, {o}, {ln}, {inner});"]
        if op == "Split":
            o, ln, inner = _axis_split(self.shape(ins[0]), a["axis"])
            return ["real *parts[] = {" + ", ".join(y) + "};",
                    "static const int sizes[] = {" + ", ".join(map(str, a["sizes"])) + "};",
                    f"k_split({x[0]}, parts, {len(y)}, sizes, {o}, {ln}, {inner});"]
        if op == "Concat":
            o, _, inner = _axis_split(self.shape(outs[0]), a["axis"])
            present = [int(bool(v)) for v in a["present"]]
            return ["const real *parts[] = {" + ", ".join(x) + "};",
                    "static const int sizes[] = {" + ", ".join(map(str, a["sizes"])) + "};",
                    "static const int present[] = {" + ", ".join(map(str, present)) + "};",
                    f"k_concat(parts, {y[0]}, {len(present)}, sizes, present, {o}, {inner});"]
        if op == "Accumulate":
            return ["const real *parts[] = {" + ", ".join(x) + "};",
                    f"k_accumulate(parts, {len(x)}, {y[0]}, {n0});"]
        if op in ("LayerNorm", "LayerNormGrad"):
            n = self.shape(ins[0])[-1]
            rows = self.numel(ins[0]) // n
            if n > LN_MAX:
                raise EmitError(f"{node.name!r}: LayerNorm width {n} exceeds {LN_MAX}")
            eps = _lit(a["epsilon"])
            if op == "LayerNorm":
                return [f"k_layernorm({x[0]}, {x[1]}, {x[2]}, {y[0]}, {rows}, {n}, {eps});"]
            it = iter(y)
            dx = next(it) if a["grad_input"] else "NULL"
            dg, db = (next(it), next(it)) if a["grad_params"] else ("NULL", "NULL")
            return [f"k_layernorm_grad({x[0]}, {x[1]}, {x[2]}, {dx}, {dg}, {db}, {rows}, {n}, {eps});"]
        raise EmitError(f"no C kernel for operator {op!r} (node {node.name!r})")


def _check_plan(tg, plan: AllocationPlan) -> None:
    g = tg.graph
    for n in tg.schedule:
        for t in (*n.inputs, *n.outputs):
            if t not in plan.placements:
                raise EmitError(f"tensor {t!r} is missing from the allocation plan")
            if plan.placements[t].interval.bytes != g.tensors[t].byte_size:
                raise EmitError(f"tensor {t!r}: plan size differs from the graph")
    for t in (*g.inputs, *g.initializers):
        if t not in plan.placements:
            raise EmitError(f"tensor {t!r} is missing from the allocation plan")


def emit(tg, plan: AllocationPlan, tiles: dict[str, TilePlan] | None = None, batch=None,
         weights=None, expected: bool = True) -> EmittedProgram:
    """Emit the C program for ``tg`` under ``plan``.

    ``tiles`` selects the Gemm nodes that run tiled (``None`` or ``{}``: none).
    ``batch`` maps graph inputs to arrays; it and ``weights`` form the fixture.
    With ``expected`` the interpreter's result is attached for comparison.
    """
    g = tg.graph
    dtypes = {s.dtype for s in g.tensors.values()}
    if len(dtypes) != 1:
        raise EmitError(f"mixed tensor dtypes {sorted(dtypes)} are not supported")
    dtype = dtypes.pop()
    width = DTYPE_WIDTH[dtype]
    if g.loss is None:
        raise EmitError("training graph has no loss")
    _check_plan(tg, plan)
    if batch is None:
        raise EmitError("a batch is required for the fixture")
    missing = [t for t in g.inputs if t not in batch]
    if missing:
        raise EmitError(f"graph input {missing[0]!r} missing from the batch")

    w = _Writer(tg, plan, tiles, width)
    # the staging window starts above everything the plan keeps in L2
    w.stage_base = max((p.offset + p.interval.bytes for p in plan.placements.values() if p.level == "L2"),
                       default=0) // width
    params = sorted(tg.grads)
    grad_src = {tg.grads[p]: i for i, p in enumerate(params)}
    body = []
    for i, node in enumerate(tg.schedule):
        ptr, pre, post = w.operands(node)
        lines = pre + w.call(node, ptr)
        for t in node.outputs:
            if t in grad_src:
                lines.append(f"et_gsum[{grad_src[t]}] = k_sum({ptr[t]}, {w.numel(t)});")
        lines += post
        body.append(f"    /* [{i}] {node.name} ({node.op}) */")
        body.append("    {")
        body += [f"        {ln}" for ln in lines]
        body.append("    }")

    arena = {lvl: 1 for lvl in ("L1", "L2", "L3")}
    for p in plan.placements.values():
        arena[p.level] = max(arena[p.level], (p.offset + p.interval.bytes) // width)
    arena["L2"] = max(arena["L2"], w.stage_base + w.stage_size)
    arena["L1"] = max(arena["L1"], w.l1)

    # fixture: graph inputs then initializers, each at its home location
    src = dict(g.initializers)
    if weights:
        src.update(weights)
    fix_names = list(g.inputs) + sorted(g.initializers)
    blob = bytearray()
    table = []
    for t in fix_names:
        arr = np.asarray(batch[t] if t in g.inputs else src[t], dtype=NUMPY_DTYPE[dtype])
        if arr.shape != g.tensors[t].shape:
            raise EmitError(f"fixture tensor {t!r} has shape {arr.shape}, expected {g.tensors[t].shape}")
        lvl, off = w.home(t)
        table.append(f"    {{{LEVEL_ID[lvl]}, {off}u, {arr.size}u}}, /* {t} */")
        blob += arr.tobytes()
    weight_rows = [f"    {{{LEVEL_ID[w.home(t)[0]]}, {w.home(t)[1]}u, {w.numel(t)}u}}, /* {t} */"
                   for t in sorted(g.initializers)]
    loss_lvl, loss_off = w.home(g.loss)

    ctype = "float" if dtype == "FP32" else "double"
    files = {
        "et_config.h": f"#ifndef ET_CONFIG_H\n#define ET_CONFIG_H\n#define ET_REAL {ctype}\n#endif\n",
        "kernels.h": _csrc("kernels.h"),
        "kernels.c": _csrc("kernels.c"),
        "buffers.h": _buffers_h(arena, w.scratch, table, weight_rows, params, loss_lvl, loss_off),
        "schedule.c": _schedule_c(body),
        "main.c": MAIN_C,
        "fixture.bin": bytes(blob),
    }
    sources = ["kernels.c", "schedule.c", "main.c"]
    manifest = {"sources": sources, "profiles": {k: v + ["-o", "et_step"] for k, v in PROFILES.items()},
                "libs": ["-lm"], "dtype": dtype, "arena_elems": arena, "scratch_elems": w.scratch,
                "tiled_nodes": sorted(n for n in (tiles or {}) if g.node(n).op == "Gemm")}
    files["build.json"] = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    exp = reference_result(tg, batch, weights) if expected else None
    return EmittedProgram(files, manifest, exp, {"params": params})


LEVEL_ID = {"L1": 0, "L2": 1, "L3": 2}


def _csrc(name: str) -> str:
    return resources.files("edgetrain").joinpath("csrc", name).read_text()


def _buffers_h(arena, scratch, table, weight_rows, params, loss_lvl, loss_off) -> str:
    names = ",\n".join(f"    {_c_str(p)}" for p in params) or "    \"\""
    return f"""/* Arena sizes and tensor homes, in elements. Generated. */
#ifndef ET_BUFFERS_H
#define ET_BUFFERS_H

#include "kernels.h"

#define ET_L1_ELEMS {arena["L1"]}u
#define ET_L2_ELEMS {arena["L2"]}u
#define ET_L3_ELEMS {arena["L3"]}u
#define ET_SCRATCH_ELEMS {max(scratch, 1)}u
#define ET_FIXTURE_COUNT {len(table)}
#define ET_WEIGHT_COUNT {len(weight_rows)}
#define ET_PARAM_COUNT {len(params)}
#define ET_LOSS_LEVEL {LEVEL_ID[loss_lvl]}
#define ET_LOSS_OFFSET {loss_off}u

typedef struct {{
    int level;
    size_t offset;
    size_t count;
}} et_home;

#ifdef ET_BUFFERS_TABLES
static const et_home et_fixture[ET_FIXTURE_COUNT] = {{
{chr(10).join(table)}
}};
static const et_home et_weights[ET_WEIGHT_COUNT] = {{
{chr(10).join(weight_rows) or "    {0, 0u, 0u}"}
}};
static const char *const et_param_names[] = {{
{names}
}};
#endif

#endif
"""


def _schedule_c(body) -> str:
    return """/* One training step in schedule order. Generated. */
#include <stdio.h>
#include <stdlib.h>

#define ET_BUFFERS_TABLES
#include "buffers.h"

static real et_L1[ET_L1_ELEMS];
static real et_L2[ET_L2_ELEMS];
static real et_L3[ET_L3_ELEMS];
#if ET_SCRATCH_ELEMS > 1
static real et_scratch[ET_SCRATCH_ELEMS];
#endif
static double et_gsum[ET_PARAM_COUNT + 1];
static unsigned long et_dma_in, et_dma_out;

#ifdef ET_BOUNDS_CHECK
static real *et_span(real *arena, size_t size, size_t off, size_t count, const char *name)
{
    if (off > size || count > size - off) {
        fprintf(stderr, "arena overflow in %s: [%lu, %lu) of %lu\\n", name, (unsigned long)off,
                (unsigned long)(off + count), (unsigned long)size);
        abort();
    }
    return arena + off;
}
#define ET_SPAN(A, OFF, N) et_span(A, sizeof(A) / sizeof((A)[0]), OFF, N, #A)
#else
#define ET_SPAN(A, OFF, N) ((A) + (OFF))
#endif

static real *et_level(int level)
{
    return level == 0 ? et_L1 : level == 1 ? et_L2 : et_L3;
}

int et_load(FILE *f)
{
    int i;
    for (i = 0; i < ET_FIXTURE_COUNT; ++i) {
        real *dst = et_level(et_fixture[i].level) + et_fixture[i].offset;
        if (fread(dst, sizeof(real), et_fixture[i].count, f) != et_fixture[i].count)
            return -1;
    }
    return fgetc(f) == EOF ? 0 : -1;
}

void et_step(void)
{
""" + "\n".join(body) + """
}

void et_report(FILE *out)
{
    int i;
    double total = 0, wsum = 0;
    real loss = et_level(ET_LOSS_LEVEL)[ET_LOSS_OFFSET];
    for (i = 0; i < ET_PARAM_COUNT; ++i)
        total += et_gsum[i];
    for (i = 0; i < ET_WEIGHT_COUNT; ++i)
        wsum += k_sum(et_level(et_weights[i].level) + et_weights[i].offset, et_weights[i].count);
    fprintf(out, "{\\"loss\\": %.17g, \\"grad_checksum\\": %.17g, \\"weight_checksum\\": %.17g, "
                 "\\"dma_l3_to_l2\\": %lu, \\"dma_l2_to_l3\\": %lu, \\"grads\\": {",
            (double)loss, total, wsum, et_dma_in, et_dma_out);
    for (i = 0; i < ET_PARAM_COUNT; ++i)
        fprintf(out, "%s\\"%s\\": %.17g", i ? ", " : "", et_param_names[i], et_gsum[i]);
    fprintf(out, "}}\\n");
}
"""


MAIN_C = """/* Runs one training step from fixture.bin and prints a JSON line. Generated. */
#include <stdio.h>

int et_load(FILE *f);
void et_step(void);
void et_report(FILE *out);

int main(int argc, char **argv)
{
    const char *path = argc > 1 ? argv[1] : "fixture.bin";
    FILE *f = fopen(path, "rb");
    if (!f) {
        fprintf(stderr, "cannot open %s\\n", path);
        return 1;
    }
    if (et_load(f) != 0) {
        fclose(f);
        fprintf(stderr, "fixture %s does not match the program\\n", path);
        return 1;
    }
    fclose(f);
    et_step();
    et_report(stdout);
    return 0;
}
"""


# ---------------------------------------------------------------------------
# reference, build and run


def reference_result(tg, batch, weights=None) -> dict:
    """What the emitted program should print, computed by the interpreter."""
    from .interp import grad_checksum, run_training_step

    res = run_training_step(tg, batch, weights=weights)
    return {
        "loss": res.loss,
        "grad_checksum": grad_checksum(res.grads),
        "weight_checksum": sum(float(np.sum(res.weights[k].astype(np.float64))) for k in sorted(res.weights)),
        "grads": {k: float(np.sum(v.astype(np.float64))) for k, v in sorted(res.grads.items())},
    }


def compiler() -> str:
    for cc in ("gcc", "cc", "clang"):
        if shutil.which(cc):
            return cc
    raise BuildError("no C compiler found")


def build(src_dir, profile: str = "strict", cc: str | None = None) -> Path:
    src = Path(src_dir)
    man = json.loads((src / "build.json").read_text())
    if profile not in man["profiles"]:
        raise BuildError(f"unknown build profile {profile!r}")
    cmd = [cc or compiler(), *man["profiles"][profile], *man["sources"], *man["libs"]]
    r = subprocess.run(cmd, cwd=src, capture_output=True, text=True)
    if r.returncode != 0 or r.stderr.strip():
        raise BuildError(f"compilation failed ({' '.join(cmd)}):\n{r.stderr}")
    return src / "et_step"


def run(binary, fixture=None, timeout: float = 600) -> dict:
    binary = Path(binary)
    fixture = Path(fixture) if fixture else binary.parent / "fixture.bin"
    r = subprocess.run([str(binary), str(fixture)], capture_output=True, text=True, timeout=timeout)
    if r.returncode != 0:
        raise BuildError(f"program exited with {r.returncode}: {r.stderr.strip()}")
    return json.loads(r.stdout)


def emit_build_run(tg, plan, tiles, batch, weights=None, profile: str = "strict", out_dir=None):
    """Emit, compile and execute; returns ``(program output, expected)``."""
    prog = emit(tg, plan, tiles, batch, weights)
    if out_dir is None:
        with tempfile.TemporaryDirectory(prefix="edgetrain-") as d:
            return run(build(prog.write(d), profile)), prog.expected
    return run(build(prog.write(out_dir), profile)), prog.expected


def rel_diff(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-30)
