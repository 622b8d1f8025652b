"""Lower a toy MLP training step to C, compile it and compare with the interpreter.

Needs a C compiler on PATH.
"""
import tempfile

import numpy as np

from edgetrain.autodiff import build_training_graph
from edgetrain.builders import build_toy_mlp
from edgetrain.codegen import emit_build_run
from edgetrain.memplan import MemHierarchy, plan_training_graph

g = build_toy_mlp([16, 32, 32, 4])
tg = build_training_graph(g)
# a small L1 forces the GEMMs to be split into several tiles
plan, tiles, ledger = plan_training_graph(tg, MemHierarchy(l1=2048), policy="l3-home")
rng = np.random.default_rng(0)
batch = {"x": rng.standard_normal((1, 16)).astype(np.float32), "labels": np.eye(4, dtype=np.float32)[[2]]}

with tempfile.TemporaryDirectory() as d:
    out, expected = emit_build_run(tg, plan, tiles, batch, out_dir=d)

print(f"interpreter loss {expected['loss']:.9g}")
print(f"C program loss   {out['loss']:.9g}")
print(f"gradient checksum equal: {out['grad_checksum'] == expected['grad_checksum']}")
print(f"DMA L3->L2 {out['dma_l3_to_l2']} B, ledger {ledger.totals().get('L3->L2', 0)} B")
