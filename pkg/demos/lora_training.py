"""Train LoRA-2 adapters on a small synthetic task and show the loss curve.

Only the adapter matrices and the head change; the frozen weights of the
adapted layers stay bit-identical.
"""
import numpy as np

from edgetrain.autodiff import TrainConfig, build_training_graph
from edgetrain.builders import build_cct, tiny_cct_config
from edgetrain.peft import apply_strategy, preset
from edgetrain.pipeline import mean_loss, prototype_task, train

cfg = tiny_cct_config(seed=1)
g = apply_strategy(build_cct(cfg), preset("LoRA-2"))
tg = build_training_graph(g, TrainConfig(learning_rate=0.1))
data = prototype_task(cfg)

w = dict(g.initializers)
print(f"step   0  loss {mean_loss(g, data, w):.4f}")
for chunk in range(4):
    w = train(tg, data, 50, w)
    print(f"step {50 * (chunk + 1):3d}  loss {mean_loss(g, data, w):.4f}")

changed = sorted(k for k in w if not np.array_equal(w[k], g.initializers[k]))
print("\nchanged tensors:", ", ".join(changed))
