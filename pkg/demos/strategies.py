"""Compare the fine-tuning presets on the CCT.

Each preset is applied to the same model, differentiated, planned and
costed under the calibrated SoC model. Run from the repository root:

    python3 demos/strategies.py
"""
from edgetrain.pipeline import FIVE, calibrated_hw, preset_rows, run_presets

runs = run_presets(FIVE + ("Full-FT",))
hw = calibrated_hw(runs)
print(f"calibrated: u_cluster={hw.u_cluster:.3f} u_accel={hw.u_accel:.3f} bw_l3={hw.bw_l3:.3f} B/cycle\n")

print(f"{'preset':8s} {'trainable':>10s} {'MFLOP':>7s} {'dyn peak':>9s} {'accel':>8s} {'speedup':>8s}")
for r in preset_rows(runs, hw):
    print(f"{r['strategy']:8s} {r['trainable_mb']:8.4f}MB {r['flops_total_m']:7.1f} "
          f"{r['dynamic_peak_mb']:7.3f}MB {r['accel_ms']:6.1f}ms {r['speedup']:7.2f}x")

# The point of LoRA: far fewer trainable bytes than FT at a comparable step cost.
ft, lo = runs["FT-2"], runs["LoRA-2"]
print(f"\nFT-2 trains {ft.trainable_bytes / lo.trainable_bytes:.1f}x the bytes of LoRA-2")
