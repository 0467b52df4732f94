"""Data efficiency at reduced scale: train with a randomized number of
adaptation points, then sweep how many points the model sees at test time.

This is a miniature of the sample-point sweep (5000 iterations instead of
20k+); the relation loss should already be ahead at small k. Writes
results.csv and a chart next to this script.
"""
import os

from metaloss.evaluation import EvalProtocol, run_vary_sample_points
from metaloss.reporting import emit_csv, emit_svg
from metaloss.training import MethodSpec, TrainConfig

out_dir = os.path.join(os.path.dirname(__file__), "out_sample_efficiency")
os.makedirs(out_dir, exist_ok=True)

specs = [
    MethodSpec(method="cavia", context_dim=5, hidden=(40, 40), inner_lr=1.0),
    MethodSpec(method="rel_viable", context_dim=5, hidden=(40, 40),
               loss_net_hidden=(32, 32, 32), inner_lr=1.0),
]
cfg = TrainConfig(iters=5000, seed=0, val_every=1000, meta_batch=25,
                  k_train=(0, 20), k_test=10)
protocol = EvalProtocol(n_tasks=400, adapt_points=10)

print("training two methods with k ~ uniform{0..20} (about 2-3 minutes)...")
rows = run_vary_sample_points(
    specs, eval_k=(0, 1, 2, 4, 10, 20), cfg=cfg, protocol=protocol,
    seeds=(0,), eval_seed=0,
)

print(f"\n{'method':12s} " + " ".join(f"k={k:<4d}" for k in (0, 1, 2, 4, 10, 20)))
for method in ("cavia", "rel_viable"):
    line = [r for r in rows if r.method == method]
    print(f"{method:12s} " + " ".join(f"{r.value:6.2f}" for r in line))

csv_path = os.path.join(out_dir, "results.csv")
svg_path = os.path.join(out_dir, "sample_efficiency.svg")
emit_csv(rows, csv_path)
emit_svg(rows, svg_path, x_field="k_train", title="MSE vs adaptation points",
         x_label="adaptation points at test", y_label="mse")
print(f"\nwrote {csv_path}\nwrote {svg_path}")
