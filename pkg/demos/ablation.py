"""Full fusion-strategy ablation and layer-count sweep at the default settings.

    python demos/ablation.py [out_dir]

Roughly an hour on one CPU core. Writes ablation_runs.csv,
ablation_summary.csv and layers_T{1,2,3}.csv.
"""
import sys

from mutualformer.pipeline import ablation
from mutualformer.pipeline.train import TrainConfig

out = sys.argv[1] if len(sys.argv) > 1 else "ablation_out"


def show(row):
    print(f"{row['strategy']:>16} seed {row['seed']} T={row['layers']}: "
          f"test MAE {row['test_mae']:.4f} ({row['train_seconds']:.0f} s)", flush=True)


_, summary = ablation.strategy_sweep(TrainConfig(), out_dir=out, progress=show)
for r in summary:
    print(f"{r['strategy']:>16}: mean test MAE {r['mean_test_mae']:.4f} +- {r['std_test_mae']:.4f}")
ablation.layer_sweep(TrainConfig(), out_dir=out, progress=show)
