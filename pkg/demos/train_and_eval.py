"""Train a small MutualFormer on synthetic RGB-D shapes and evaluate it.

    python demos/train_and_eval.py [strategy] [epochs]

Writes final.mfck, best.mfck and loss_log.csv to demo_out/ and prints the
held-out metrics.
"""
import sys

from mutualformer.pipeline.train import TrainConfig, evaluate, held_out_split, train

strategy = sys.argv[1] if len(sys.argv) > 1 else "mutualformer"
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 10

cfg = TrainConfig(strategy=strategy, epochs=epochs, train_count=100, test_count=20)
result = train(cfg, out_dir="demo_out",
               progress=lambda r: print(f"epoch {r['epoch']:2d}  loss {r['total']:.4f}  "
                                        f"train MAE {r['train_mae']:.4f}"))
mean = evaluate(result.tree(), cfg, held_out_split(cfg))[-1]
print(f"held-out: S {mean['s_measure']:.4f}  F_max {mean['f_max']:.4f}  "
      f"E_max {mean['e_max']:.4f}  MAE {mean['mae']:.4f}")
