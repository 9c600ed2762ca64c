"""Cross-validate a small CNN on synthetic airy-spot images and write the reports.

    python demos/quickstart.py [out_dir]
"""
import sys

from segbench import bench

config = bench.config_from_dict(
    {
        "base_seed": 0,
        "dataset": {"kind": "airy", "n_images": 10, "size": 32, "snr": 20.0, "params": {"spots_per_image_range": [1, 3]}},
        "model": {"arch": "cnn", "features": 8, "depth": 2},
        "train": {"epochs": 150, "lr": 3e-3, "batch": 8, "crop": 16, "crops_per_image": 8},
    }
)
out = sys.argv[1] if len(sys.argv) > 1 else "quickstart_out"
result = bench.run(config, out, force=True)

print(f"{result.arch}: {result.params} parameters, {result.train_seconds:.1f}s of training")
for key, value in result.aggregate.items():
    print(f"  {key:12s} {'n/a' if value is None else f'{value:.3f}'}")
print(f"reports in {out}/: summary.md, metrics.csv, roc.svg, loss_curves.svg, fold*.ckpt")
