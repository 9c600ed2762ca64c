"""How segmentation quality degrades with noise: one clean structure, three noise levels.

    python demos/snr_sweep.py
"""
from segbench.models import ModelConfig
from segbench.training import TrainConfig, snr_sweep

table = snr_sweep(
    ModelConfig("cnn", features=8, depth=2),
    dict(kind="airy", seed=0, size=32, n_images=10, params=dict(spots_per_image_range=(1, 3))),
    [1.0, 4.0, 20.0],
    TrainConfig(epochs=150, lr=3e-3, batch=8, crop=16, crops_per_image=8),
)
print("snr    auc    accuracy")
for snr, result in table:
    print(f"{snr:<6g} {result.aggregate['auc']:.3f}  {result.aggregate['accuracy']:.4f}")
