"""Write a few images of each synthetic generator as PGM files with their masks.

    python demos/dataset_gallery.py [out_dir]
"""
import sys

from segbench.data import GENERATORS, save_samples

out = sys.argv[1] if len(sys.argv) > 1 else "gallery"
for kind, generate in GENERATORS.items():
    samples = generate(0, size=128, n_images=3)
    save_samples(samples, f"{out}/{kind}", comment=f"demo kind={kind}")
    fractions = ", ".join(f"{m.mean():.3%}" for m in samples.masks)
    print(f"{kind:8s} positive fraction per image: {fractions}")
print(f"open {out}/<kind>/images/*.pgm in any image viewer")
