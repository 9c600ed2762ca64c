"""Verify a hand-built loss with the finite-difference checker, then run the full suite.

    python demos/gradient_check.py
"""
import numpy as np

from segbench import autodiff as ad
from segbench.autodiff import Tensor
from segbench.gradsuite import run_suite

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(1, 2, 6, 6)))
w = Tensor(rng.normal(size=(3, 2, 3, 3)))
b = Tensor(rng.normal(size=3))


def loss(x, w, b):
    h = ad.gelu(ad.conv2d(x, w, b, pad=1))
    return ad.tsum(ad.softmax(ad.reshape(h, (3, 36))))


print(f"conv -> gelu -> softmax: max relative error {ad.grad_check(loss, [x, w, b]):.2e}")
results = run_suite(instances=2, log=print)
print(f"{sum(r.passed for r in results)}/{len(results)} cases passed")
