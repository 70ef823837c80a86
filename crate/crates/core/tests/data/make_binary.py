"""Writes binary.svm: a seeded synthetic binary classification set in LIBSVM format."""
import numpy as np

rng = np.random.default_rng(20240613)
n, d = 6000, 10
scales = np.geomspace(3.0, 0.3, d)
x = rng.standard_normal((n, d)) * scales
# a few heavy rows so that uniform subsamples vary more
heavy = rng.random(n) < 0.05
x[heavy] *= 3.0
w = rng.standard_normal(d)
w /= np.linalg.norm(w * scales)
p = 1.0 / (1.0 + np.exp(-4.0 * (x @ w + 0.3)))
y = np.where(rng.random(n) < p, 1, -1)
with open("binary.svm", "w") as f:
    for xi, yi in zip(x, y):
        feats = " ".join(f"{j + 1}:{v:.6g}" for j, v in enumerate(xi))
        f.write(f"{yi:+d} {feats}\n")
