"""
A biased embedding set
======================

Draw synthetic encoder embeddings where the label and the sensitive
attribute are correlated, then watch a plain linear probe inherit the bias.
"""

import numpy as np

from fairlatent.data import SynthConfig, generate_synthetic
from fairlatent.metrics import PredictionSet, report
from fairlatent.probe import fit_logistic

# rho sets how often y and s agree in the population
ds = generate_synthetic(SynthConfig(n=8192, d=16, rho=0.8, seed=7))
print(ds.n, "rows of width", ds.d)

# the four (y, s) cells are far from balanced
for y in (0, 1):
    for s in (0, 1):
        print(f"y={y} s={s}:", int(np.sum((ds.y == y) & (ds.s[:, 0] == s))))

print("corr(y, s) =", np.corrcoef(ds.y, ds.s[:, 0])[0, 1].round(3))

# fit a logistic probe on the raw embeddings
tr, te = ds.subset("train"), ds.subset("test")
probe = fit_logistic(tr.e, tr.y.astype(int), 2)
pred = probe.predict(te.e)

# the minority cells pay for the shortcut
rep = report(PredictionSet(te.y, pred, te.s))
print(rep.as_percent())
