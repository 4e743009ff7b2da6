"""
Input-space loss surface of a trained moons classifier
======================================================

    python demos/03_landscape.py
"""

# %%
from dataclasses import replace

import numpy as np

from trat import config
from trat.cli import build_datasets
from trat.landscape import input_surface, weight_sharpness
from trat.trainer import train

cfg = config.load("moons-trades")
tr, te = build_datasets(cfg)
tcfg = replace(cfg.train(), epochs=40, lr_drops=(30,), checkpoint_epochs=())
net = train(tr, tcfg).net

# %%
# Axis 1 follows the sign of the input gradient, axis 2 is a fixed
# Rademacher direction.  A flat surface near the origin is what robust
# training is after.
grid = input_surface(net, te.inputs[0], int(te.labels[0]), np.linspace(-0.3, 0.3, 13),
                     np.linspace(-0.3, 0.3, 13))
shades = " .:-=+*#%@"
lo, hi = grid.loss.min(), grid.loss.max()
print(f"loss from {lo:.3g} (' ') to {hi:.3g} ('@'); rows step along the gradient sign")
for row in grid.loss:
    print("".join(shades[int((v - lo) / (hi - lo + 1e-300) * (len(shades) - 1))] * 2 for v in row))

# %%
# Weight-space view: mean loss increase under N(0, 0.01^2) weight noise.
print(weight_sharpness(net, te.inputs, te.labels, sigma=0.01, n_samples=100))
