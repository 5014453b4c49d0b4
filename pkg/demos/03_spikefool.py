"""SpikeFool on a single sample.

The attack linearizes the spike-count classifier around the input, finds a
boundary point with DeepFool, and then solves for a sparse integer
perturbation that reaches past it. The result is a binary raster differing
from the original in a handful of voxels.
"""

import numpy as np

from spikefool import attacks, snn_core
from _desk import desk, show

net, ds = desk()
x, y = ds.x_test[0], int(ds.y_test[0])
res = attacks.spikefool(net, x, attacks.SpikeFoolConfig(eta=0.1, lam=2.0), label=y)
print(f"label {y} -> {res.adversarial_label}, success {res.success}, L0 {res.l0}, queries {res.queries}")
diff = res.x_adv.astype(int) - x.astype(int)
print("added per time bin:", (diff > 0).sum(axis=(1, 2, 3)).tolist())
print("removed per time bin:", (diff < 0).sum(axis=(1, 2, 3)).tolist())
show(x, "\noriginal:")
show(res.x_adv, "\nadversarial:")
counts = snn_core.forward(net, res.x_adv)[0]
print("\noutput spike counts on the adversarial raster:", counts.astype(int).tolist())
assert set(np.unique(res.x_adv)) <= {0, 1}
