"""Two PGD-style sparse attacks compared with SpikeFool.

cd_pgd ascends the loss on a continuous copy and then flips the voxels with
the strongest gradient one at a time. prob_pgd instead optimizes per-voxel
flip probabilities through a binary-concrete relaxation.
"""

import numpy as np

from spikefool import attacks
from _desk import desk

net, ds = desk()
rows = {"spikefool": [], "cd_pgd": [], "prob_pgd": []}
for i in range(12):
    x, y = ds.x_test[i], int(ds.y_test[i])
    rows["spikefool"].append(attacks.spikefool(net, x, label=y))
    rows["cd_pgd"].append(attacks.cd_pgd(net, x, y))
    rows["prob_pgd"].append(attacks.prob_pgd(net, x, y, seed=i))

for name, results in rows.items():
    wins = [r.l0 for r in results if r.success]
    print(f"{name:<10} success {len(wins)}/{len(results)}  median L0 {np.median(wins) if wins else None}  "
          f"median queries {np.median([r.queries for r in results])}")
