"""A universal targeted patch.

One small spatio-temporal block, pasted at a random spot over the moving
object, pushes many different samples to the same target class. A random
patch of the same shape is the baseline.
"""

from spikefool import attacks, harness
from _desk import desk, show

net, ds = desk()
target = 2
shape = (10, 2, 8, 8)
patch = attacks.train_patch(net, ds.x_train[:200], ds.y_train[:200], target, shape, seed=0)
show(patch.data, f"trained patch for target {target}:")
trained = harness.patch_campaign(net, ds.x_test, ds.y_test, patch, seed=0)
rand = harness.patch_campaign(net, ds.x_test, ds.y_test, attacks.random_patch(shape, 0, target), seed=0)
print(f"\ntargeted success on {trained['n_eligible']} eligible samples: "
      f"trained {trained['success_rate']:.1f}%, random {rand['success_rate']:.1f}%")
