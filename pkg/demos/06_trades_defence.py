"""Adversarial training with a TRADES-style objective.

The loss adds a KL term between outputs on clean and PGD-perturbed inputs.
With beta_rob = 0 the extra term vanishes and training is exactly plain
BPTT. At this scale the L-infinity inner attack barely changes how many
voxels a sparse attack needs, which the numbers below make visible.
"""

import numpy as np

from spikefool import event_data, harness, snn_core, training

ds = event_data.synth_dataset(n_classes=4, H=16, W=16, T=10, n_train=384, n_test=48, seed=1)
cfg = training.TrainConfig(lr=3e-3, epochs=6, seed=0)
fresh = snn_core.build_network(snn_core.small_cnn([2, 16, 16], 4), seed=0)
plain, _ = training.train_bptt(fresh.copy(), ds.x_train, ds.y_train, cfg)
for beta in (0.0, 0.05):
    net, _ = training.train_trades(fresh.copy(), ds.x_train, ds.y_train, cfg, training.TradesConfig(beta_rob=beta))
    same = all(np.array_equal(a, b) for (_, _, a), (_, _, b) in zip(net.parameters(), plain.parameters()))
    rep = harness.run_campaign(net, ds.x_test, ds.y_test, {"name": "spikefool"})
    print(f"beta_rob {beta}: acc {training.accuracy(net, ds.x_test, ds.y_test):.1%}, "
          f"median SpikeFool L0 {rep.median_l0}, identical to plain BPTT: {same}")
