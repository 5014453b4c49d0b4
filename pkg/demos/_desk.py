"""Small shared setup for the demos: a synthetic dataset and a trained spiking net."""

import numpy as np

from spikefool import event_data, snn_core, training


def desk(n_train=512, n_test=64, epochs=12, seed=1):
    ds = event_data.synth_dataset(n_classes=4, H=16, W=16, T=10, n_train=n_train, n_test=n_test, seed=seed)
    net = snn_core.build_network(snn_core.small_cnn([2, 16, 16], 4), seed=0)
    net, report = training.train_bptt(net, ds.x_train, ds.y_train,
                                      training.TrainConfig(lr=3e-3, epochs=epochs, seed=0))
    print(f"desk net trained, test accuracy {training.accuracy(net, ds.x_test, ds.y_test):.1%}")
    return net, ds


def show(raster, title="", bins=range(5)):
    """Print selected time bins side by side (# = ON, o = OFF, * = both)."""
    raster = np.asarray(raster)
    bins = [b for b in bins if b < raster.shape[0]]
    print(title)
    print("   ".join(f"bin {b}".ljust(raster.shape[-1]) for b in bins))
    for y in range(raster.shape[-2]):
        cells = []
        for b in bins:
            off, on = raster[b, 0, y], raster[b, 1, y]
            cells.append("".join("*" if a and c else "#" if a else "o" if c else "." for a, c in zip(on, off)))
        print("   ".join(cells))
