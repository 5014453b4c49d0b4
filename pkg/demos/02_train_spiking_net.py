"""Training spiking networks two ways, then quantizing to 8 bits.

BPTT trains the spiking net directly through a surrogate gradient. The
alternative trains an analog CNN on time-summed frames and rescales its
weights so the integrate-and-fire version fires at matching rates.
"""

from spikefool import event_data, snn_core, training

ds = event_data.synth_dataset(n_classes=4, H=16, W=16, T=10, n_train=384, n_test=128, seed=1)
cfg = training.TrainConfig(lr=3e-3, epochs=8, seed=0)
test = (ds.x_test, ds.y_test)

net = snn_core.build_network(snn_core.small_cnn([2, 16, 16], 4), seed=0)
net, report = training.train_bptt(net, ds.x_train, ds.y_train, cfg, test)
for e in report["epochs"]:
    print(f"bptt epoch {e['epoch']}: loss {e['loss']:.3f} test acc {e['test_accuracy']:.1%}")

# classes come in time-reversed pairs, which time-summed frames cannot tell apart,
# so the transferred net tops out near chance within each pair
analog = snn_core.build_network(snn_core.small_cnn([2, 16, 16], 4, mode=snn_core.ANALOG), seed=0)
analog, _ = training.train_analog(analog, ds.x_train, ds.y_train, cfg, test)
spiking = training.transfer_weights(analog, ds.x_train[:128])
print(f"\nanalog acc {training.accuracy(analog, *test):.1%}, after weight transfer {training.accuracy(spiking, *test):.1%}")

q = training.quantize_weights(net, 8)
print(f"BPTT net full precision {training.accuracy(net, *test):.1%}, int8 {training.accuracy(q, *test):.1%}")
