import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikefool import snn_core as core

from oracles import central_difference, dyadic, random_spiking_net, relative_error, simulate


# --------------------------------------------------------------------------- neuron


def run_iaf(inputs, theta=1.0):
    state = core.IafState(np.zeros(1), theta)
    spikes = []
    for i in inputs:
        s, state = core.iaf_step(state, np.array([i]))
        spikes.append(int(s[0]))
    return spikes, float(state.v[0])


def test_iaf_integrates_then_resets_by_subtraction():
    spikes, v = run_iaf([0.6, 0.6])
    assert spikes == [0, 1] and v == pytest.approx(0.2)


def test_iaf_zero_input_is_silent():
    spikes, v = run_iaf([0.0] * 5)
    assert spikes == [0] * 5 and v == 0.0


def test_iaf_single_spike_cap_carries_residual():
    spikes, v = run_iaf([2.5])
    assert spikes == [1] and v == 1.5
    spikes, v = run_iaf([2.5, 0.0])
    assert spikes == [1, 1] and v == 0.5


def test_iaf_rejects_non_finite_and_bad_shape():
    state = core.IafState(np.zeros(2))
    with pytest.raises(FloatingPointError):
        core.iaf_step(state, np.array([np.nan, 0.0]))
    with pytest.raises(core.ShapeError):
        core.iaf_step(state, np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 8), min_size=1, max_size=30))
def test_non_leaky_conservation(eighths):
    # inputs never exceed theta, so the one-spike cap cannot bind twice in a row
    inputs = [e / 8 for e in eighths]
    spikes, _ = run_iaf(inputs)
    assert sum(spikes) == math.floor(sum(inputs))


# --------------------------------------------------------------------------- forward


def tiny_linear(weight, threshold=1.0):
    layers = [core.Flatten(), core.Linear(weight.shape[1], weight.shape[0], bias=False, weight=weight),
              core.SpikingIAF(threshold)]
    return core.Network(layers, (1, 1, weight.shape[1]), weight.shape[0])


def test_all_zero_raster_gives_zero_counts():
    net = core.build_network(core.small_cnn([2, 8, 8], 3), seed=0)
    counts, _ = core.forward(net, np.zeros((5, 2, 8, 8)))
    assert np.all(counts == 0)


def test_identity_weights_one_spike_on_one_hot():
    net = tiny_linear(np.eye(3))
    x = np.zeros((4, 1, 1, 3))
    x[0, 0, 0, 1] = 1
    counts, _ = core.forward(net, x)
    assert counts.tolist() == [0, 1, 0]


def test_forward_matches_scalar_simulator():
    rng = np.random.default_rng(5)
    for _ in range(20):
        net = random_spiking_net(rng, max_hw=8)
        x = (rng.random((int(rng.integers(1, 8)),) + net.input_shape) < 0.3).astype(np.uint8)
        assert np.array_equal(core.forward(net, x)[0], simulate(net, x))


def test_forward_is_deterministic_and_batch_consistent():
    net = core.build_network(core.small_cnn([2, 8, 8], 3), seed=1)
    xs = (np.random.default_rng(0).random((4, 6, 2, 8, 8)) < 0.3).astype(np.uint8)
    batch, _ = core.forward(net, xs)
    for i in range(4):
        single, _ = core.forward(net, xs[i])
        assert np.array_equal(single, batch[i])
    assert np.array_equal(core.forward(net, xs)[0], batch)


def test_shape_mismatch_raises():
    net = core.build_network(core.small_cnn([2, 8, 8], 3), seed=0)
    with pytest.raises(core.ShapeError):
        core.forward(net, np.zeros((3, 2, 9, 8)))
    with pytest.raises(core.ShapeError):
        core.forward(net, np.zeros((2, 8, 8)))


def test_analog_requires_single_step():
    net = core.build_network(core.small_cnn([1, 8, 8], 2, mode=core.ANALOG), seed=0)
    with pytest.raises(core.ShapeError):
        core.forward(net, np.zeros((2, 1, 8, 8)))


def test_analog_forward_matches_dense_oracle():
    rng = np.random.default_rng(2)
    net = core.build_network(core.small_cnn([1, 6, 6], 3, channels=(2, 3), mode=core.ANALOG), seed=3,
                             dtype=np.float64)
    for i, name, arr in list(net.parameters()):
        net.set_parameter(i, name, dyadic(rng, arr.shape))
    frame = rng.integers(0, 4, size=(1, 1, 6, 6)).astype(float)
    assert np.allclose(core.forward(net, frame)[0], simulate(net, frame))


def test_mode_invariants():
    with pytest.raises(ValueError):
        core.build_network(core.small_cnn([1, 8, 8], 2, mode=core.ANALOG) | {"mode": core.SPIKING})
    arch = core.small_cnn([1, 8, 8], 2)
    arch["mode"] = core.ANALOG
    with pytest.raises(ValueError):
        core.build_network(arch)


def test_clamp_min_bounds_membrane():
    layer = core.SpikingIAF(1.0, clamp_min=0.0)
    net = core.Network([core.Flatten(), core.Linear(1, 1, bias=False, weight=np.array([[1.0]])), layer], (1, 1, 1), 1)
    # -3 then +1: without the clamp the neuron stays silent, with it the +1 spikes
    x = np.array([-3.0, 1.0]).reshape(2, 1, 1, 1)
    assert core.forward(net, x)[0][0] == 1
    net.layers[2] = core.SpikingIAF(1.0)
    assert core.forward(net, x)[0][0] == 0


# --------------------------------------------------------------------------- backward


def loss_fn(net, x, u, relaxed):
    return float(np.dot(u, core.forward(net, x, relaxed=relaxed)[0]))


def gradient_check(net, x, relaxed, rng):
    """Max relative error of input and parameter gradients against central differences."""
    counts, tape = core.forward(net, x, record=True, relaxed=relaxed)
    u = rng.normal(size=counts.shape)
    g_in, g_par = core.backward(tape, u)
    errs = [relative_error(g_in, central_difference(lambda z: loss_fn(net, z, u, relaxed), x))]
    for i, name, arr in list(net.parameters()):
        def f(w, i=i, name=name):
            probe = net.copy()
            probe.set_parameter(i, name, w)
            return loss_fn(probe, x, u, relaxed)

        errs.append(relative_error(g_par[i][name], central_difference(f, arr)))
    return max(errs)


def small_analog(rng):
    layers = [{"kind": "conv2d", "out_channels": 2, "kernel_size": 3, "padding": 1, "bias": True},
              {"kind": "relu"}, {"kind": "sum_pool2d"},
              {"kind": "conv2d", "out_channels": 2, "kernel_size": 3, "stride": 2, "bias": True},
              {"kind": "relu"}, {"kind": "flatten"}, {"kind": "linear", "out_features": 3, "bias": True}]
    arch = {"input_shape": [1, 8, 8], "n_classes": 3, "mode": core.ANALOG, "layers": layers}
    return core.build_network(arch, seed=int(rng.integers(1 << 30)), dtype=np.float64)


def small_spiking(rng):
    layers = [{"kind": "conv2d", "out_channels": 2, "kernel_size": 3, "padding": 1, "bias": True},
              {"kind": "spiking_iaf"}, {"kind": "sum_pool2d"},
              {"kind": "flatten"}, {"kind": "linear", "out_features": 3, "bias": True},
              {"kind": "spiking_iaf", "threshold": 0.8}]
    arch = {"input_shape": [2, 6, 6], "n_classes": 3, "mode": core.SPIKING, "layers": layers}
    return core.build_network(arch, seed=int(rng.integers(1 << 30)), dtype=np.float64)


def test_analog_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(3):
        net = small_analog(rng)
        x = rng.random((1, 1, 8, 8))
        assert gradient_check(net, x, False, rng) < 1e-4


def test_relaxed_spiking_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(3):
        net = small_spiking(rng)
        x = rng.random((4, 2, 6, 6))
        assert gradient_check(net, x, True, rng) < 1e-4


def test_batchnorm_training_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    layers = [{"kind": "conv2d", "out_channels": 2, "kernel_size": 3, "padding": 1}, {"kind": "batchnorm"},
              {"kind": "relu"}, {"kind": "flatten"}, {"kind": "linear", "out_features": 2}]
    net = core.build_network({"input_shape": [1, 4, 4], "n_classes": 2, "mode": core.ANALOG,
                              "layers": layers}, seed=0, dtype=np.float64)
    x = rng.random((3, 1, 1, 4, 4))
    u = rng.normal(size=(3, 2))

    def f(z):
        return float((u * core.forward(net.copy(), z, train=True)[0]).sum())

    _, tape = core.forward(net.copy(), x, record=True, train=True)
    g, _ = core.backward(tape, u)
    assert relative_error(g, central_difference(f, x)) < 1e-4


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(2)
    net = small_spiking(rng)
    _, tape = core.forward(net, rng.random((3, 2, 6, 6)), record=True)
    g, gp = core.backward(tape, np.zeros(3))
    assert not np.any(g) and all(not np.any(v) for d in gp for v in d.values())


def test_no_gradient_where_surrogate_is_zero():
    net = tiny_linear(np.array([[-0.5]]))
    x = np.full((3, 1, 1, 1), 1.0)  # membrane only falls, outside the surrogate's support
    _, tape = core.forward(net, x, record=True)
    g, _ = core.backward(tape, np.ones(1))
    assert not np.any(g)


def test_tape_replay_reproduces_outputs():
    net = core.build_network(core.small_cnn([2, 8, 8], 3), seed=2)
    x = (np.random.default_rng(1).random((5, 2, 8, 8)) < 0.3).astype(np.uint8)
    counts, tape = core.forward(net, x, record=True)
    assert np.array_equal(tape.replay(), counts)


def test_backward_shape_check():
    net = tiny_linear(np.eye(2))
    _, tape = core.forward(net, np.zeros((2, 1, 1, 2)), record=True)
    with pytest.raises(core.ShapeError):
        core.backward(tape, np.zeros(3))


def test_surrogate_is_triangular():
    v = np.array([-1.0, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0])
    assert core.surrogate(v).tolist() == [0.0, 0.0, 0.5, 1.0, 0.5, 0.0, 0.0]
    # primitive is an antiderivative
    h = 1e-6
    mid = np.array([0.3, 0.9, 1.4, 1.7])
    num = (core.surrogate_primitive(mid + h) - core.surrogate_primitive(mid - h)) / (2 * h)
    assert np.allclose(num, core.surrogate(mid), atol=1e-8)


# --------------------------------------------------------------------------- decoding and losses


@pytest.mark.parametrize("counts,label", [((3, 5, 5), 1), ((0, 0, 0), 0), ((0, 7, 2), 1)])
def test_argmax_lowest_index_tie_break(counts, label):
    net = tiny_linear(np.eye(3))
    x = np.zeros((max(counts) or 1, 1, 1, 3))
    for k, c in enumerate(counts):
        x[:c, 0, 0, k] = 1
    got, lab = core.logits_and_label(net, x)
    assert got.tolist() == list(counts) and int(lab) == label


def test_log_softmax_examples():
    assert core.log_softmax(np.array([0.0, 0.0]))[0] == pytest.approx(-math.log(2))
    assert core.log_softmax(np.array([10.0, 0.0]))[0] == pytest.approx(-math.log1p(math.exp(-10)), rel=1e-12)
    assert core.cross_entropy(np.full(11, 3.0), 7) == pytest.approx(math.log(11))


def test_log_softmax_stable_for_large_counts():
    assert np.all(np.isfinite(core.log_softmax(np.array([1e4, 0.0, -1e4]))))


def test_cross_entropy_grad_matches_finite_differences():
    z = np.array([1.0, 3.0, -2.0])
    num = central_difference(lambda v: float(core.cross_entropy(v, 2)), z)
    assert np.allclose(core.cross_entropy_grad(z, 2), num, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.integers(0, 1000))
def test_kl_is_non_negative_and_zero_on_self(vals, seed):
    z = np.array(vals)
    other = z + np.random.default_rng(seed).normal(size=z.shape)
    assert core.kl_divergence(other, z)[0] >= -1e-12
    assert core.kl_divergence(z, z)[0] == pytest.approx(0.0, abs=1e-12)


def test_kl_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a, r = rng.normal(size=4) * 3, rng.normal(size=4) * 3
    _, ga, gr = core.kl_divergence(a, r)
    assert np.allclose(ga, central_difference(lambda v: float(core.kl_divergence(v, r)[0]), a), atol=1e-7)
    assert np.allclose(gr, central_difference(lambda v: float(core.kl_divergence(a, v)[0]), r), atol=1e-7)


# --------------------------------------------------------------------------- construction and files


def test_lenet5_shapes():
    for mode in (core.SPIKING, core.ANALOG):
        net = core.build_network(core.lenet5([2, 32, 32], 10, mode=mode, batchnorm=True), seed=0)
        assert net.n_classes == 10 and net.mode == mode


def test_model_file_round_trip(tmp_path):
    net = core.build_network(core.lenet5([2, 16, 16], 4, batchnorm=True), seed=3)
    for layer in net.layers:
        if isinstance(layer, core.BatchNorm):
            layer.running_mean = np.arange(layer.running_mean.size, dtype=np.float32)
    core.save_model(net, tmp_path / "m.snn")
    back = core.load_model(tmp_path / "m.snn")
    assert (tmp_path / "m.snn").read_bytes()[:4] == b"SNN0"
    assert back.specs() == net.specs()
    for (_, _, a), (_, _, b) in zip(net.parameters(), back.parameters()):
        assert np.array_equal(a, b)
    x = (np.random.default_rng(0).random((4, 2, 16, 16)) < 0.3).astype(np.uint8)
    assert np.array_equal(core.forward(net, x)[0], core.forward(back, x)[0])


def test_fold_batchnorm_preserves_inference():
    rng = np.random.default_rng(0)
    net = core.build_network(core.lenet5([1, 16, 16], 3, mode=core.ANALOG, batchnorm=True), seed=1,
                             dtype=np.float64)
    for layer in net.layers:
        if isinstance(layer, core.BatchNorm):
            layer.running_mean = rng.normal(size=layer.running_mean.shape)
            layer.running_var = rng.random(layer.running_var.shape) + 0.5
            layer.weight = rng.normal(size=layer.weight.shape)
            layer.bias = rng.normal(size=layer.bias.shape)
    folded = core.fold_batchnorm(net)
    assert not any(isinstance(l, core.BatchNorm) for l in folded.layers)
    x = rng.random((2, 1, 1, 16, 16))
    assert np.allclose(core.forward(net, x)[0], core.forward(folded, x)[0])
