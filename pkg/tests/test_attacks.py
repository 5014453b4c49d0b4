import numpy as np
import pytest

from spikefool import attacks as at
from spikefool import event_data as ed
from spikefool import snn_core as core
from spikefool import training as tr

from oracles import count_changed, min_support_solutions


def affine_net(w, b):
    """Analog linear classifier on a ``[1, 1, 1, n]`` input."""
    w = np.asarray(w, dtype=float)
    layers = [core.Flatten(), core.Linear(w.shape[1], w.shape[0], weight=w, bias_value=np.asarray(b, float))]
    return core.Network(layers, (1, 1, w.shape[1]), w.shape[0], core.ANALOG)


def as_input(v):
    return np.asarray(v, dtype=float).reshape(1, 1, 1, -1)


@pytest.fixture(scope="module")
def desk():
    ds = ed.synth_dataset(n_classes=4, H=8, W=8, T=6, n_train=256, n_test=24, noise_rate=0.005, seed=2)
    net = core.build_network(core.small_cnn([2, 8, 8], 4), seed=0)
    net, _ = tr.train_bptt(net, ds.x_train, ds.y_train, tr.TrainConfig(lr=3e-3, epochs=6, seed=0))
    return net, ds


class CountingForward:
    """Wraps snn_core.forward and counts samples pushed through it."""

    def __init__(self, fn):
        self.fn = fn
        self.samples = 0

    def __call__(self, net, x, *args, **kwargs):
        self.samples += 1 if np.ndim(x) == 4 else len(x)
        return self.fn(net, x, *args, **kwargs)


# --------------------------------------------------------------------------- DeepFool


@pytest.mark.parametrize("seed", range(5))
def test_deepfool_affine_first_step_is_the_projection(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(2, 6))
    b = rng.normal(size=2)
    x = rng.normal(size=6)
    net = affine_net(w, b)
    a = w[1] - w[0]
    f = float(np.dot(a, x) + b[1] - b[0])
    res = at.deepfool(net, as_input(x), eta=0.0)
    assert res.raw_step_norms[0] == pytest.approx(abs(f) / np.linalg.norm(a), abs=1e-6)
    assert res.success and res.iterations <= 2
    step = (res.x_boundary - as_input(x)).ravel()
    cos = np.dot(step, a) / (np.linalg.norm(step) * np.linalg.norm(a))
    assert abs(cos) == pytest.approx(1.0, abs=1e-9)


def test_deepfool_eta_clamp_stretches_short_steps():
    net = affine_net([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    x = as_input([0.51, 0.5])  # boundary is 0.01 / sqrt(2) away
    res = at.deepfool(net, x, eta=0.3)
    assert np.linalg.norm(res.x_boundary - x) == pytest.approx(0.3)


def test_deepfool_on_already_misclassified_input():
    net = affine_net([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    x = as_input([0.0, 1.0])
    res = at.deepfool(net, x, label=0)
    assert res.success and res.iterations == 0 and np.array_equal(res.x_boundary, x)


def test_deepfool_zero_gradient_is_degenerate():
    net = affine_net(np.zeros((3, 4)), [1.0, 0.0, 0.0])
    with pytest.raises(at.DegenerateGradientError):
        at.deepfool(net, as_input(np.ones(4)))


# --------------------------------------------------------------------------- linear solver


def test_solver_point_on_plane_is_unchanged():
    x = np.array([1.0, 2.0])
    out, sat = at.linear_solver(x, x, np.array([1.0, 1.0]), -np.inf, np.inf)
    assert np.array_equal(out, x) and not sat


def test_solver_moves_only_the_dominant_coordinate():
    out, sat = at.linear_solver(np.zeros(2), np.array([3.0, 5.0]), np.array([1.0, 0.0]), -np.inf, np.inf)
    assert out[1] == 0.0 and out[0] > 3.0 and not sat


def test_solver_moves_to_next_coordinate_after_saturation():
    w = np.array([3.0, 2.0, 1.0])
    x = np.zeros(3)
    target = np.array([5.0 / 3.0, 0.0, 0.0])  # needs <w, z> to reach 5
    l, u = np.array([0.0, 0.0, 0.0]), np.array([1.0, 1.5, 1.0])
    out, sat = at.linear_solver(x, target, w, l, u)
    assert min_support_solutions(x, target, w, l, u) == 2
    assert not sat
    assert out[0] == 1.0 and 0 < out[1] <= 1.5 and out[2] == 0.0
    assert np.dot(w, out - target) > 0


def test_solver_reports_saturation():
    out, sat = at.linear_solver(np.zeros(2), np.array([10.0, 10.0]), np.ones(2), 0.0, 1.0)
    assert sat and np.array_equal(out, np.ones(2))


# --------------------------------------------------------------------------- SpikeFool


def test_spikefool_misclassified_input_is_immediate(desk):
    net, ds = desk
    x = ds.x_test[0]
    pred = int(np.argmax(core.forward(net, x)[0]))
    res = at.spikefool(net, x, label=(pred + 1) % 4)
    assert res.success and res.l0 == 0 and res.queries == 1


def test_spikefool_outputs_binary_and_recounted(desk, monkeypatch):
    net, ds = desk
    for x, y in zip(ds.x_test[:8], ds.y_test[:8]):
        counter = CountingForward(core.forward)
        monkeypatch.setattr(core, "forward", counter)
        res = at.spikefool(net, x, label=int(y))
        monkeypatch.undo()
        assert set(np.unique(res.x_adv)) <= {0, 1}
        assert res.l0 == count_changed(res.x_adv, x)
        assert res.queries == counter.samples >= 1
        if res.success:
            assert int(np.argmax(core.forward(net, res.x_adv)[0])) == res.adversarial_label != int(y)


def test_spikefool_affine_unbounded_first_direction():
    # with an unbounded box and lam=1 the first boundary point is the DeepFool projection
    rng = np.random.default_rng(3)
    w = rng.normal(size=(2, 5))
    net = affine_net(w, [0.0, 0.0])
    x = as_input(np.where(w[0] - w[1] > 0, 1.0, 0.0))
    res = at.deepfool(net, x, eta=0.0)
    cos = np.dot((res.x_boundary - x).ravel(), w[1] - w[0])
    cos /= np.linalg.norm(res.x_boundary - x) * np.linalg.norm(w[1] - w[0])
    assert abs(cos) == pytest.approx(1.0)
    out = at.spikefool(net, x, at.SpikeFoolConfig(eta=0.0, lam=1.0, l=-1e9, u=1e9))
    assert out.success


def test_spikefool_config_validation():
    with pytest.raises(ValueError):
        at.SpikeFoolConfig(eta=-1)
    with pytest.raises(ValueError):
        at.SpikeFoolConfig(l=1, u=1)


# --------------------------------------------------------------------------- PGD variants


def test_cd_pgd_zero_steps_cannot_flip(desk):
    net, ds = desk
    x, y = ds.x_test[1], int(ds.y_test[1])
    pred = int(np.argmax(core.forward(net, x)[0]))
    res = at.cd_pgd(net, x, pred, n_steps=0)
    assert not res.success and res.l0 == 0 and np.array_equal(res.x_adv, x)


def test_cd_pgd_flips_the_dominant_weight_first():
    w = np.array([[0.0, 0.0, 0.0, 0.0], [0.1, 2.0, -0.2, 0.05]])
    net = affine_net(w, [1.0, 0.0])
    x = as_input([0, 0, 0, 0])
    res = at.cd_pgd(net, x, 0, n_steps=3)
    assert res.success and res.l0 == 1 and res.x_adv.ravel()[1] == 1


def test_pgd_variants_binary_and_counted(desk, monkeypatch):
    net, ds = desk
    for i, (x, y) in enumerate(zip(ds.x_test[:4], ds.y_test[:4])):
        for attack in (lambda: at.cd_pgd(net, x, int(y)),
                       lambda: at.prob_pgd(net, x, int(y), at.ProbPgdConfig(n_steps=5), seed=i)):
            counter = CountingForward(core.forward)
            monkeypatch.setattr(core, "forward", counter)
            res = attack()
            monkeypatch.undo()
            assert set(np.unique(res.x_adv)) <= {0, 1}
            assert res.l0 == count_changed(res.x_adv, x)
            assert res.queries == counter.samples


def test_binary_concrete_concentrates_at_low_temperature():
    rng = np.random.default_rng(0)
    p = np.where(rng.random(20_000) < 0.5, 0.05, 0.95)
    s, _ = at.sample_binary_concrete(p, 0.01, rng)
    near = np.minimum(s, 1 - s) <= 1e-3
    assert near.mean() >= 0.99


def test_binary_concrete_matches_direct_sampling():
    rng = np.random.default_rng(1)
    p = np.full(50_000, 0.3)
    s, r = at.sample_binary_concrete(p, 0.01, rng)
    # the hard limit is 1{r > 1 - p}; the relaxed sample agrees away from the threshold
    hard = (r > 1 - p).astype(float)
    assert np.mean(np.abs(s - hard) > 0.5) < 1e-3
    assert abs(hard.mean() - 0.3) < 0.01


def test_prob_pgd_zero_steps_returns_input(desk):
    net, ds = desk
    x, y = ds.x_test[2], int(ds.y_test[2])
    pred = int(np.argmax(core.forward(net, x)[0]))
    assert np.array_equal(tr.round_half_up(np.clip(x, 0.05, 0.95)), x)
    res = at.prob_pgd(net, x, pred, at.ProbPgdConfig(n_steps=0))
    assert np.array_equal(res.x_adv, x) and res.l0 == 0


def test_prob_gradient_average_is_mean_of_single_samples(desk):
    net, ds = desk
    x, y = ds.x_test[3].astype(float), int(ds.y_test[3])
    p = np.clip(x, 0.05, 0.95)
    cfg10 = at.ProbPgdConfig(n_mc=10)
    mean10, per = at._prob_grad(net, at._Oracle(net), p, y, cfg10, np.random.default_rng(5))
    rng = np.random.default_rng(5)
    singles = [at._prob_grad(net, at._Oracle(net), p, y, at.ProbPgdConfig(n_mc=1), rng)[0] for _ in range(10)]
    assert np.allclose(mean10, per.mean(axis=0))
    assert np.allclose(mean10, np.mean(singles, axis=0), rtol=1e-5, atol=1e-7)


def test_prob_pgd_config_validation():
    with pytest.raises(ValueError):
        at.ProbPgdConfig(temperature=0)
    with pytest.raises(ValueError):
        at.ProbPgdConfig(n_mc=0)


# --------------------------------------------------------------------------- patches


def test_random_patch_reproducible_binary_and_half_full():
    a = at.random_patch((25, 2, 10, 20), seed=4)
    b = at.random_patch((25, 2, 10, 20), seed=4)
    assert np.array_equal(a.data, b.data)
    assert set(np.unique(a.data)) <= {0, 1}
    assert 0.47 <= a.data.mean() <= 0.53


def test_apply_patch_semantics():
    rng = np.random.default_rng(0)
    x = (rng.random((3, 2, 6, 6)) < 0.3).astype(np.uint8)
    zero = at.Patch(np.zeros((3, 2, 2, 2)))
    assert np.array_equal(at.apply_patch(x, zero, (1, 1)), x)
    ones = at.Patch(np.ones((3, 2, 2, 2)))
    out = at.apply_patch(x, ones, (0, 0))
    assert out.max() == 1 and np.all(out[:, :, :2, :2] == 1)
    assert np.array_equal(at.apply_patch(out, ones, (0, 0)), out)
    with pytest.raises(ValueError):
        at.apply_patch(x, ones, (5, 0))


def test_apply_patch_disjoint_footprint_l0():
    x = np.zeros((2, 2, 6, 6), dtype=np.uint8)
    x[:, :, 4:, 4:] = 1
    p = at.random_patch((2, 2, 3, 3), seed=1)
    out = at.apply_patch(x, p, (0, 0))
    assert count_changed(out, x) == int(p.data.sum())


def test_train_patch_zero_epochs_is_initial(desk):
    net, ds = desk
    p = at.train_patch(net, ds.x_train[:10], ds.y_train[:10], 1, (6, 2, 3, 3), epochs=0)
    assert not p.data.any() and p.target_label == 1


def test_train_patch_skips_target_samples(desk):
    net, ds = desk
    x, y = ds.x_train[:12], ds.y_train[:12]
    extra = ds.x_train[12:40][ds.y_train[12:40] == 2][:3]
    a = at.train_patch(net, x, y, 2, (6, 2, 3, 3), seed=3, max_steps=5)
    b = at.train_patch(net, np.concatenate([x, extra]), np.concatenate([y, np.full(len(extra), 2)]), 2,
                       (6, 2, 3, 3), seed=3, max_steps=5)
    assert np.array_equal(a.data, b.data)
    assert set(np.unique(a.data)) <= {0, 1}


def test_train_patch_needs_eligible_samples(desk):
    net, ds = desk
    with pytest.raises(ValueError):
        at.train_patch(net, ds.x_train[:3], np.zeros(3, dtype=int), 0, (6, 2, 3, 3))


def test_active_bbox_and_random_position():
    x = np.zeros((2, 1, 10, 10))
    x[0, 0, 2, 3] = x[1, 0, 6, 7] = 1
    assert at.active_bbox(x) == (2, 3, 7, 8)
    rng = np.random.default_rng(0)
    for _ in range(50):
        r, c = at.random_position((10, 10), (3, 3), (2, 3, 7, 8), rng)
        assert 2 <= r <= 4 and 3 <= c <= 5
