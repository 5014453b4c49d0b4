"""Training: surrogate-gradient BPTT, analog-to-spiking weight transfer,
8-bit weight quantization and TRADES adversarial training."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import snn_core as core
from .event_data import accumulate_frames

__all__ = [
    "TrainConfig",
    "TradesConfig",
    "TrainingDivergence",
    "CalibrationError",
    "Adam",
    "train_bptt",
    "train_trades",
    "train_analog",
    "accuracy",
    "accumulate_frames",
    "transfer_weights",
    "quantize_weights",
    "round_half_up",
    "pgd_linf",
    "trades_step",
    "ce_step",
]

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.betas = tuple(self.betas)


@dataclass
class TradesConfig:
    beta_rob: float = 0.05
    eps: float = 0.5
    n_pgd: int = 5
    step_size: float | None = None

    def __post_init__(self):
        if self.beta_rob < 0:
            raise ValueError("beta_rob must be >= 0")
        if not 0 < self.eps <= 1:
            raise ValueError("eps must lie in (0, 1]")
        if self.n_pgd < 1:
            raise ValueError("n_pgd must be >= 1")
        if self.step_size is None:
            self.step_size = 2.5 * self.eps / self.n_pgd


def round_half_up(x):
    """Round to the nearest integer with ties going up (0.5 -> 1)."""
    return np.floor(np.asarray(x) + 0.5)


class Adam:
    def __init__(self, net: core.Network, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.net = net
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, name, param in list(self.net.parameters()):
            g = grads[i].get(name)
            if g is None:
                continue
            key = (i, name)
            m = self.m.get(key, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(key, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[key], self.v[key] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.net.set_parameter(i, name, (param - update).astype(param.dtype))


def _add_grads(a, b):
    out = []
    for ga, gb in zip(a, b):
        d = dict(ga)
        for k, v in gb.items():
            d[k] = d[k] + v if k in d else v
        out.append(d)
    return out


def ce_step(net, xb, yb, train=True):
    """Mean cross-entropy of a batch and its parameter gradients."""
    counts, tape = core.forward(net, xb, record=True, train=train)
    loss = core.cross_entropy(counts, yb).mean()
    upstream = core.cross_entropy_grad(counts, yb) / len(yb)
    _, grads = core.backward(tape, upstream)
    return float(loss), grads, counts


def accuracy(net, x, y, batch_size=256):
    if len(x) == 0:
        return float("nan")
    correct = 0
    for i in range(0, len(x), batch_size):
        counts, _ = core.forward(net, _prep(net, x[i:i + batch_size]))
        correct += int((np.argmax(counts, axis=-1) == y[i:i + batch_size]).sum())
    return correct / len(x)


def _prep(net, x):
    """Analog networks see time-summed frames as a single step."""
    if net.mode == core.ANALOG and x.shape[-4] != 1:
        return accumulate_frames(x)[..., None, :, :, :]
    return x


def _fit(net, x, y, cfg: TrainConfig, step_fn, test=None, extra_report=None):
    net = net.copy()
    report = {"seed": cfg.seed, "config": asdict(cfg), "epochs": []}
    if extra_report:
        report.update(extra_report)
    if cfg.epochs == 0:
        return net, report
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net, cfg.lr, cfg.betas, cfg.adam_eps)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses, correct = [], 0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = _prep(net, x[idx]), y[idx]
            loss, grads, counts = step_fn(net, xb, yb, rng)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.step(grads)
            losses.append(loss * len(idx))
            correct += int((np.argmax(counts, axis=-1) == yb).sum())
        entry = {"epoch": epoch, "loss": float(np.sum(losses) / len(x)), "train_accuracy": correct / len(x)}
        if test is not None:
            entry["test_accuracy"] = accuracy(net, test[0], test[1])
        report["epochs"].append(entry)
        log.info("epoch %d %s", epoch, entry)
    if test is not None:
        report["test_accuracy"] = report["epochs"][-1]["test_accuracy"]
    return net, report


def train_bptt(net, x, y, cfg: TrainConfig, test=None):
    """Minimise cross-entropy on the class counts with surrogate-gradient BPTT.

    Returns ``(trained_net, report)``; the report is JSON-serialisable.
    """
    return _fit(net, x, y, cfg, lambda n, xb, yb, rng: ce_step(n, xb, yb), test)


def train_analog(net, x, y, cfg: TrainConfig, test=None):
    """Train an analog network on time-accumulated frames."""
    if net.mode != core.ANALOG:
        raise ValueError("train_analog needs an analog-mode network")
    return _fit(net, x, y, cfg, lambda n, xb, yb, rng: ce_step(n, xb, yb), test)


def train_trades(net, x, y, cfg: TrainConfig, trades: TradesConfig, test=None):
    def step(n, xb, yb, rng):
        loss, grads, counts = trades_step(n, xb, yb, trades)
        return loss, grads, counts

    return _fit(net, x, y, cfg, step, test, {"trades": asdict(trades)})


# --------------------------------------------------------------------------- PGD / TRADES


def pgd_linf(net, x, y, eps, n_steps, step_size=None):
    """Straight-through L-infinity PGD ascending the cross-entropy.

    The forward pass sees ``round(x_cont)`` while the sign of the input
    gradient updates the continuous copy, which is projected onto the
    ``eps`` ball around ``x`` intersected with ``[0, 1]``. Works on single
    rasters or batches. Returns ``(x_cont, x_rounded)``.
    """
    if step_size is None:
        step_size = 2.5 * eps / max(n_steps, 1)
    x0 = np.asarray(x, dtype=float)
    lo = np.maximum(x0 - eps, 0.0)
    hi = np.minimum(x0 + eps, 1.0)
    x_cont = x0.copy()
    for _ in range(n_steps):
        counts, tape = core.forward(net, round_half_up(x_cont), record=True)
        grad, _ = core.backward(tape, core.cross_entropy_grad(counts, y))
        x_cont = np.clip(x_cont + step_size * np.sign(grad), lo, hi)
    x_cont = np.clip(x_cont, lo, hi)
    return x_cont, round_half_up(x_cont)


def trades_step(net, xb, yb, cfg: TradesConfig):
    """TRADES loss ``CE(f(x0), y) + beta/B * sum KL(f(x_adv) || f(x0))`` and gradients.

    ``f`` is the softmax over class counts; the adversarial inputs come from
    rounded :func:`pgd_linf`. Gradients flow through both forward passes.
    """
    counts, tape = core.forward(net, xb, record=True, train=True)
    B = len(yb)
    ce = core.cross_entropy(counts, yb).mean()
    up_clean = core.cross_entropy_grad(counts, yb) / B
    if cfg.beta_rob == 0:
        _, grads = core.backward(tape, up_clean)
        return float(ce), grads, counts
    _, x_adv = pgd_linf(net, xb, yb, cfg.eps, cfg.n_pgd, cfg.step_size)
    counts_adv, tape_adv = core.forward(net, x_adv, record=True, train=True)
    kl, g_adv, g_ref = core.kl_divergence(counts_adv, counts)
    if not np.all(np.isfinite(kl)):
        raise TrainingDivergence("non-finite KL term")
    w = cfg.beta_rob / B
    loss = ce + w * kl.sum()
    _, grads = core.backward(tape, up_clean + w * g_ref)
    _, grads_adv = core.backward(tape_adv, w * g_adv)
    return float(loss), _add_grads(grads, grads_adv), counts


# --------------------------------------------------------------------------- weight transfer


def transfer_weights(analog_net: core.Network, calibration, threshold=1.0, percentile=99.0,
                     input_scale=None) -> core.Network:
    """Convert an analog network trained on accumulated frames to a spiking one.

    ``calibration`` is a batch of rasters ``[B, T, P, H, W]``; the analog net
    is evaluated on their time-summed frames. Each conv/linear layer's weights
    are multiplied by ``threshold * s_prev / (s * pool_gain)`` where ``s`` is
    the chosen percentile of that layer's pre-activation over the whole
    calibration set, ``s_prev`` the previous layer's (``input_scale``, default
    ``T``, for the first) and ``pool_gain`` undoes the sum-vs-average pooling
    difference. ReLUs become IAF layers and an IAF layer is appended after
    the output layer.
    """
    if analog_net.mode != core.ANALOG:
        raise ValueError("transfer_weights needs an analog-mode source network")
    net = core.fold_batchnorm(analog_net)
    calibration = np.asarray(calibration)
    T = calibration.shape[-4]
    frames = accumulate_frames(calibration)[..., None, :, :, :]
    h = np.swapaxes(np.asarray(frames, dtype=net.dtype), 0, 1)
    # replay layer by layer to collect pre-activations
    ctx = core._Ctx(core.ANALOG)
    scales = []
    for layer in net.layers:
        h = layer.forward(h, None, ctx)
        if isinstance(layer, (core.Conv2d, core.Linear)):
            s = float(np.percentile(h, percentile))
            if s <= 0:
                raise CalibrationError(f"{layer.kind} layer has non-positive {percentile}th percentile activity")
            scales.append(s)
    prev = float(T if input_scale is None else input_scale)
    gain = 1.0
    layers = []
    k = 0
    for layer in net.layers:
        layer = copy.deepcopy(layer)
        if isinstance(layer, (core.Conv2d, core.Linear)):
            s = scales[k]
            k += 1
            factor = threshold * prev / (s * gain)
            layer.weight = (layer.weight * factor).astype(layer.weight.dtype)
            if layer.bias is not None:
                layer.bias = (layer.bias * threshold / s).astype(layer.weight.dtype)
            prev, gain = s, 1.0
            layers.append(layer)
        elif isinstance(layer, core.ReLU):
            layers.append(core.SpikingIAF(threshold))
        elif isinstance(layer, core.SumPool2d):
            gain *= layer.pool_size ** 2
            layers.append(layer)
        else:
            layers.append(layer)
    if not isinstance(layers[-1], core.SpikingIAF):
        layers.append(core.SpikingIAF(threshold))
    return core.Network(layers, analog_net.input_shape, analog_net.n_classes, core.SPIKING)


def quantize_weights(net: core.Network, bits=8) -> core.Network:
    """Symmetric per-layer quantization of conv/linear weights.

    Each layer gets ``qcodes`` (int8) and ``qscale`` with
    ``scale = max|w| / (2**(bits-1) - 1)``; ``weight`` is replaced by the
    dequantized values so the usual forward pass runs the quantized model.
    Layers that already carry codes are left as they are.
    """
    qmax = 2 ** (bits - 1) - 1
    out = net.copy()
    for layer in out.layers:
        if not isinstance(layer, (core.Conv2d, core.Linear)):
            continue
        if getattr(layer, "qcodes", None) is not None:
            continue
        w = layer.weight
        m = float(np.abs(w).max())
        scale = m / qmax if m > 0 else 1.0
        codes = np.clip(np.rint(np.asarray(w, dtype=np.float64) / scale), -qmax, qmax).astype(np.int8)
        scale = np.float32(scale)
        layer.qcodes, layer.qscale = codes, scale
        layer.weight = (codes.astype(np.float32) * scale).astype(w.dtype)
    return out


def write_report(report, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
