"""Discrete-time spiking CNN engine.

Networks are ordered lists of layers. Activations flow through the stack with
a leading time axis, ``[T, B, ...]``; every layer except the integrate-and-fire
layer is time-independent and folds time into the batch axis. Reverse-mode
gradients are computed from a :class:`Tape` recorded during :func:`forward`.

In spiking mode the spike nonlinearity is a Heaviside step whose derivative
is replaced in the backward pass by the triangular surrogate
``g(v) = max(0, 1 - |v - theta| / theta)``. The *relaxed* forward replaces the
step itself by the primitive of ``g`` so that exact gradients of the relaxed
network coincide with the surrogate gradients of the real one.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Conv2d",
    "Linear",
    "SumPool2d",
    "BatchNorm",
    "SpikingIAF",
    "ReLU",
    "Flatten",
    "Network",
    "Tape",
    "iaf_step",
    "surrogate",
    "surrogate_primitive",
    "forward",
    "backward",
    "logits_and_label",
    "log_softmax",
    "softmax",
    "cross_entropy",
    "cross_entropy_grad",
    "kl_divergence",
    "build_network",
    "lenet5",
    "small_cnn",
    "fold_batchnorm",
    "save_model",
    "load_model",
]

SPIKING = "spiking"
ANALOG = "analog"


class ShapeError(ValueError):
    pass


def surrogate(v, theta=1.0):
    """Triangular surrogate derivative of the spike function."""
    return np.maximum(0.0, 1.0 - np.abs(v - theta) / theta)


def surrogate_primitive(v, theta=1.0):
    """Antiderivative of :func:`surrogate`, zero below 0 and ``theta`` above ``2 theta``."""
    v = np.asarray(v)
    lo = v * v / (2 * theta)
    hi = theta - (2 * theta - v) ** 2 / (2 * theta)
    out = np.where(v <= theta, lo, hi)
    out = np.where(v <= 0, 0.0, out)
    return np.where(v >= 2 * theta, theta, out).astype(v.dtype, copy=False)


@dataclass
class IafState:
    v: np.ndarray
    threshold: float = 1.0


def iaf_step(state: IafState, input_current):
    """Advance a non-leaky IAF population by one step.

    Returns ``(spikes, new_state)``. At most one spike per neuron per step;
    the membrane is reset by subtracting the threshold.
    """
    input_current = np.asarray(input_current, dtype=float)
    if input_current.shape != np.shape(state.v):
        raise ShapeError(f"input shape {input_current.shape} != state shape {np.shape(state.v)}")
    if not np.all(np.isfinite(input_current)):
        raise FloatingPointError("non-finite input current")
    v = state.v + input_current
    spikes = (v >= state.threshold).astype(float)
    return spikes, IafState(v - state.threshold * spikes, state.threshold)


# --------------------------------------------------------------------------- layers


class Layer:
    kind = "layer"
    param_names: tuple[str, ...] = ()

    def forward(self, h, saved, ctx):
        raise NotImplementedError

    def backward(self, grad, saved, ctx):
        """Return ``(grad_input, {param_name: grad})``."""
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def config(self) -> dict:
        return {"kind": self.kind}

    def params(self) -> dict:
        return {n: getattr(self, n) for n in self.param_names if getattr(self, n) is not None}


def _fold(h):
    return h.reshape((h.shape[0] * h.shape[1],) + h.shape[2:])


def _unfold(h, T):
    return h.reshape((T, h.shape[0] // T) + h.shape[1:])


class Conv2d(Layer):
    kind = "conv2d"
    param_names = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 bias=True, weight=None, bias_value=None, rng=None):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        k = self.kernel_size
        if weight is None:
            rng = np.random.default_rng(rng)
            fan_in = self.in_channels * k * k
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), (self.out_channels, self.in_channels, k, k))
        self.weight = np.asarray(weight)
        if bias_value is not None:
            self.bias = np.asarray(bias_value)
        else:
            self.bias = np.zeros(self.out_channels, dtype=self.weight.dtype) if bias else None

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding,
                "bias": self.bias is not None}

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def _windows(self, x):
        p, k, s = self.padding, self.kernel_size, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, h, saved, ctx):
        T = h.shape[0]
        x = _fold(h)
        win = self._windows(x)
        out = np.tensordot(win, self.weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if self.bias is not None:
            out = out + self.bias[:, None, None]
        if saved is not None:
            saved["x"] = x
        return _unfold(np.ascontiguousarray(out), T)

    def backward(self, grad, saved, ctx):
        T = grad.shape[0]
        g = _fold(grad)
        x = saved["x"]
        win = self._windows(x)
        grads = {"weight": np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))}
        if self.bias is not None:
            grads["bias"] = g.sum(axis=(0, 2, 3))
        k, s, p = self.kernel_size, self.stride, self.padding
        n, c, hh, ww = x.shape
        dx = np.zeros((n, c, hh + 2 * p, ww + 2 * p), dtype=g.dtype)
        ho, wo = g.shape[2], g.shape[3]
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, self.weight[:, :, i, j], axes=([1], [0]))  # n, ho, wo, c
                dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return _unfold(dx, T), grads


class Linear(Layer):
    kind = "linear"
    param_names = ("weight", "bias")

    def __init__(self, in_features, out_features, bias=True, weight=None, bias_value=None, rng=None):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        if weight is None:
            rng = np.random.default_rng(rng)
            weight = rng.normal(0.0, np.sqrt(2.0 / self.in_features), (self.out_features, self.in_features))
        self.weight = np.asarray(weight)
        if bias_value is not None:
            self.bias = np.asarray(bias_value)
        else:
            self.bias = np.zeros(self.out_features, dtype=self.weight.dtype) if bias else None

    def config(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features, "bias": self.bias is not None}

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(f"linear expects ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def forward(self, h, saved, ctx):
        out = h @ self.weight.T
        if self.bias is not None:
            out = out + self.bias
        if saved is not None:
            saved["x"] = h
        return out

    def backward(self, grad, saved, ctx):
        x = saved["x"]
        g2 = grad.reshape(-1, self.out_features)
        grads = {"weight": g2.T @ x.reshape(-1, self.in_features)}
        if self.bias is not None:
            grads["bias"] = g2.sum(axis=0)
        return grad @ self.weight, grads


class SumPool2d(Layer):
    """Non-overlapping pooling: sums in spiking mode, averages in analog mode."""

    kind = "sum_pool2d"

    def __init__(self, pool_size=2):
        self.pool_size = int(pool_size)

    def config(self):
        return {"kind": self.kind, "pool_size": self.pool_size}

    def output_shape(self, shape):
        c, h, w = shape
        return (c, h // self.pool_size, w // self.pool_size)

    def forward(self, h, saved, ctx):
        k = self.pool_size
        t, b, c, hh, ww = h.shape
        ho, wo = hh // k, ww // k
        x = h[..., :ho * k, :wo * k].reshape(t, b, c, ho, k, wo, k)
        out = x.sum(axis=(4, 6))
        if ctx.mode == ANALOG:
            out = out / (k * k)
        if saved is not None:
            saved["shape"] = h.shape
        return out

    def backward(self, grad, saved, ctx):
        k = self.pool_size
        shape = saved["shape"]
        g = grad / (k * k) if ctx.mode == ANALOG else grad
        up = np.repeat(np.repeat(g, k, axis=3), k, axis=4)
        if up.shape != shape:
            full = np.zeros(shape, dtype=up.dtype)
            full[..., :up.shape[3], :up.shape[4]] = up
            up = full
        return up, {}


class BatchNorm(Layer):
    """Per-channel normalisation over every axis except the channel axis.

    In training mode batch statistics are used (pooled over time and batch)
    and the running estimates are updated; otherwise the running estimates
    are applied as a fixed affine map.
    """

    kind = "batchnorm"
    param_names = ("weight", "bias")

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        self.num_features = int(num_features)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.weight = np.ones(self.num_features)
        self.bias = np.zeros(self.num_features)
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.ones(self.num_features)

    def config(self):
        return {"kind": self.kind, "num_features": self.num_features, "eps": self.eps,
                "momentum": self.momentum}

    def output_shape(self, shape):
        if shape[0] != self.num_features:
            raise ShapeError(f"batchnorm expects {self.num_features} channels, got {shape[0]}")
        return shape

    def _bshape(self, ndim):
        # channel axis is 1 after folding time into batch
        return (1, self.num_features) + (1,) * (ndim - 2)

    def forward(self, h, saved, ctx):
        T = h.shape[0]
        x = _fold(h)
        axes = (0,) + tuple(range(2, x.ndim))
        bs = self._bshape(x.ndim)
        if ctx.train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // self.num_features
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var * n / max(n - 1, 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
        out = xhat * self.weight.reshape(bs) + self.bias.reshape(bs)
        if saved is not None:
            saved.update(xhat=xhat, inv=inv, train=ctx.train)
        return _unfold(out.astype(h.dtype, copy=False), T)

    def backward(self, grad, saved, ctx):
        T = grad.shape[0]
        g = _fold(grad)
        xhat, inv = saved["xhat"], saved["inv"]
        axes = (0,) + tuple(range(2, g.ndim))
        bs = self._bshape(g.ndim)
        grads = {"weight": (g * xhat).sum(axis=axes), "bias": g.sum(axis=axes)}
        gx = g * self.weight.reshape(bs)
        if saved["train"]:
            dx = inv.reshape(bs) * (gx - gx.mean(axis=axes).reshape(bs)
                                    - xhat * (gx * xhat).mean(axis=axes).reshape(bs))
        else:
            dx = gx * inv.reshape(bs)
        return _unfold(dx, T), grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, h, saved, ctx):
        if saved is not None:
            saved["mask"] = h > 0
        return np.maximum(h, 0)

    def backward(self, grad, saved, ctx):
        return grad * saved["mask"], {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, h, saved, ctx):
        if saved is not None:
            saved["shape"] = h.shape
        return h.reshape(h.shape[:2] + (-1,))

    def backward(self, grad, saved, ctx):
        return grad.reshape(saved["shape"]), {}


class SpikingIAF(Layer):
    """Non-leaky integrate-and-fire population, one spike per step at most."""

    kind = "spiking_iaf"

    def __init__(self, threshold=1.0, clamp_min=None):
        self.threshold = float(threshold)
        self.clamp_min = None if clamp_min is None else float(clamp_min)

    def config(self):
        return {"kind": self.kind, "threshold": self.threshold, "clamp_min": self.clamp_min}

    def forward(self, h, saved, ctx):
        theta = self.threshold
        out = np.empty_like(h)
        v = np.zeros(h.shape[1:], dtype=h.dtype)
        record = saved is not None
        if record:
            v_pre = np.empty_like(h)
            keep = np.ones(h.shape, dtype=bool) if self.clamp_min is not None else None
        for t in range(h.shape[0]):
            v = v + h[t]
            if record:
                v_pre[t] = v
            if ctx.relaxed:
                s = surrogate_primitive(v, theta)
            else:
                s = (v >= theta).astype(h.dtype)
            out[t] = s
            v = v - theta * s
            if self.clamp_min is not None:
                if record:
                    keep[t] = v > self.clamp_min
                v = np.maximum(v, self.clamp_min)
        if record:
            saved["v_pre"] = v_pre
            saved["keep"] = keep
        return out

    def backward(self, grad, saved, ctx):
        theta = self.threshold
        v_pre = saved["v_pre"]
        keep = saved["keep"]
        dx = np.empty_like(grad)
        dv = np.zeros(grad.shape[1:], dtype=grad.dtype)
        for t in range(grad.shape[0] - 1, -1, -1):
            g = surrogate(v_pre[t], theta)
            if keep is not None:
                dv = dv * keep[t]
            dv = grad[t] * g + dv * (1.0 - theta * g)
            dx[t] = dv
        return dx, {}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, Linear, SumPool2d, BatchNorm, SpikingIAF, ReLU, Flatten)}


# --------------------------------------------------------------------------- network


@dataclass
class _Ctx:
    mode: str
    relaxed: bool = False
    train: bool = False


class Network:
    """Ordered layer stack with a fixed input shape ``(P, H, W)``."""

    def __init__(self, layers, input_shape, n_classes, mode=SPIKING):
        if mode not in (SPIKING, ANALOG):
            raise ValueError(f"unknown mode {mode!r}")
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n_classes = int(n_classes)
        self.mode = mode
        self.validate()

    def validate(self):
        has_iaf = any(isinstance(l, SpikingIAF) for l in self.layers)
        if self.mode == SPIKING and not has_iaf:
            raise ValueError("spiking network needs at least one spiking_iaf layer")
        if self.mode == ANALOG and has_iaf:
            raise ValueError("analog network cannot contain spiking_iaf layers")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.n_classes,):
            raise ShapeError(f"network output shape {shape} != ({self.n_classes},)")

    @property
    def dtype(self):
        for layer in self.layers:
            w = getattr(layer, "weight", None)
            if w is not None:
                return w.dtype
        return np.dtype(np.float64)

    def astype(self, dtype):
        net = self.copy()
        for layer in net.layers:
            for name in layer.param_names:
                val = getattr(layer, name)
                if val is not None:
                    setattr(layer, name, val.astype(dtype))
        return net

    def copy(self):
        return copy.deepcopy(self)

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            for name, val in layer.params().items():
                yield i, name, val

    def set_parameter(self, index, name, value):
        setattr(self.layers[index], name, value)

    def specs(self) -> list[dict]:
        return [layer.config() for layer in self.layers]

    def __repr__(self):
        kinds = ", ".join(l.kind for l in self.layers)
        return f"Network(mode={self.mode}, input={self.input_shape}, classes={self.n_classes}, [{kinds}])"


@dataclass
class Tape:
    """Everything recorded by :func:`forward` that :func:`backward` needs."""

    net: Network
    x: np.ndarray
    saved: list
    outputs: np.ndarray
    single: bool
    relaxed: bool
    train: bool
    extras: dict = field(default_factory=dict)

    def replay(self):
        counts, _ = forward(self.net, self.x, relaxed=self.relaxed)
        return counts


def _as_batch(net: Network, x):
    x = np.asarray(x)
    single = x.ndim == 4
    xb = x[None] if single else x
    if xb.ndim != 5:
        raise ShapeError(f"expected raster [T,P,H,W] or batch [B,T,P,H,W], got shape {x.shape}")
    if tuple(xb.shape[2:]) != net.input_shape:
        raise ShapeError(f"input shape {xb.shape[2:]} does not match network input {net.input_shape}")
    if net.mode == ANALOG and xb.shape[1] != 1:
        raise ShapeError("analog networks take a single time step (T=1)")
    return xb, single


def forward(net: Network, x, record=False, relaxed=False, train=False):
    """Run the network and return ``(class_counts, tape_or_None)``.

    ``x`` is a raster ``[T, P, H, W]`` or a batch ``[B, T, P, H, W]``. In
    spiking mode the result is the number of output spikes per class summed
    over time; in analog mode it is the logits of the single step.
    """
    xb, single = _as_batch(net, x)
    h = np.ascontiguousarray(np.swapaxes(xb, 0, 1), dtype=net.dtype)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite network input")
    ctx = _Ctx(net.mode, relaxed=relaxed, train=train)
    saved_all = [] if record else None
    for layer in net.layers:
        saved = {} if record else None
        h = layer.forward(h, saved, ctx)
        if record:
            saved_all.append(saved)
    counts = h.sum(axis=0)
    if not np.all(np.isfinite(counts)):
        raise FloatingPointError("non-finite network output")
    out = counts[0] if single else counts
    tape = Tape(net, np.array(x, copy=True), saved_all, out.copy(), single, relaxed, train) if record else None
    return out, tape


def backward(tape: Tape, upstream):
    """Gradient of ``sum(upstream * class_counts)`` w.r.t. the input and parameters.

    Returns ``(grad_input, grad_params)`` where ``grad_params`` is a list (one
    dict per layer) mapping parameter names to gradients.
    """
    if tape is None:
        raise ValueError("backward needs a tape recorded with record=True")
    upstream = np.asarray(upstream, dtype=tape.net.dtype)
    if upstream.shape != tape.outputs.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {tape.outputs.shape}")
    net = tape.net
    ub = upstream[None] if tape.single else upstream
    T = np.asarray(tape.x).shape[-4]
    grad = np.broadcast_to(ub, (T,) + ub.shape).copy()
    ctx = _Ctx(net.mode, relaxed=tape.relaxed, train=tape.train)
    grad_params = [dict() for _ in net.layers]
    for i in range(len(net.layers) - 1, -1, -1):
        grad, gp = net.layers[i].backward(grad, tape.saved[i], ctx)
        grad_params[i] = gp
    grad_in = np.swapaxes(grad, 0, 1)
    if tape.single:
        grad_in = grad_in[0]
    return np.ascontiguousarray(grad_in), grad_params


def logits_and_label(net: Network, x):
    """Class counts and the decoded label (lowest index wins ties)."""
    counts, _ = forward(net, x)
    return counts, np.argmax(counts, axis=-1)


# --------------------------------------------------------------------------- losses


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(z, axis=-1):
    return np.exp(log_softmax(z, axis))


def cross_entropy(z, y):
    """Per-sample cross-entropy of logits ``z`` (``[K]`` or ``[B, K]``)."""
    ls = log_softmax(z)
    y = np.asarray(y)
    if ls.ndim == 1:
        return -ls[y]
    return -ls[np.arange(ls.shape[0]), y]


def cross_entropy_grad(z, y):
    p = softmax(z)
    y = np.asarray(y)
    if p.ndim == 1:
        p[y] -= 1.0
    else:
        p[np.arange(p.shape[0]), y] -= 1.0
    return p


def kl_divergence(z_adv, z_ref):
    """``KL(softmax(z_adv) || softmax(z_ref))`` per sample, with gradients.

    Returns ``(kl, d_kl/d_z_adv, d_kl/d_z_ref)``.
    """
    la, lr = log_softmax(z_adv), log_softmax(z_ref)
    pa, pr = np.exp(la), np.exp(lr)
    kl = (pa * (la - lr)).sum(axis=-1)
    grad_adv = pa * ((la - lr) - kl[..., None])
    grad_ref = pr - pa
    return kl, grad_adv, grad_ref


# --------------------------------------------------------------------------- construction


def build_network(arch: dict, seed=0, dtype=np.float32) -> Network:
    """Build a network from a plain description.

    ``arch`` has ``input_shape``, ``n_classes``, ``mode`` and ``layers``; conv
    and linear layers infer their input sizes from the running shape.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(arch["input_shape"])
    layers = []
    for spec in arch["layers"]:
        spec = dict(spec)
        kind = spec.pop("kind")
        if kind == "conv2d":
            layer = Conv2d(shape[0], spec["out_channels"], spec.get("kernel_size", 5),
                           spec.get("stride", 1), spec.get("padding", 0), bias=spec.get("bias", False), rng=rng)
        elif kind == "linear":
            layer = Linear(shape[0], spec["out_features"], bias=spec.get("bias", False), rng=rng)
        elif kind == "sum_pool2d":
            layer = SumPool2d(spec.get("pool_size", 2))
        elif kind == "batchnorm":
            layer = BatchNorm(shape[0], spec.get("eps", 1e-5), spec.get("momentum", 0.1))
        elif kind == "spiking_iaf":
            layer = SpikingIAF(spec.get("threshold", 1.0), spec.get("clamp_min"))
        elif kind == "relu":
            layer = ReLU()
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    net = Network(layers, arch["input_shape"], arch["n_classes"], arch.get("mode", SPIKING))
    return net.astype(dtype)


def lenet5(input_shape, n_classes, channels=(8, 8, 8, 64), mode=SPIKING, batchnorm=False,
           threshold=1.0, kernel_size=5) -> dict:
    """Architecture description of a LeNet-5 style network.

    ``channels`` are the three convolution widths and the hidden linear width
    (e.g. ``(20, 32, 128, 500)`` or ``(8, 8, 8, 64)``).
    """
    act = {"kind": "spiking_iaf", "threshold": threshold} if mode == SPIKING else {"kind": "relu"}
    pad = kernel_size // 2
    layers = []
    for i, c in enumerate(channels[:3]):
        layers.append({"kind": "conv2d", "out_channels": c, "kernel_size": kernel_size, "padding": pad})
        if batchnorm:
            layers.append({"kind": "batchnorm"})
        layers.append(dict(act))
        if i < 2:
            layers.append({"kind": "sum_pool2d", "pool_size": 2})
    layers += [{"kind": "flatten"}, {"kind": "linear", "out_features": channels[3]}, dict(act),
               {"kind": "linear", "out_features": n_classes}]
    if mode == SPIKING:
        layers.append(dict(act))
    return {"input_shape": list(input_shape), "n_classes": n_classes, "mode": mode, "layers": layers}


def small_cnn(input_shape, n_classes, channels=(8, 16), mode=SPIKING, threshold=1.0) -> dict:
    """Two conv blocks and a linear readout; the desk-scale default."""
    act = {"kind": "spiking_iaf", "threshold": threshold} if mode == SPIKING else {"kind": "relu"}
    layers = []
    for c in channels:
        layers += [{"kind": "conv2d", "out_channels": c, "kernel_size": 3, "padding": 1}, dict(act),
                   {"kind": "sum_pool2d", "pool_size": 2}]
    layers += [{"kind": "flatten"}, {"kind": "linear", "out_features": n_classes}]
    if mode == SPIKING:
        layers.append(dict(act))
    return {"input_shape": list(input_shape), "n_classes": n_classes, "mode": mode, "layers": layers}


def fold_batchnorm(net: Network) -> Network:
    """Merge every batchnorm into the preceding conv/linear layer (inference form)."""
    out = []
    for layer in net.layers:
        if isinstance(layer, BatchNorm):
            prev = out[-1] if out else None
            if not isinstance(prev, (Conv2d, Linear)):
                raise ValueError("batchnorm must follow a conv2d or linear layer to be folded")
            scale = layer.weight / np.sqrt(layer.running_var + layer.eps)
            shift = layer.bias - layer.running_mean * scale
            w = prev.weight * scale.reshape((-1,) + (1,) * (prev.weight.ndim - 1))
            b = shift if prev.bias is None else prev.bias * scale + shift
            new = copy.deepcopy(prev)
            new.weight = w.astype(prev.weight.dtype)
            new.bias = np.asarray(b, dtype=prev.weight.dtype)
            out[-1] = new
        else:
            out.append(copy.deepcopy(layer))
    return Network(out, net.input_shape, net.n_classes, net.mode)


# --------------------------------------------------------------------------- model files

_MAGIC = b"SNN0"


def save_model(net: Network, path):
    """Write ``net`` as an ``SNN0`` container.

    Layout: magic, u32 header length, UTF-8 JSON header, then little-endian
    f32 tensors in layer order (weights, biases, batchnorm statistics). If any
    layer carries quantized codes a second section follows with the i8 codes
    and one f32 scale per quantized layer.
    """
    tensors = []
    layer_entries = []
    quant = []
    for i, layer in enumerate(net.layers):
        names = list(layer.params())
        if isinstance(layer, BatchNorm):
            names += ["running_mean", "running_var"]
        shapes = {}
        for n in names:
            arr = np.asarray(getattr(layer, n), dtype="<f4")
            shapes[n] = list(arr.shape)
            tensors.append(arr)
        entry = layer.config()
        entry["tensors"] = shapes
        if getattr(layer, "qcodes", None) is not None:
            quant.append((i, layer.qcodes, layer.qscale))
        layer_entries.append(entry)
    header = {"format": 1, "mode": net.mode, "input_shape": list(net.input_shape),
              "n_classes": net.n_classes, "layers": layer_entries,
              "quantized": [{"layer": i, "shape": list(c.shape)} for i, c, _ in quant]}
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for arr in tensors:
            f.write(arr.tobytes())
        for _, codes, scale in quant:
            f.write(np.asarray(codes, dtype=np.int8).tobytes())
            f.write(struct.pack("<f", scale))


def load_model(path) -> Network:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an SNN0 model file")
    (n,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + n].decode())
    buf = io.BytesIO(data[8 + n:])
    layers = []
    for entry in header["layers"]:
        entry = dict(entry)
        shapes = entry.pop("tensors")
        kind = entry.pop("kind")
        arrays = {}
        for name, shape in shapes.items():
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if kind == "conv2d":
            has_bias = entry.pop("bias")
            layer = Conv2d(entry["in_channels"], entry["out_channels"], entry["kernel_size"],
                           entry["stride"], entry["padding"], bias=has_bias, weight=arrays["weight"],
                           bias_value=arrays.get("bias"))
        elif kind == "linear":
            has_bias = entry.pop("bias")
            layer = Linear(entry["in_features"], entry["out_features"], bias=has_bias,
                           weight=arrays["weight"], bias_value=arrays.get("bias"))
        elif kind == "batchnorm":
            layer = BatchNorm(entry["num_features"], entry["eps"], entry["momentum"])
            for name, arr in arrays.items():
                setattr(layer, name, arr)
        else:
            layer = LAYER_TYPES[kind](**entry)
        layers.append(layer)
    for q in header.get("quantized", []):
        count = int(np.prod(q["shape"]))
        codes = np.frombuffer(buf.read(count), dtype=np.int8).reshape(q["shape"]).copy()
        (scale,) = struct.unpack("<f", buf.read(4))
        layer = layers[q["layer"]]
        layer.qcodes, layer.qscale = codes, scale
    return Network(layers, header["input_shape"], header["n_classes"], header["mode"])
