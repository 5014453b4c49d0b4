"""White-box attacks on spiking networks over discrete event rasters.

Every attack counts *queries*: one query is one sample passed through the
attacked network. A gradient evaluation costs the forward it needs, once;
backward passes are free.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import snn_core as core
from .training import round_half_up

__all__ = [
    "SpikeFoolConfig",
    "ProbPgdConfig",
    "AttackResult",
    "DeepFoolResult",
    "DegenerateGradientError",
    "Patch",
    "deepfool",
    "linear_solver",
    "spikefool",
    "cd_pgd",
    "prob_pgd",
    "sample_binary_concrete",
    "greedy_flip",
    "train_patch",
    "random_patch",
    "apply_patch",
    "active_bbox",
    "random_position",
]


class DegenerateGradientError(RuntimeError):
    pass


@dataclass
class SpikeFoolConfig:
    eta: float = 0.1
    lam: float = 2.0
    l: float = 0.0
    u: float = 1.0
    max_outer_iters: int = 20
    max_deepfool_iters: int = 50
    overshoot: float = 0.02

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.lam < 1:
            raise ValueError("lambda must be >= 1")
        if not self.l < self.u:
            raise ValueError("need l < u")


@dataclass
class ProbPgdConfig:
    temperature: float = 0.01
    n_mc: int = 10
    n_steps: int = 20
    step_size: float = 0.1
    init_clip: float = 0.05
    delta: float = 1e-4
    max_flips: int = 2000
    step_rule: str = "sign"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    queries: int
    l0: int
    elapsed_s: float
    original_label: int
    adversarial_label: int
    diagnostic: str | None = None


@dataclass
class DeepFoolResult:
    x_boundary: np.ndarray
    normal: np.ndarray
    success: bool
    label: int
    adversarial_label: int
    iterations: int
    queries: int
    raw_step_norms: list = field(default_factory=list)


class _Oracle:
    """Query-counting access to a network."""

    def __init__(self, net):
        self.net = net
        self.queries = 0

    def _n(self, x):
        return 1 if np.ndim(x) == 4 else len(x)

    def counts(self, x, record=False):
        self.queries += self._n(x)
        return core.forward(self.net, x, record=record)

    def label(self, x):
        counts, _ = self.counts(x)
        return int(np.argmax(counts))


def _jacobian(tape, classes):
    return {k: core.backward(tape, np.eye(tape.outputs.shape[-1])[k])[0] for k in classes}


def _ce_input_grad(tape, y):
    grad, _ = core.backward(tape, core.cross_entropy_grad(tape.outputs, y))
    return grad


# --------------------------------------------------------------------------- DeepFool / SpikeFool


def deepfool(net, x, eta=0.0, max_iters=50, overshoot=0.02, label=None, _oracle=None, _initial=None):
    """Multiclass DeepFool with a minimum step norm ``eta``.

    Each step moves toward the nearest linearised boundary,
    ``r = |f'_k| / ||w_k||^2 * w_k``, scaled by ``1 + overshoot``; steps shorter
    than ``eta`` are stretched to norm ``eta``. ``label`` (if given) is the
    reference class; otherwise the prediction at ``x``. Stops once the
    prediction changes or after ``max_iters`` steps.
    """
    oracle = _oracle or _Oracle(net)
    q0 = oracle.queries
    xi = np.asarray(x, dtype=float).copy()
    counts, tape = _initial if _initial is not None else oracle.counts(xi, record=True)
    k0 = int(np.argmax(counts)) if label is None else int(label)
    if int(np.argmax(counts)) != k0:
        w = np.zeros_like(xi)
        return DeepFoolResult(xi, w, True, k0, int(np.argmax(counts)), 0, oracle.queries - q0)
    K = counts.shape[-1]
    others = [k for k in range(K) if k != k0]
    raw_norms = []
    normal = np.zeros_like(xi)
    success = False
    it = 0
    for it in range(1, max_iters + 1):
        grads = _jacobian(tape, range(K))
        best, best_w, best_f = np.inf, None, 0.0
        for k in others:
            w_k = grads[k] - grads[k0]
            nrm = np.linalg.norm(w_k)
            if nrm == 0:
                continue
            f_k = counts[k] - counts[k0]
            pert = abs(f_k) / nrm
            if pert < best:
                best, best_w, best_f = pert, w_k, f_k
        if best_w is None:
            raise DegenerateGradientError("all class-difference gradients vanish")
        normal = best_w
        wn2 = float(np.dot(best_w.ravel(), best_w.ravel()))
        r = (abs(best_f) / wn2) * best_w
        rn = float(np.linalg.norm(r))
        raw_norms.append(rn)
        r = r * (1 + overshoot)
        rn *= 1 + overshoot
        if rn < eta:
            r = best_w * (eta / np.sqrt(wn2)) if rn == 0 else r * (eta / rn)
        xi = xi + r
        counts, tape = oracle.counts(xi, record=True)
        if int(np.argmax(counts)) != k0:
            success = True
            break
    adv = int(np.argmax(counts))
    if success:
        grads = _jacobian(tape, (k0, adv))
        normal = grads[adv] - grads[k0]
        if not np.any(normal):
            normal = best_w
    return DeepFoolResult(xi, normal, success, k0, adv, it, oracle.queries - q0, raw_norms)


def linear_solver(x, x_target, w, l, u, beta=1e-3, min_step=1e-4):
    """Move ``x`` onto the hyperplane ``<w, z - x_target> = 0`` one coordinate at a time.

    Coordinates are taken in decreasing order of ``|w_i|``, each stepping just
    past the hyperplane (by ``beta`` in ``<w, .>`` units) and clipped to
    ``[l_i, u_i]``. Returns ``(x_new, saturated)`` where ``saturated`` is true
    when every usable coordinate was exhausted before reaching the plane.
    """
    shape = np.shape(x)
    xi = np.array(x, dtype=float).ravel()
    wf = np.asarray(w, dtype=float).ravel()
    pt = np.asarray(x_target, dtype=float).ravel()
    lo = np.broadcast_to(np.asarray(l, dtype=float), shape).ravel()
    hi = np.broadcast_to(np.asarray(u, dtype=float), shape).ravel()
    if not np.any(wf):
        raise ValueError("linear_solver needs a non-zero normal")
    f = float(np.dot(wf, xi - pt))
    if f == 0:
        return xi.reshape(shape), False
    sign_true = np.sign(f)
    order = np.argsort(-np.abs(wf), kind="stable")
    order = order[wf[order] != 0]
    for i in order:
        step = max((abs(f) + beta) / abs(wf[i]), min_step)
        new = np.clip(xi[i] - sign_true * np.sign(wf[i]) * step, lo[i], hi[i])
        f += wf[i] * (new - xi[i])
        xi[i] = new
        if np.sign(f) != sign_true:
            return xi.reshape(shape), False
    return xi.reshape(shape), True


def _finish(x0, x_adv, success, oracle, t0, k0, adv_label, diagnostic=None):
    x_adv = np.asarray(x_adv)
    l0 = int(np.count_nonzero(x_adv.astype(np.int64) != np.asarray(x0).astype(np.int64)))
    return AttackResult(x_adv.astype(np.asarray(x0).dtype), bool(success), oracle.queries, l0,
                        time.perf_counter() - t0, int(k0), int(adv_label), diagnostic)


def spikefool(net, x, cfg: SpikeFoolConfig | None = None, label=None) -> AttackResult:
    """SparseFool adapted to integer event rasters.

    Outer loop: DeepFool (with the ``eta`` clamp) from the current iterate,
    boundary point pushed out by ``lam``, sparse linear solver toward it
    within ``[l, u]``, then rounding to integers and one query. ``label`` is
    the reference class (true label); defaults to the prediction on ``x``.
    """
    cfg = cfg or SpikeFoolConfig()
    t0 = time.perf_counter()
    oracle = _Oracle(net)
    x0 = np.asarray(x)
    xi = x0.astype(float)
    counts, tape = oracle.counts(xi, record=True)
    pred = int(np.argmax(counts))
    k0 = pred if label is None else int(label)
    if pred != k0:
        return _finish(x0, x0, True, oracle, t0, k0, pred)
    diag = None
    for _ in range(cfg.max_outer_iters):
        try:
            df = deepfool(net, xi, cfg.eta, cfg.max_deepfool_iters, cfg.overshoot, label=k0,
                          _oracle=oracle, _initial=(counts, tape))
        except DegenerateGradientError as e:
            diag = f"degenerate gradient: {e}"
            break
        if not np.any(df.normal):
            diag = "degenerate gradient: zero boundary normal"
            break
        x_b = xi + cfg.lam * (df.x_boundary - xi)
        xs, _ = linear_solver(xi, x_b, df.normal, cfg.l, cfg.u)
        x_new = np.clip(round_half_up(xs), cfg.l, cfg.u)
        if np.array_equal(x_new, xi):
            diag = "stalled: rounded iterate unchanged"
            break
        xi = x_new
        counts, tape = oracle.counts(xi, record=True)
        pred = int(np.argmax(counts))
        if pred != k0:
            return _finish(x0, xi, True, oracle, t0, k0, pred)
    return _finish(x0, xi, False, oracle, t0, k0, pred, diag or "max outer iterations reached")


# --------------------------------------------------------------------------- PGD variants


def greedy_flip(oracle, x0, k0, score, candidates_mask=None, max_flips=2000):
    """Flip bits of ``x0`` in decreasing ``score`` order until the label changes.

    Returns ``(x_adv, success, adv_label)``. Each flip costs one query.
    """
    flat = np.asarray(score, dtype=float).ravel()
    cand = np.flatnonzero(flat > 0 if candidates_mask is None else np.asarray(candidates_mask).ravel())
    cand = cand[np.argsort(-flat[cand], kind="stable")][:max_flips]
    xa = np.array(x0, copy=True)
    xf = xa.reshape(-1)
    for i in cand:
        xf[i] = 1 - xf[i]
        lab = oracle.label(xa)
        if lab != k0:
            return xa, True, lab
    return np.array(x0, copy=True), False, k0


def cd_pgd(net, x, y, n_steps=20, step_size=0.1, max_flips=2000) -> AttackResult:
    """Continuous-discrete PGD followed by greedy bit flipping.

    Phase 1 ascends the cross-entropy on a continuous shadow copy while the
    network sees its rounding (straight-through); each step is the input
    gradient scaled to unit max-norm. Phase 2 flips bits of the original in
    decreasing ``|x_cont - x|`` order, stopping at the first misclassification.
    """
    t0 = time.perf_counter()
    oracle = _Oracle(net)
    x0 = np.asarray(x)
    xf = x0.astype(float)
    counts, tape = oracle.counts(xf, record=True)
    pred = int(np.argmax(counts))
    if pred != y:
        return _finish(x0, x0, True, oracle, t0, y, pred)
    x_cont = xf.copy()
    for step in range(n_steps):
        if step:
            counts, tape = oracle.counts(round_half_up(x_cont), record=True)
        g = _ce_input_grad(tape, y)
        m = np.abs(g).max()
        if m == 0:
            break
        x_cont = np.clip(x_cont + step_size * g / m, 0.0, 1.0)
    diff = np.abs(x_cont - xf)
    xa, ok, lab = greedy_flip(oracle, xf, y, diff, max_flips=max_flips)
    return _finish(x0, xa, ok, oracle, t0, y, lab, None if ok else "no flip prefix misclassifies")


def sample_binary_concrete(p, temperature, rng):
    """Relaxed Bernoulli sample ``sigmoid((logit(r) + logit(p)) / T)``; returns ``(sample, r)``."""
    r = rng.random(np.shape(p))
    r = np.clip(r, 1e-12, 1 - 1e-12)
    z = (np.log(r) - np.log1p(-r) + np.log(p) - np.log1p(-p)) / temperature
    return 0.5 * (1 + np.tanh(0.5 * z)), r


def _prob_grad(net, oracle, p, y, cfg, rng):
    """Average over ``n_mc`` samples of d CE / d p."""
    samples = []
    for _ in range(cfg.n_mc):
        s, _ = sample_binary_concrete(p, cfg.temperature, rng)
        samples.append(s)
    batch = np.stack(samples)
    counts, tape = oracle.counts(batch, record=True)
    g_x, _ = core.backward(tape, core.cross_entropy_grad(counts, np.full(cfg.n_mc, y)))
    dxdp = batch * (1 - batch) / (cfg.temperature * p * (1 - p))
    per_sample = g_x * dxdp
    return per_sample.mean(axis=0), per_sample


def prob_pgd(net, x, y, cfg: ProbPgdConfig | None = None, seed=0) -> AttackResult:
    """Probabilistic PGD over Bernoulli spike probabilities.

    ``p`` starts at ``clip(x, init_clip, 1 - init_clip)``; each step draws
    ``n_mc`` binary-concrete samples, averages the cross-entropy gradient
    w.r.t. ``p`` and takes a signed step. The result is finalised by greedy
    flipping in decreasing ``|p - x|`` order, restricted to voxels whose
    probability moved toward flipping.
    """
    cfg = cfg or ProbPgdConfig()
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    oracle = _Oracle(net)
    x0 = np.asarray(x)
    xf = x0.astype(float)
    pred = oracle.label(xf)
    if pred != y:
        return _finish(x0, x0, True, oracle, t0, y, pred)
    p0 = np.clip(xf, cfg.init_clip, 1 - cfg.init_clip)
    p = p0.copy()
    for _ in range(cfg.n_steps):
        g, _ = _prob_grad(net, oracle, p, y, cfg, rng)
        if cfg.step_rule == "sign":
            step = np.sign(g)
        else:
            m = np.abs(g).max()
            step = g / m if m > 0 else g
        p = np.clip(p + cfg.step_size * step, cfg.delta, 1 - cfg.delta)
    score = np.abs(p - xf)
    moved = score > np.abs(p0 - xf) + 1e-12
    xa, ok, lab = greedy_flip(oracle, xf, y, score, moved, cfg.max_flips)
    return _finish(x0, xa, ok, oracle, t0, y, lab, None if ok else "no flip prefix misclassifies")


# --------------------------------------------------------------------------- patches


@dataclass
class Patch:
    data: np.ndarray
    target_label: int | None = None
    region: tuple | None = None  # (y0, x0, y1, x1), half-open

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 4:
            raise ValueError("patch data must be [T, P, h, w]")
        if self.data.max(initial=0) > 1:
            raise ValueError("patch data must be binary")

    @property
    def size(self):
        return self.data.shape[2:]


def random_patch(patch_shape, seed=0, target_label=None) -> Patch:
    """Every voxel spikes independently with probability 1/2."""
    rng = np.random.default_rng(seed)
    return Patch((rng.random(patch_shape) < 0.5).astype(np.uint8), target_label)


def apply_patch(x, patch: Patch, position):
    """Overlay ``patch`` at top-left ``position=(row, col)``: events are added, never removed."""
    x = np.asarray(x)
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    r, c = position
    h, w = data.shape[2:]
    if r < 0 or c < 0 or r + h > x.shape[-2] or c + w > x.shape[-1]:
        raise ValueError(f"patch of size {h}x{w} at {position} does not fit in {x.shape[-2:]}")
    if data.shape[:2] != x.shape[:2]:
        raise ValueError(f"patch time/polarity dims {data.shape[:2]} != raster {x.shape[:2]}")
    out = np.array(x, copy=True)
    out[:, :, r:r + h, c:c + w] = np.maximum(out[:, :, r:r + h, c:c + w], data.astype(out.dtype))
    return out


def active_bbox(x):
    """Half-open bounding box ``(y0, x0, y1, x1)`` of pixels that ever spike."""
    active = np.asarray(x).reshape(-1, *np.shape(x)[-2:]).any(axis=0)
    rows, cols = np.nonzero(active)
    if len(rows) == 0:
        return (0, 0) + tuple(np.shape(x)[-2:])
    return int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1


def random_position(frame_shape, patch_size, region, rng):
    """Uniform top-left corner so the patch lies inside ``region`` where possible.

    If the region is smaller than the patch the patch is centred on it; the
    result is always clamped to the frame.
    """
    H, W = frame_shape
    h, w = patch_size
    y0, x0, y1, x1 = region

    def pick(lo, hi, size, limit):
        if hi - lo >= size:
            v = int(rng.integers(lo, hi - size + 1))
        else:
            v = (lo + hi - size) // 2
        return int(np.clip(v, 0, limit - size))

    return pick(y0, y1, h, H), pick(x0, x1, w, W)


def train_patch(net, x_train, y_train, target_label, patch_shape, region=None, confidence=0.75,
                epochs=1, seed=0, max_steps=50, step_size=0.1) -> Patch:
    """Train a universal targeted patch with straight-through PGD.

    For each training sample whose label differs from the target, the patch
    is placed at a random position (inside ``region`` or the sample's active
    bounding box) and its continuous shadow copy ascends the target's
    log-softmax until the target probability reaches ``confidence`` or
    ``max_steps`` is hit. The network always sees the rounded patch.
    """
    rng = np.random.default_rng(seed)
    shadow = np.zeros(patch_shape, dtype=float)
    patch = Patch(round_half_up(shadow).astype(np.uint8), target_label, region)
    if epochs == 0:
        return patch
    eligible = np.flatnonzero(np.asarray(y_train) != target_label)
    if len(eligible) == 0:
        raise ValueError("no training samples with a label different from the target")
    h, w = patch_shape[2:]
    log_conf = np.log(confidence)
    for _ in range(epochs):
        for i in rng.permutation(eligible):
            x = np.asarray(x_train[i])
            reg = region if region is not None else active_bbox(x)
            r, c = random_position(x.shape[-2:], (h, w), reg, rng)
            empty = x[:, :, r:r + h, c:c + w] == 0
            for _ in range(max_steps):
                xp = apply_patch(x, round_half_up(shadow).astype(np.uint8), (r, c))
                counts, tape = core.forward(net, xp, record=True)
                if core.log_softmax(counts)[target_label] >= log_conf:
                    break
                up = -core.cross_entropy_grad(counts, target_label)
                g, _ = core.backward(tape, up)
                g_patch = g[:, :, r:r + h, c:c + w] * empty
                shadow = np.clip(shadow + step_size * np.sign(g_patch), 0.0, 1.0)
    patch.data = round_half_up(shadow).astype(np.uint8)
    return patch
