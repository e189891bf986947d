"""Anomaly-score regressor: ``D -> h1 -> h2 -> 1`` fully connected network.

Hidden layers use ReLU followed by inverted dropout, the output is a sigmoid.
The multiview variant gives every camera its own copy of the first ``split``
layers while the remaining layers stay shared.

Parameters are stored as float64 arrays.  Trained parameters are kept
f32-representable (see :meth:`RegressorParams.quantized`) so that a checkpoint
round trip is exact.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputShapeError, RoutingError, TrainingDivergenceError

N_LAYERS = 3
DEFAULT_HIDDEN = (512, 32)
DEFAULT_KEEP_PROB = 0.4


@dataclass
class RegressorParams:
    weights: list
    biases: list
    variants: list = field(default_factory=list)  # per camera: (weights[:split], biases[:split])
    split: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def layer_dims(self):
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def multiview(self):
        return bool(self.variants)

    @property
    def n_cameras(self):
        return len(self.variants)

    def validate(self):
        if len(self.weights) != N_LAYERS or len(self.biases) != N_LAYERS:
            raise InputShapeError(f"expected {N_LAYERS} layers, got {len(self.weights)}")
        dims = self.layer_dims
        if dims[-1] != 1 or any(d < 1 for d in dims):
            raise InputShapeError(f"invalid layer dims {dims}")
        for l in range(N_LAYERS):
            if self.weights[l].shape != (dims[l + 1], dims[l]) or self.biases[l].shape != (dims[l + 1],):
                raise InputShapeError(f"layer {l} tensors do not match dims {dims}")
        if self.variants:
            if not 1 <= self.split <= N_LAYERS:
                raise InputShapeError(f"split layer must be in [1, {N_LAYERS}], got {self.split}")
            for cam, (vw, vb) in enumerate(self.variants):
                if len(vw) != self.split or len(vb) != self.split:
                    raise InputShapeError(f"camera {cam} variant must cover {self.split} layers")
                for l in range(self.split):
                    if vw[l].shape != self.weights[l].shape or vb[l].shape != self.biases[l].shape:
                        raise InputShapeError(f"camera {cam} variant layer {l} has the wrong shape")
        elif self.split != 0:
            raise InputShapeError("split must be 0 without camera variants")

    def layer(self, l, camera=None):
        if self.variants:
            if camera is None:
                raise RoutingError("multiview parameters need a camera index")
            if not 0 <= camera < len(self.variants):
                raise RoutingError(f"camera {camera} out of range [0, {len(self.variants)})")
            if l < self.split:
                vw, vb = self.variants[camera]
                return vw[l], vb[l]
        return self.weights[l], self.biases[l]

    def tensors(self):
        """All tensors in checkpoint order: shared (W, b) per layer, then variants by camera."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        for vw, vb in self.variants:
            for w, b in zip(vw, vb):
                out += [w, b]
        return out

    def with_tensors(self, arrays):
        arrays = list(arrays)
        it = iter(arrays)
        weights, biases = [], []
        for _ in range(N_LAYERS):
            weights.append(next(it))
            biases.append(next(it))
        variants = []
        for _ in self.variants:
            vw, vb = [], []
            for _ in range(self.split):
                vw.append(next(it))
                vb.append(next(it))
            variants.append((vw, vb))
        return RegressorParams(weights, biases, variants, self.split)

    def map(self, fn):
        return self.with_tensors(fn(t) for t in self.tensors())

    def copy(self):
        return self.map(np.array)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def quantized(self):
        """Round every tensor to the nearest float32 (kept as float64)."""
        return self.map(lambda t: t.astype(np.float32).astype(np.float64))

    def active_weights(self):
        """Weight matrices that take part in some forward pass."""
        if not self.variants:
            return list(self.weights)
        out = list(self.weights[self.split:])
        for vw, _ in self.variants:
            out += vw
        return out

    def weight_norm_sq(self):
        return float(sum(np.sum(w * w) for w in self.active_weights()))

    def add_weight_decay_grad(self, grads, coeff):
        """Accumulate ``d(coeff * weight_norm_sq)`` into ``grads`` in place."""
        if coeff == 0.0:
            return grads
        if not self.variants:
            for l in range(N_LAYERS):
                grads.weights[l] += 2.0 * coeff * self.weights[l]
            return grads
        for l in range(self.split, N_LAYERS):
            grads.weights[l] += 2.0 * coeff * self.weights[l]
        for (gw, _), (vw, _) in zip(grads.variants, self.variants):
            for l in range(self.split):
                gw[l] += 2.0 * coeff * vw[l]
        return grads


def init_params(input_dim, rng, hidden=DEFAULT_HIDDEN, n_cameras=0, split=1):
    """Glorot-uniform weights, zero biases.  Camera variants start as copies of the shared prefix."""
    dims = (int(input_dim),) + tuple(int(h) for h in hidden) + (1,)
    weights, biases = [], []
    for l in range(N_LAYERS):
        fan_in, fan_out = dims[l], dims[l + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        weights.append(w.astype(np.float32).astype(np.float64))
        biases.append(np.zeros(fan_out))
    variants = []
    if n_cameras:
        for _ in range(n_cameras):
            variants.append(([weights[l].copy() for l in range(split)], [biases[l].copy() for l in range(split)]))
    return RegressorParams(weights, biases, variants, split if n_cameras else 0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def draw_masks(rng, n_rows, widths, keep_prob=DEFAULT_KEEP_PROB):
    """Bernoulli(keep_prob) keep-masks, one ``(n_rows, width)`` block per hidden layer."""
    return [rng.random((n_rows, w), dtype=np.float32) < keep_prob for w in widths]


@dataclass
class Tape:
    params: RegressorParams
    camera: object
    x: np.ndarray
    z: list
    a: list
    masks: object
    keep_prob: float
    score: np.ndarray
    single: bool


def forward(
    params, x, mode="infer", camera=None, rng=None, keep_prob=DEFAULT_KEEP_PROB, masks=None, dtype=np.float64
):
    """Score one feature vector or a ``(rows, D)`` matrix of clips.

    In ``"train"`` mode inverted dropout is applied after both hidden ReLUs.
    Masks come from ``masks`` when given, otherwise they are drawn from
    ``rng``.  Layer arithmetic runs in ``dtype``; the sigmoid and the returned
    scores are always float64.  Returns ``(score, tape)``; the score is a
    float for 1-D input.
    """
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    single = x.ndim == 1
    xm = x[None, :] if single else x
    dims = params.layer_dims
    if xm.ndim != 2 or xm.shape[1] != dims[0]:
        raise InputShapeError(f"expected feature length {dims[0]}, got shape {x.shape}")
    if params.variants:
        if camera is None:
            raise RoutingError("multiview parameters need a camera index")
        if not 0 <= camera < params.n_cameras:
            raise RoutingError(f"camera {camera} out of range [0, {params.n_cameras})")

    if mode == "train":
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep probability must be in (0, 1], got {keep_prob}")
        if masks is None:
            if rng is None:
                raise ValueError("train mode needs an rng or explicit masks")
            masks = draw_masks(rng, xm.shape[0], dims[1:3], keep_prob)
        for m, w in zip(masks, dims[1:3]):
            if m.shape != (xm.shape[0], w):
                raise InputShapeError(f"dropout mask shape {m.shape} != {(xm.shape[0], w)}")
    elif mode == "infer":
        masks = None
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    zs, acts = [], []
    h = xm.astype(dtype, copy=False)
    for l in range(N_LAYERS):
        w, b = params.layer(l, camera)
        z = h @ w.astype(dtype, copy=False).T + b.astype(dtype, copy=False)
        zs.append(z)
        if l < N_LAYERS - 1:
            if masks is None:
                h = np.maximum(z, 0.0)
            else:
                h = kernels.relu_dropout(z, masks[l], 1.0 / keep_prob)
            acts.append(h)
    score = sigmoid(zs[-1][:, 0])
    tape = Tape(params, camera, xm.astype(dtype, copy=False), zs, acts, masks, keep_prob, score, single)
    return (float(score[0]) if single else score), tape


def backward(tape, dscore, out=None):
    """Backpropagate ``dscore = dloss/dscore`` through a recorded forward pass.

    Gradients are added into ``out`` when given (same structure as the
    params), so several tapes can be reduced in a fixed order.
    """
    params = tape.params
    d = np.asarray(dscore, dtype=np.float64).reshape(-1)
    if d.shape[0] != tape.score.shape[0]:
        raise InputShapeError(f"dscore has {d.shape[0]} entries, tape has {tape.score.shape[0]}")
    if out is None:
        out = params.zeros_like()
    elif out.layer_dims != params.layer_dims or out.n_cameras != params.n_cameras:
        raise InputShapeError("gradient accumulator does not match the tape's parameters")

    dtype = tape.x.dtype
    s = tape.score
    dz = (d * (s * (1.0 - s))).astype(dtype)[:, None]
    scale = 1.0 / tape.keep_prob
    for l in range(N_LAYERS - 1, -1, -1):
        h_in = tape.a[l - 1] if l > 0 else tape.x
        routed = params.variants and l < params.split
        if routed:
            gw, gb = out.variants[tape.camera][0][l], out.variants[tape.camera][1][l]
        else:
            gw, gb = out.weights[l], out.biases[l]
        gw += dz.T @ h_in
        gb += dz.sum(axis=0)
        if l == 0:
            break
        w, _ = params.layer(l, tape.camera)
        da = dz @ w.astype(dtype, copy=False)
        z_prev = tape.z[l - 1]
        if tape.masks is None:
            dz = np.where(z_prev > 0.0, da, 0.0)
        else:
            dz = kernels.relu_dropout_grad(da, z_prev, tape.masks[l - 1], scale)
    return out


@dataclass
class OptimizerState:
    accumulators: list
    learning_rate: float = 1e-3
    epsilon: float = 1e-8


def init_optimizer(params, learning_rate=1e-3, epsilon=1e-8):
    return OptimizerState([np.zeros_like(t) for t in params.tensors()], learning_rate, epsilon)


def apply_update(params, grads, state):
    """Adagrad step.  Returns new ``(params, state)``; inputs are not modified."""
    p_tensors = params.tensors()
    g_tensors = grads.tensors()
    if len(p_tensors) != len(g_tensors) or len(p_tensors) != len(state.accumulators):
        raise InputShapeError("params, gradients and optimizer state disagree in structure")
    new_p, new_acc = [], []
    for p, g, acc in zip(p_tensors, g_tensors, state.accumulators):
        if p.shape != g.shape or p.shape != acc.shape:
            raise InputShapeError(f"shape mismatch {p.shape} / {g.shape} / {acc.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient")
        acc = acc + g * g
        new_acc.append(acc)
        denom = np.sqrt(acc) + state.epsilon
        # acc == 0 implies g == 0; skip the 0/0 that eps=0 would otherwise produce
        step = np.divide(g, denom, out=np.zeros_like(g), where=denom > 0)
        new_p.append(p - state.learning_rate * step)
    return params.with_tensors(new_p), OptimizerState(new_acc, state.learning_rate, state.epsilon)


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    n_failed: int
    passed: bool
    n_skipped: int = 0  # coordinates whose +-h probe crossed a kink


def _pointwise_probe(objective):
    """``probe_many`` stand-in for a plain objective: one call per probe, no signatures."""

    def probe_many(params, coords, deltas):
        work = params.copy()
        tensors = work.tensors()
        bounds = np.cumsum([t.size for t in tensors])
        losses = np.empty(len(coords))
        for k, (flat, d) in enumerate(zip(coords, deltas)):
            ti = int(np.searchsorted(bounds, flat, side="right"))
            view = tensors[ti].reshape(-1)
            local = flat - (bounds[ti - 1] if ti else 0)
            old = view[local]
            view[local] = old + d
            losses[k] = objective(work)[0]
            view[local] = old
        return losses, None

    return probe_many


def gradient_check(params, objective, h=1e-5, tol=1e-4, atol=1e-7, n_samples=200, rng=None):
    """Compare ``objective``'s analytic gradient with central differences.

    ``objective(params) -> (loss, grads)``.  Coordinates are visited in random
    order until ``n_samples`` have been checked (all of them for small nets).
    A coordinate passes when its relative error is below ``tol`` or its
    absolute error below ``atol``.  ``max_rel_error`` covers coordinates whose
    gradient magnitude exceeds ``atol``.

    When the objective carries ``probe_many(params, coords, deltas) ->
    (losses, signatures)`` the perturbed losses are evaluated in batches, and
    a coordinate whose ``+h`` or ``-h`` probe changes the signature (it
    straddles a kink, where central differences are meaningless) is skipped
    and counted in ``n_skipped``.  Failures are reported, never raised.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    probe_many = getattr(objective, "probe_many", None) or _pointwise_probe(objective)
    _, grads = objective(params)
    g_flat = np.concatenate([g.ravel() for g in grads.tensors()])
    order = rng.permutation(g_flat.shape[0])
    _, base_sig = probe_many(params, order[:1], np.zeros(1))

    max_rel = max_abs = 0.0
    failed = checked = skipped = pos = 0
    while checked < n_samples and pos < order.shape[0]:
        chunk = order[pos : pos + n_samples - checked]
        pos += chunk.shape[0]
        m = chunk.shape[0]
        losses, sigs = probe_many(params, np.concatenate([chunk, chunk]), np.repeat([h, -h], m))
        for i, flat in enumerate(chunk):
            if sigs is not None and not (np.array_equal(sigs[i], base_sig[0]) and np.array_equal(sigs[m + i], base_sig[0])):
                skipped += 1
                continue
            checked += 1
            numeric = (losses[i] - losses[m + i]) / (2.0 * h)
            analytic = g_flat[flat]
            abs_err = abs(analytic - numeric)
            scale = max(abs(analytic), abs(numeric))
            rel_err = abs_err / scale if scale > 0 else 0.0
            max_abs = max(max_abs, abs_err)
            if scale > atol:
                max_rel = max(max_rel, rel_err)
            if abs_err > atol and rel_err >= tol:
                failed += 1
    return GradCheckReport(float(max_rel), float(max_abs), checked, failed, failed == 0 and checked > 0, skipped)
