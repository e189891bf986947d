"""Single- and multi-camera MIL training, scoring and the repeated-run protocol.

Random streams are derived from ``cfg.seed`` and kept apart so that the
number of cameras never perturbs shared randomness:

* ``[seed, 0]``       parameter init
* ``[seed, 1]``       batch sampling (one scene choice serves every camera)
* ``[seed, 2, it]``   dropout masks of iteration ``it``; rows are laid out as
  all anomalous clips of pairs ``0..P-1`` followed by all normal clips, and the
  same masks are applied in every camera.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .dataset import sample_batch
from .errors import ContractViolation, TrainingDivergenceError, ValidationError
from .evaluation import METRIC_NAMES, EvalResult, FusionConfig, concat, evaluate_sequences, expand_to_frames, fuse
from .nn import DEFAULT_HIDDEN, N_LAYERS, backward, draw_masks, forward, init_optimizer, init_params, apply_update, sigmoid
from .objective import LossConfig, ScoreBag

MODES = ("sc", "mc", "bag_union")
COMPONENTS = ("hinge", "smoothness", "sparsity", "weight_decay")

_INIT, _BATCH, _DROPOUT = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "sc"
    camera: int = 0  # sc mode only
    cameras: tuple = None  # mc modes; None means every camera in the dataset
    multiview: bool = False
    split_layer: int = 1
    iterations: int = 20000
    n_normal: int = 30
    n_anomalous: int = 30
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 1e-3
    epsilon: float = 1e-8
    keep_prob: float = 0.4
    hidden: tuple = DEFAULT_HIDDEN
    seed: int = 0
    eval_every: int = None
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValidationError("keep_prob must be in (0, 1]")
        if self.learning_rate <= 0 or self.epsilon < 0:
            raise ValidationError("learning rate must be > 0 and epsilon >= 0")
        if self.n_normal < 1 or self.n_anomalous < 1:
            raise ValidationError("batch sizes must be positive")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValidationError("hidden must be two positive layer widths")
        if self.multiview and not 1 <= self.split_layer <= 3:
            raise ValidationError("split_layer must be in [1, 3]")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValidationError("compute_dtype must be float32 or float64")

    def train_cameras(self, n_available):
        if self.mode == "sc":
            cams = (self.camera,)
        elif self.cameras is not None:
            cams = tuple(self.cameras)
        else:
            if n_available < 2:
                raise ValidationError(f"mode {self.mode!r} needs a dataset with at least 2 cameras")
            cams = tuple(range(n_available))
        if not cams or any(not 0 <= c < n_available for c in cams) or len(set(cams)) != len(cams):
            raise ValidationError(f"invalid camera selection {cams} for {n_available} cameras")
        return cams

    def label(self):
        if self.mode == "sc":
            base = f"SC-MIL C{self.camera}"
        elif self.mode == "mc":
            base = f"MC-MIL {self.loss.combinator}"
        else:
            base = "Bag-Union"
        return base + (" +MV" if self.multiview else "")


@dataclass
class TrainTrace:
    loss: np.ndarray
    components: np.ndarray  # (iterations, 4) in COMPONENTS order
    evals: list = field(default_factory=list)  # (iteration, {target: auc})
    wall_clock: float = 0.0


@dataclass
class _Batch:
    anomalous: list
    normal: list
    a_off: np.ndarray
    n_off: np.ndarray
    cache: dict = None  # scene_id -> per-camera features already in the compute dtype

    @property
    def n_pairs(self):
        return len(self.anomalous)

    @property
    def n_rows(self):
        return int(self.a_off[-1] + self.n_off[-1])

    def features(self, camera):
        scenes = self.anomalous + self.normal
        if self.cache is None:
            return np.concatenate([s.bags[camera].features for s in scenes])
        return np.concatenate([self.cache[s.scene_id][camera] for s in scenes])


def make_batch(pairs, cache=None):
    normal = [n for n, _ in pairs]
    anomalous = [a for _, a in pairs]
    a_off = np.concatenate([[0], np.cumsum([s.n_clips for s in anomalous])]).astype(np.int64)
    n_off = np.concatenate([[0], np.cumsum([s.n_clips for s in normal])]).astype(np.int64)
    return _Batch(anomalous, normal, a_off, n_off, cache)


def _pair_terms(scores, batch, cfg, wd):
    """Per-pair loss terms from per-camera scores (all cameras share one batch layout).

    Returns ``(loss, components, dscores)``; ``dscores`` holds one
    ``dloss/dscore`` vector per camera.
    """
    lc = cfg.loss
    n_pairs = batch.n_pairs
    split = int(batch.a_off[-1])
    n_cams = len(scores)

    def terms(s):
        return kernels.mil_pair_losses(
            s[:split], batch.a_off, s[split:], batch.n_off, lc.lambda1, lc.lambda2, lc.normalize_by_bag_size
        )

    if cfg.mode == "bag_union":
        h, sm, sp, da, dn = terms(np.mean(np.stack(scores), axis=0))
        pair_loss = h + sm + sp + wd
        comps = np.array([np.mean(h), np.mean(sm), np.mean(sp), wd])
        d = np.concatenate([da, dn]) / n_pairs / n_cams
        return float(np.mean(pair_loss)), comps, [d] * n_cams

    parts = [terms(s) for s in scores]
    h = np.stack([p[0] for p in parts])
    sm = np.stack([p[1] for p in parts])
    sp = np.stack([p[2] for p in parts])
    totals = h + sm + sp + wd
    weights = np.zeros_like(totals)
    comb = "max" if cfg.mode == "sc" else lc.combinator
    if comb == "mean":
        weights[:] = 1.0 / n_cams
        pair_loss = np.clip(np.mean(totals, axis=0), totals.min(axis=0), totals.max(axis=0))
    else:
        pick = np.argmax(totals, axis=0) if comb == "max" else np.argmin(totals, axis=0)
        weights[pick, np.arange(n_pairs)] = 1.0
        pair_loss = totals[pick, np.arange(n_pairs)]
    comps = np.array(
        [
            np.mean(np.sum(weights * h, axis=0)),
            np.mean(np.sum(weights * sm, axis=0)),
            np.mean(np.sum(weights * sp, axis=0)),
            wd,
        ]
    )
    a_len = np.diff(batch.a_off)
    n_len = np.diff(batch.n_off)
    dscores = []
    for k, (_, _, _, da, dn) in enumerate(parts):
        d = np.concatenate([da * np.repeat(weights[k], a_len), dn * np.repeat(weights[k], n_len)])
        dscores.append(d / n_pairs)
    return float(np.mean(pair_loss)), comps, dscores


def _forward_cameras(params, batch, cfg, cameras, masks, dtype):
    mode = "infer" if masks is None else "train"
    tapes, scores = [], []
    for c in cameras:
        s, tape = forward(
            params, batch.features(c), mode, camera=c, masks=masks, keep_prob=cfg.keep_prob, dtype=dtype
        )
        tapes.append(tape)
        scores.append(s)
    return tapes, scores


def batch_loss_and_grads(params, batch, cfg, cameras, masks=None, dtype=np.float64):
    """Mean per-pair loss over ``batch`` and its parameter gradient.

    ``masks=None`` runs the network without dropout.  Returns
    ``(loss, components, grads)`` with ``components`` ordered as COMPONENTS.
    """
    tapes, scores = _forward_cameras(params, batch, cfg, cameras, masks, dtype)
    wd = cfg.loss.lambda3 * params.weight_norm_sq()
    loss, comps, dscores = _pair_terms(scores, batch, cfg, wd)
    grads = params.zeros_like()
    for tape, d in zip(tapes, dscores):
        if np.any(d):
            backward(tape, d, out=grads)
    params.add_weight_decay_grad(grads, cfg.loss.lambda3)
    return loss, comps, grads


def _stacked_params(params, coords, deltas):
    """``K`` copies of every tensor, copy ``k`` with flat coordinate ``coords[k]`` moved by ``deltas[k]``."""
    tensors = params.tensors()
    k = len(coords)
    stacks = [np.repeat(t[None], k, axis=0) for t in tensors]
    bounds = np.cumsum([t.size for t in tensors])
    owner = np.searchsorted(bounds, coords, side="right")
    local = coords - np.concatenate([[0], bounds[:-1]])[owner]
    for i in np.unique(owner):
        rows = np.flatnonzero(owner == i)
        stacks[i].reshape(k, -1)[rows, local[rows]] += deltas[rows]
    return stacks


def _stacked_layer(stacks, params, l, camera):
    if params.variants and l < params.split:
        i = 2 * N_LAYERS + 2 * (camera * params.split + l)
    else:
        i = 2 * l
    return stacks[i], stacks[i + 1]


def _stacked_first_argmax(x, off, seg_max):
    idx = np.broadcast_to(np.arange(x.shape[1]), x.shape)
    cand = np.where(x == np.repeat(seg_max, np.diff(off), axis=1), idx, x.shape[1])
    return np.minimum.reduceat(cand, off[:-1], axis=1)


def _stacked_pair_losses(s, batch, lc):
    """Per-pair ranking loss for ``(K, rows)`` scores, plus its branch choices."""
    a_off, n_off = batch.a_off, batch.n_off
    split = int(a_off[-1])
    a, n = s[:, :split], s[:, split:]
    a_max = np.maximum.reduceat(a, a_off[:-1], axis=1)
    n_max = np.maximum.reduceat(n, n_off[:-1], axis=1)
    a_len = np.diff(a_off)
    if lc.normalize_by_bag_size:
        c_smooth = np.where(a_len > 1, lc.lambda1 / np.maximum(a_len - 1, 1), lc.lambda1)
        c_sparse = lc.lambda2 / a_len
    else:
        c_smooth, c_sparse = lc.lambda1, lc.lambda2
    diff = np.zeros_like(a)
    diff[:, :-1] = a[:, :-1] - a[:, 1:]
    diff[:, a_off[1:] - 1] = 0.0  # no smoothness across bag boundaries
    smooth = c_smooth * np.add.reduceat(diff * diff, a_off[:-1], axis=1)
    sparse = c_sparse * np.add.reduceat(a, a_off[:-1], axis=1)
    hinge = np.maximum(1.0 - a_max + n_max, 0.0)
    branches = [_stacked_first_argmax(a, a_off, a_max), _stacked_first_argmax(n, n_off, n_max), hinge > 0.0]
    return hinge + smooth + sparse, branches


def probe_many(params, batch, cfg, cameras, coords, deltas, max_floats=4_000_000):
    """Dropout-free float64 batch losses for many one-coordinate perturbations.

    Row ``k`` moves flat parameter ``coords[k]`` (in ``params.tensors()``
    order) by ``deltas[k]``.  Returns ``(losses, signatures)``: ``losses`` has
    shape ``(K,)`` and row ``k`` of ``signatures`` records every non-smooth
    branch taken (ReLU signs, argmax clip per bag, hinge activity and the
    selected camera).  The loss is smooth wherever the signature is locally
    constant.

    The network and loss are evaluated on stacked parameter copies rather
    than through :func:`batch_loss_and_grads`, so the two act as independent
    implementations of the same objective.
    """
    coords = np.asarray(coords, dtype=np.int64)
    deltas = np.asarray(deltas, dtype=np.float64)
    n_params = sum(t.size for t in params.tensors())
    width = max(params.layer_dims)
    per_copy = n_params + batch.n_rows * width * len(cameras)
    block = max(1, max_floats // per_copy)
    if len(coords) > block:
        parts = [
            probe_many(params, batch, cfg, cameras, coords[i : i + block], deltas[i : i + block], max_floats)
            for i in range(0, len(coords), block)
        ]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    k = len(coords)
    stacks = _stacked_params(params, coords, deltas)
    lc = cfg.loss
    sig = []
    scores = []
    for c in cameras:
        h = batch.features(c).astype(np.float64)
        for l in range(N_LAYERS):
            w, b = _stacked_layer(stacks, params, l, c)
            z = h @ w.transpose(0, 2, 1) + b[:, None, :]
            if l < N_LAYERS - 1:
                sig.append(z > 0.0)
                h = np.maximum(z, 0.0)
        scores.append(sigmoid(z[:, :, 0]))

    if params.variants:
        active = [2 * l for l in range(params.split, N_LAYERS)]
        active += [2 * N_LAYERS + 2 * (c * params.split + l) for c in range(params.n_cameras) for l in range(params.split)]
    else:
        active = [2 * l for l in range(N_LAYERS)]
    wd = lc.lambda3 * sum(np.sum(stacks[i] * stacks[i], axis=(1, 2)) for i in active)

    if cfg.mode == "bag_union":
        totals, branches = _stacked_pair_losses(np.mean(np.stack(scores), axis=0), batch, lc)
        pair_loss = totals + wd[:, None]
        sig += branches
    else:
        per_cam = []
        for s in scores:
            totals, branches = _stacked_pair_losses(s, batch, lc)
            per_cam.append(totals + wd[:, None])
            sig += branches
        per_cam = np.stack(per_cam)
        comb = "max" if cfg.mode == "sc" else lc.combinator
        if comb == "mean":
            pair_loss = np.clip(np.mean(per_cam, axis=0), per_cam.min(axis=0), per_cam.max(axis=0))
        else:
            pick = np.argmax(per_cam, axis=0) if comb == "max" else np.argmin(per_cam, axis=0)
            pair_loss = np.take_along_axis(per_cam, pick[None], axis=0)[0]
            sig.append(pick)
    signatures = np.concatenate([np.asarray(x, dtype=np.int64).reshape(k, -1) for x in sig], axis=1)
    return np.mean(pair_loss, axis=1), signatures


def batch_objective(pairs, cfg, cameras):
    """``params -> (loss, grads)`` without dropout in float64, for gradient checking.

    The returned callable carries ``probe_many(params, coords, deltas)`` (see
    :func:`probe_many`), which :func:`~mcmil.nn.gradient_check` uses for its
    finite differences and to skip probes that straddle a kink.
    """
    batch = make_batch(pairs)

    def objective(params):
        loss, _, grads = batch_loss_and_grads(params, batch, cfg, cameras, dtype=np.float64)
        return loss, grads

    objective.probe_many = lambda params, coords, deltas: probe_many(params, batch, cfg, cameras, coords, deltas)
    return objective


def initial_params(dataset, cfg):
    rng = np.random.default_rng([cfg.seed, _INIT])
    n_variants = dataset.n_cameras if cfg.multiview else 0
    return init_params(dataset.feature_dim, rng, cfg.hidden, n_variants, cfg.split_layer)


def train(dataset, cfg):
    """Run ``cfg.iterations`` Adagrad steps; returns ``(params, trace)``.

    Parameters are rounded to float32 after every step so the returned model
    survives a checkpoint round trip unchanged.
    """
    cams = cfg.train_cameras(dataset.n_cameras)
    labels = {s.label for s in dataset.train}
    if labels != {"normal", "anomalous"}:
        raise ContractViolation("training split must contain both normal and anomalous scenes")
    params = initial_params(dataset, cfg)
    state = init_optimizer(params, cfg.learning_rate, cfg.epsilon)
    batch_rng = np.random.default_rng([cfg.seed, _BATCH])
    dtype = np.dtype(cfg.compute_dtype)
    cache = {s.scene_id: [b.features.astype(dtype) for b in s.bags] for s in dataset.train}
    losses = np.zeros(cfg.iterations)
    comps = np.zeros((cfg.iterations, len(COMPONENTS)))
    trace = TrainTrace(losses, comps)
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        batch = make_batch(sample_batch(dataset.train, cfg.n_normal, cfg.n_anomalous, batch_rng), cache)
        masks = draw_masks(np.random.default_rng([cfg.seed, _DROPOUT, it]), batch.n_rows, cfg.hidden, cfg.keep_prob)
        loss, c, grads = batch_loss_and_grads(params, batch, cfg, cams, masks, dtype)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite loss at iteration {it}", it)
        try:
            params, state = apply_update(params, grads, state)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"{exc} at iteration {it}", it) from None
        params = params.quantized()
        losses[it] = loss
        comps[it] = c
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0 and dataset.test:
            res = evaluate(params, dataset.test, dataset.cameras)
            trace.evals.append((it + 1, {t: r.auc for t, r in res.reports.items()}))
    trace.wall_clock = time.perf_counter() - t0
    return params, trace


def score_scene(params, scene, cameras=None):
    """Inference-mode clip scores, one ScoreBag per camera."""
    cams = range(scene.n_cameras) if cameras is None else cameras
    out = []
    for c in cams:
        s, _ = forward(params, scene.bags[c].features, "infer", camera=c)
        out.append(ScoreBag(s, scene.label, scene.scene_id, c))
    return out


def evaluate(params, scenes, camera_names=None, fusion=FusionConfig(), threshold=0.5):
    """Pooled frame-level metrics per camera and, with two or more cameras, fused.

    Scenes are concatenated in the given order before any metric is computed.
    """
    if not scenes:
        raise ValidationError("no scenes to evaluate")
    n_cams = scenes[0].n_cameras
    names = list(camera_names) if camera_names is not None else [f"C{i}" for i in range(n_cams)]
    per_cam = [[] for _ in range(n_cams)]
    fused = []
    for scene in scenes:
        bags = score_scene(params, scene)
        for c, bag in enumerate(bags):
            per_cam[c].append(expand_to_frames(bag, scene.labels_for(c)))
        if n_cams >= 2:
            fused.append(fuse([expand_to_frames(b, scene.frame_labels) for b in bags], fusion))
    targets = {names[c]: concat(per_cam[c], names[c]) for c in range(n_cams)}
    if fused:
        targets["fused"] = concat(fused, "fused")
    return evaluate_sequences(targets, threshold)


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def of(cls, values):
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.mean()), float(v.std(ddof=0)), float(v.min()), float(v.max()))


@dataclass
class ExperimentResult:
    label: str
    aggregates: dict  # target -> {metric: Aggregate}
    runs: list  # one EvalResult per repeat
    traces: list


def run_experiment(dataset, cfg, repeats=5, fusion=FusionConfig(), threshold=0.5):
    """Train and evaluate ``repeats`` times with seeds ``seed, seed+1, ...``."""
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    runs, traces = [], []
    for k in range(repeats):
        params, trace = train(dataset, replace(cfg, seed=cfg.seed + k))
        runs.append(evaluate(params, dataset.test, dataset.cameras, fusion, threshold))
        traces.append(trace)
    aggregates = {}
    for target in runs[0].reports:
        aggregates[target] = {
            m: Aggregate.of([getattr(r.reports[target], m) for r in runs]) for m in METRIC_NAMES
        }
    return ExperimentResult(cfg.label(), aggregates, runs, traces)


__all__ = [
    "Aggregate",
    "EvalResult",
    "ExperimentResult",
    "TrainConfig",
    "TrainTrace",
    "probe_many",
    "batch_loss_and_grads",
    "batch_objective",
    "evaluate",
    "make_batch",
    "run_experiment",
    "score_scene",
    "train",
]
