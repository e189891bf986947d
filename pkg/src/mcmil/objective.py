"""MIL ranking loss and its multi-camera combinations.

Everything here works on score bags (per-clip scores of one camera view) and
returns gradients with respect to those scores; :mod:`mcmil.trainer` chains
them into the network.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, SynchronizationError

LABELS = ("normal", "anomalous")
COMBINATORS = ("max", "min", "mean")


@dataclass(frozen=True)
class ScoreBag:
    scores: np.ndarray
    label: str
    scene_id: str = ""
    camera_id: object = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if s.size == 0:
            raise ContractViolation("score bag is empty")
        if not np.all((s >= 0.0) & (s <= 1.0)):
            raise ContractViolation("scores must lie in [0, 1]")
        if self.label not in LABELS:
            raise ContractViolation(f"label must be one of {LABELS}, got {self.label!r}")
        object.__setattr__(self, "scores", s)

    def __len__(self):
        return self.scores.shape[0]


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 8e-5  # temporal smoothness
    lambda2: float = 8e-5  # sparsity
    lambda3: float = 0.01  # weight decay on the squared Frobenius norm
    combinator: str = "max"
    normalize_by_bag_size: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ContractViolation(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)
        if self.combinator not in COMBINATORS:
            raise ContractViolation(f"combinator must be one of {COMBINATORS}")


@dataclass(frozen=True)
class LossBreakdown:
    hinge: float
    smoothness: float
    sparsity: float
    weight_decay: float

    @property
    def total(self):
        return self.hinge + self.smoothness + self.sparsity + self.weight_decay


def _first_argmax(x):
    return int(np.argmax(x))  # numpy returns the lowest index on ties


def ranking_loss(anomalous, normal, cfg=LossConfig(), weight_norm_sq=0.0):
    """Hinge ranking loss with smoothness, sparsity and weight-decay terms.

    Returns ``(breakdown, d_anomalous, d_normal)`` where the gradients are
    taken with respect to the scores of each bag.
    """
    if anomalous.label != "anomalous" or normal.label != "normal":
        raise ContractViolation("ranking_loss expects (anomalous, normal) bags")
    a, n = anomalous.scores, normal.scores
    ia, jn = _first_argmax(a), _first_argmax(n)
    margin = 1.0 - a[ia] + n[jn]

    m = a.shape[0]
    c_smooth, c_sparse = cfg.lambda1, cfg.lambda2
    if cfg.normalize_by_bag_size:
        c_smooth = cfg.lambda1 / (m - 1) if m > 1 else cfg.lambda1
        c_sparse = cfg.lambda2 / m
    diff = a[:-1] - a[1:]

    da = np.full(m, c_sparse)
    da[:-1] += 2.0 * c_smooth * diff
    da[1:] -= 2.0 * c_smooth * diff
    dn = np.zeros_like(n)
    if margin > 0.0:
        da[ia] -= 1.0
        dn[jn] += 1.0
    breakdown = LossBreakdown(
        hinge=float(max(margin, 0.0)),
        smoothness=c_smooth * float(np.sum(diff * diff)),
        sparsity=c_sparse * float(np.sum(a)),
        weight_decay=cfg.lambda3 * float(weight_norm_sq),
    )
    return breakdown, da, dn


@dataclass(frozen=True)
class Combined:
    value: float
    scales: np.ndarray  # gradient scale per camera; zero for inactive cameras

    @property
    def active(self):
        return tuple(int(i) for i in np.flatnonzero(self.scales))


def combine_losses(per_camera, mode="max"):
    """Reduce per-camera losses to one scalar and report gradient routing.

    ``max``/``min`` route the full gradient to the single selected camera
    (lowest index on ties); ``mean`` routes ``1/N`` to every camera.
    """
    values = np.array([v.total if isinstance(v, LossBreakdown) else float(v) for v in per_camera])
    if values.size == 0:
        raise ContractViolation("cannot combine an empty loss list")
    scales = np.zeros(values.size)
    if mode == "max":
        i = int(np.argmax(values))
        scales[i] = 1.0
        return Combined(float(values[i]), scales)
    if mode == "min":
        i = int(np.argmin(values))
        scales[i] = 1.0
        return Combined(float(values[i]), scales)
    if mode == "mean":
        scales[:] = 1.0 / values.size
        # rounding can push the float mean of equal values one ulp outside them
        return Combined(float(np.clip(np.mean(values), values.min(), values.max())), scales)
    raise ContractViolation(f"unknown combinator {mode!r}")


def bag_union(bags):
    """Elementwise mean of synchronized score bags from several cameras."""
    if not bags:
        raise ContractViolation("bag_union needs at least one bag")
    first = bags[0]
    for b in bags[1:]:
        if b.label != first.label:
            raise ContractViolation("bag_union over bags with different labels")
        if first.scene_id and b.scene_id and b.scene_id != first.scene_id:
            raise SynchronizationError(f"scene mismatch {first.scene_id!r} vs {b.scene_id!r}")
        if len(b) != len(first):
            raise SynchronizationError(f"bag lengths differ: {len(first)} vs {len(b)}")
    fused = np.mean(np.stack([b.scores for b in bags]), axis=0)
    return ScoreBag(fused, first.label, first.scene_id, "union")


def mc_loss(scene_bags, cfg=LossConfig(), weight_norm_sq=0.0, strategy="combined"):
    """Multi-camera loss for one scene pair.

    ``scene_bags`` is a list of ``(anomalous, normal)`` bag pairs, one per
    camera.  ``strategy="combined"`` applies ``cfg.combinator`` to the
    per-camera ranking losses; ``"bag_union"`` ranks the camera-averaged bags.

    Returns ``(loss, grads)`` with ``grads[c] = (d_anomalous, d_normal)``.
    """
    if not scene_bags:
        raise ContractViolation("mc_loss needs at least one camera")
    if strategy == "combined":
        parts = [ranking_loss(a, n, cfg, weight_norm_sq) for a, n in scene_bags]
        comb = combine_losses([p[0] for p in parts], cfg.combinator)
        grads = [(s * da, s * dn) for s, (_, da, dn) in zip(comb.scales, parts)]
        return comb.value, grads
    if strategy == "bag_union":
        fused_a = bag_union([a for a, _ in scene_bags])
        fused_n = bag_union([n for _, n in scene_bags])
        breakdown, da, dn = ranking_loss(fused_a, fused_n, cfg, weight_norm_sq)
        k = len(scene_bags)
        return breakdown.total, [(da / k, dn / k) for _ in scene_bags]
    raise ContractViolation(f"unknown strategy {strategy!r}")
