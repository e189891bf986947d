"""Multi-camera clip-feature datasets.

Scenes are stored as one feature matrix per camera (``n_clips x D``) plus
per-frame ground truth, 16 frames per clip.  Files on disk:

* MCVF binary feature file: ``b"MCVF"``, u32 LE version=1, u32 LE n_clips,
  u32 LE dim, then ``n_clips * dim`` f32 LE row-major.  Plain CSV matrices are
  also accepted when reading.
* Frame labels: text, one ``0``/``1`` per line.
* Manifest: JSON with ``cameras``, ``feature_dim`` and ``scenes``.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FeatureFileError, ManifestError, SpecError, SynchronizationError

FRAMES_PER_CLIP = 16
FEATURE_MAGIC = b"MCVF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")


@dataclass
class ClipBag:
    scene_id: str
    camera_id: int
    label: str
    features: np.ndarray

    @property
    def n_clips(self):
        return self.features.shape[0]


@dataclass
class MultiCameraScene:
    scene_id: str
    label: str
    bags: list
    frame_labels: np.ndarray
    camera_frame_labels: list = None  # optional per-camera override

    def __post_init__(self):
        self.validate()

    @property
    def n_clips(self):
        return self.bags[0].n_clips

    @property
    def n_cameras(self):
        return len(self.bags)

    def labels_for(self, camera):
        if self.camera_frame_labels is not None:
            return self.camera_frame_labels[camera]
        return self.frame_labels

    def validate(self):
        if not self.bags:
            raise ContractViolation(f"scene {self.scene_id} has no cameras")
        counts = {b.n_clips for b in self.bags}
        if len(counts) != 1:
            raise SynchronizationError(f"scene {self.scene_id}: clip counts differ across cameras {sorted(counts)}")
        n = self.n_clips
        if n < 1:
            raise ContractViolation(f"scene {self.scene_id} has no clips")
        dims = {b.features.shape[1] for b in self.bags}
        if len(dims) != 1:
            raise ManifestError(f"scene {self.scene_id}: feature dims differ across cameras {sorted(dims)}")
        if any(b.label != self.label for b in self.bags):
            raise ContractViolation(f"scene {self.scene_id}: bag labels disagree with the scene label")
        label_sets = [self.frame_labels] + list(self.camera_frame_labels or [])
        for lab in label_sets:
            if lab.shape[0] != FRAMES_PER_CLIP * n:
                raise SynchronizationError(
                    f"scene {self.scene_id}: {lab.shape[0]} frame labels for {n} clips "
                    f"(need {FRAMES_PER_CLIP * n})"
                )
        positives = int(self.frame_labels.sum())
        if self.label == "anomalous" and positives == 0:
            raise ManifestError(f"anomalous scene {self.scene_id} has no positive frame")
        if self.label == "normal" and positives > 0:
            raise ManifestError(f"normal scene {self.scene_id} has positive frames")


@dataclass
class Dataset:
    cameras: list
    feature_dim: int
    train: list
    test: list
    occluded: dict = field(default_factory=dict)  # synthetic only: scene_id -> per-camera flags

    @property
    def n_cameras(self):
        return len(self.cameras)

    def scenes(self, split=None):
        if split is None:
            return self.train + self.test
        return {"train": self.train, "test": self.test}[split]


# --------------------------------------------------------------------- files


def write_feature_file(path, matrix):
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise FeatureFileError(f"feature matrix must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise FeatureFileError("feature matrix contains NaN or Inf")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, m.shape[0], m.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_feature_file(path):
    """Load an MCVF or CSV feature matrix as float64 ``(n_clips, D)``."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise FeatureFileError(f"feature file not found: {path}") from None
    if blob[:4] == FEATURE_MAGIC:
        if len(blob) < _FEATURE_HEADER.size:
            raise FeatureFileError(f"{path}: truncated header")
        _, version, n, dim = _FEATURE_HEADER.unpack_from(blob)
        if version != FEATURE_VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        payload = len(blob) - _FEATURE_HEADER.size
        if payload != 4 * n * dim:
            raise FeatureFileError(f"{path}: payload is {payload} bytes, expected {4 * n * dim} (truncated?)")
        m = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(n, dim).astype(np.float64)
    else:
        try:
            text = blob.decode("utf-8")
            m = np.loadtxt(text.splitlines(), delimiter=",", dtype=np.float64, ndmin=2)
        except (UnicodeDecodeError, ValueError) as exc:
            raise FeatureFileError(f"{path}: neither MCVF nor a numeric CSV ({exc})") from None
    if m.size == 0:
        raise FeatureFileError(f"{path}: empty feature matrix")
    if not np.all(np.isfinite(m)):
        raise FeatureFileError(f"{path}: NaN or Inf values")
    return m


def csv_to_mcvf(src, dst):
    """Convert a one-matrix CSV file to MCVF; returns the matrix shape."""
    m = read_feature_file(src)
    write_feature_file(dst, m)
    return m.shape


def read_frame_labels(path):
    try:
        lines = Path(path).read_text().split("\n")
    except FileNotFoundError:
        raise ManifestError(f"frame label file not found: {path}") from None
    if lines and lines[-1] == "":
        lines.pop()
    if any(v not in ("0", "1") for v in lines):
        raise ManifestError(f"{path}: frame labels must be 0 or 1, one per line")
    return np.array([v == "1" for v in lines], dtype=np.int8)


def write_frame_labels(path, labels):
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


# ------------------------------------------------------------------ manifest


def load_manifest(path):
    """Materialize every scene listed in a manifest; the split is read, not computed."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    root = path.parent
    for key in ("cameras", "feature_dim", "scenes"):
        if key not in doc:
            raise ManifestError(f"manifest is missing {key!r}")
    cameras = list(doc["cameras"])
    if not cameras:
        raise ManifestError("manifest lists no cameras")
    dim = int(doc["feature_dim"])
    train, test = [], []
    seen = set()
    for entry in doc["scenes"]:
        sid = str(entry.get("id", ""))
        if not sid or sid in seen:
            raise ManifestError(f"missing or duplicate scene id {sid!r}")
        seen.add(sid)
        label = entry.get("label")
        if label not in ("normal", "anomalous"):
            raise ManifestError(f"scene {sid}: bad label {label!r}")
        split = entry.get("split")
        if split not in ("train", "test"):
            raise ManifestError(f"scene {sid}: bad split {split!r}")
        feats = entry.get("features", {})
        missing = [c for c in cameras if c not in feats]
        if missing:
            raise ManifestError(f"scene {sid}: no features for cameras {missing}")
        bags = []
        for ci, cam in enumerate(cameras):
            m = read_feature_file(root / feats[cam])
            if m.shape[1] != dim:
                raise ManifestError(f"scene {sid} camera {cam}: feature dim {m.shape[1]} != {dim}")
            bags.append(ClipBag(sid, ci, label, m))
        fl = entry.get("frame_labels")
        if isinstance(fl, dict):
            per_cam = [read_frame_labels(root / fl[c]) for c in cameras]
            if len({p.shape for p in per_cam}) != 1:
                raise SynchronizationError(f"scene {sid}: per-camera frame label lengths differ")
            shared = np.max(np.stack(per_cam), axis=0).astype(np.int8)
        elif isinstance(fl, str):
            per_cam = None
            shared = read_frame_labels(root / fl)
        else:
            raise ManifestError(f"scene {sid}: frame_labels must be a path or a camera->path map")
        scene = MultiCameraScene(sid, label, bags, shared, per_cam)
        (train if split == "train" else test).append(scene)
    return Dataset(cameras, dim, train, test)


def write_dataset(dataset, out_dir, manifest_name="manifest.json"):
    """Write MCVF files, label files and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, scenes in (("train", dataset.train), ("test", dataset.test)):
        for scene in scenes:
            feats = {}
            for cam, bag in zip(dataset.cameras, scene.bags):
                rel = f"features/{scene.scene_id}__{cam}.mcvf"
                write_feature_file(out / rel, bag.features)
                feats[cam] = rel
            rel_lab = f"labels/{scene.scene_id}.txt"
            write_frame_labels(out / rel_lab, scene.frame_labels)
            entries.append(
                {"id": scene.scene_id, "label": scene.label, "split": split, "features": feats, "frame_labels": rel_lab}
            )
    doc = {"cameras": list(dataset.cameras), "feature_dim": dataset.feature_dim, "scenes": entries}
    path = out / manifest_name
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


# ----------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    n_cameras: int = 2
    feature_dim: int = 32
    scenes_per_class: int = 40
    min_clips: int = 4
    max_clips: int = 10
    normal_mean: float = 0.0
    normal_scale: float = 1.0
    anomaly_shift: float = 8.0
    min_segment: int = 2
    max_segment: int = 4
    occlusion_probability: float = 0.5
    seed: int = 0

    def validate(self):
        for name in ("n_cameras", "feature_dim", "scenes_per_class", "min_clips", "min_segment"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")
        if self.max_clips < self.min_clips:
            raise SpecError("max_clips < min_clips")
        if self.max_segment < self.min_segment:
            raise SpecError("max_segment < min_segment")
        if self.max_segment > self.min_clips:
            raise SpecError(
                f"anomaly segments up to {self.max_segment} clips do not fit scenes of {self.min_clips} clips"
            )
        if not 0.0 <= self.occlusion_probability <= 1.0:
            raise SpecError(f"occlusion probability must be in [0, 1], got {self.occlusion_probability}")
        if not self.normal_scale > 0:
            raise SpecError("normal_scale must be positive")


def _f32(x):
    return x.astype(np.float32).astype(np.float64)


def generate_synthetic(spec):
    """Multi-camera scenes with a planted anomalous segment and per-camera occlusion.

    Normal clips are ``N(normal_mean, normal_scale^2)`` in every dimension.
    An anomalous scene shifts one contiguous clip segment by ``anomaly_shift``
    along a fixed random unit direction.  Each camera independently loses that
    shift with probability ``occlusion_probability``; the frame labels still
    mark the segment.  Each class is split 50/50 into train and test.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    direction = rng.normal(size=spec.feature_dim)
    direction /= np.linalg.norm(direction)
    cameras = [f"C{i}" for i in range(spec.n_cameras)]
    train, test, occluded = [], [], {}
    for label in ("normal", "anomalous"):
        scenes = []
        for k in range(spec.scenes_per_class):
            sid = f"{label}_{k:03d}"
            n = int(rng.integers(spec.min_clips, spec.max_clips + 1))
            frames = np.zeros(FRAMES_PER_CLIP * n, dtype=np.int8)
            seg = None
            if label == "anomalous":
                length = int(rng.integers(spec.min_segment, spec.max_segment + 1))
                start = int(rng.integers(0, n - length + 1))
                seg = slice(start, start + length)
                frames[FRAMES_PER_CLIP * start : FRAMES_PER_CLIP * (start + length)] = 1
            bags, flags = [], []
            for ci in range(spec.n_cameras):
                x = spec.normal_mean + spec.normal_scale * rng.normal(size=(n, spec.feature_dim))
                hidden = bool(rng.random() < spec.occlusion_probability) if seg is not None else False
                if seg is not None and not hidden:
                    x[seg] += spec.anomaly_shift * direction
                flags.append(hidden)
                bags.append(ClipBag(sid, ci, label, _f32(x)))
            if seg is not None:
                occluded[sid] = tuple(flags)
            scenes.append(MultiCameraScene(sid, label, bags, frames))
        order = rng.permutation(len(scenes))
        n_train = (len(scenes) + 1) // 2
        train += [scenes[i] for i in sorted(order[:n_train])]
        test += [scenes[i] for i in sorted(order[n_train:])]
    return Dataset(cameras, spec.feature_dim, train, test, occluded)


# ------------------------------------------------------------------ batching


def sample_batch(train, n_normal=30, n_anomalous=30, rng=None):
    """Draw ``(normal, anomalous)`` scene pairs; whole scenes, so all cameras stay in sync.

    Classes smaller than the request are sampled with replacement.
    """
    if n_normal != n_anomalous:
        raise ContractViolation("pairs are formed by position, so both classes need the same count")
    if n_normal < 1:
        raise ContractViolation("batch must contain at least one pair")
    normal = [s for s in train if s.label == "normal"]
    anomalous = [s for s in train if s.label == "anomalous"]
    if not normal or not anomalous:
        raise ContractViolation("training set must contain both classes")
    ni = rng.choice(len(normal), size=n_normal, replace=n_normal > len(normal))
    ai = rng.choice(len(anomalous), size=n_anomalous, replace=n_anomalous > len(anomalous))
    return [(normal[i], anomalous[j]) for i, j in zip(ni, ai)]
