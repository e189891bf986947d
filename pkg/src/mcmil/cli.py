"""``mcmil`` command line: synth, train, score, eval, experiment, convert, gradcheck.

Every subcommand writes only inside its output directory (``--out``, else
``$MCMIL_OUTPUT_DIR``, else ``./mcmil-out``) and leaves an
``effective_config.json`` there.  Settings resolve as flags > ``--config``
JSON file > built-in defaults; unknown config keys are rejected.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SyntheticSpec, csv_to_mcvf, generate_synthetic, load_manifest, sample_batch, write_dataset
from .errors import MCMILError, TrainingDivergenceError, ValidationError
from .evaluation import METRIC_NAMES, FusionConfig, roc_points, roc_svg, write_roc_csv
from .nn import gradient_check
from .objective import LossConfig
from .report import format_table, rows_from_results, write_report_csv
from .trainer import COMPONENTS, TrainConfig, batch_objective, evaluate, initial_params, run_experiment, score_scene, train

OUTPUT_ENV = "MCMIL_OUTPUT_DIR"
DEFAULT_OUTPUT = "mcmil-out"

_TRAIN_DEFAULTS = {
    "manifest": None,
    "mode": "sc",
    "camera": 0,
    "train_cameras": None,
    "combine": "max",
    "multiview": False,
    "split_layer": 1,
    "iters": 20000,
    "batch": 30,
    "lr": 1e-3,
    "epsilon": 1e-8,
    "lambda1": 8e-5,
    "lambda2": 8e-5,
    "lambda3": 0.01,
    "normalize_by_bag_size": False,
    "keep_prob": 0.4,
    "hidden": [512, 32],
    "seed": 0,
    "compute_dtype": "float32",
}
_EVAL_DEFAULTS = {"fuse": None, "beta": None, "threshold": 0.5, "split": "test"}

DEFAULTS = {
    "synth": {
        "cameras": 2,
        "scenes": 40,
        "dim": 32,
        "min_clips": 4,
        "max_clips": 10,
        "shift": 8.0,
        "min_segment": 2,
        "max_segment": 4,
        "occlusion": 0.5,
        "seed": 0,
    },
    "train": {**_TRAIN_DEFAULTS, "checkpoint": "model.mcml"},
    "score": {"checkpoint": None, "manifest": None, "split": "test"},
    "eval": {"checkpoint": None, "manifest": None, **_EVAL_DEFAULTS},
    "experiment": {
        **{k: v for k, v in _TRAIN_DEFAULTS.items() if k not in ("mode", "camera", "combine", "multiview")},
        **_EVAL_DEFAULTS,
        "modes": ["sc", "mc-max"],
        "repeats": 5,
    },
    "convert": {"src": None, "name": None},
    "gradcheck": {
        **_TRAIN_DEFAULTS,
        "hidden": [16, 8],
        "seeds": 20,
        "pairs": 3,
        "h": 1e-5,
        "tol": 1e-4,
        "atol": 1e-7,
        "samples": 200,
    },
}

MODE_ALIASES = {"sc": "sc", "mc": "mc", "mc-bagunion": "bag_union", "bag-union": "bag_union", "bag_union": "bag_union"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None

    return parse


def _add_common(p):
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    p.add_argument("--config", help="JSON file of settings; explicit flags win")


def _add_training(p, with_mode=True):
    p.add_argument("--manifest", help="dataset manifest JSON")
    if with_mode:
        p.add_argument("--mode", choices=sorted(MODE_ALIASES), help="training mode")
        p.add_argument("--camera", type=int, help="camera index for sc mode")
        p.add_argument("--combine", choices=["max", "min", "mean"], help="per-camera loss combinator for mc mode")
        p.add_argument("--multiview", action="store_true", help="camera-specific weights for the first layers")
    p.add_argument("--train-cameras", type=_csv_list(int), help="camera indices used by mc modes")
    p.add_argument("--split-layer", type=int, help="number of camera-specific layers with --multiview")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--batch", type=int, help="normal and anomalous bags per batch")
    p.add_argument("--lr", type=float, help="Adagrad learning rate")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lambda1", type=float, help="smoothness weight")
    p.add_argument("--lambda2", type=float, help="sparsity weight")
    p.add_argument("--lambda3", type=float, help="weight decay")
    p.add_argument("--normalize-by-bag-size", action="store_true")
    p.add_argument("--keep-prob", type=float, help="dropout keep probability")
    p.add_argument("--hidden", type=_csv_list(int), help="hidden widths, e.g. 512,32")
    p.add_argument("--seed", type=int)
    p.add_argument("--compute-dtype", choices=["float32", "float64"])


def _add_eval(p):
    p.add_argument("--fuse", choices=["linear", "max", "min"], help="late fusion (needs >= 2 cameras)")
    p.add_argument("--beta", type=float, help="weight of the first camera for linear fusion")
    p.add_argument("--threshold", type=float, help="decision threshold, score >= threshold is anomalous")
    p.add_argument("--split", choices=["train", "test"])


def build_parser():
    parser = _Parser(prog="mcmil", description="Multi-camera MIL video anomaly detection.")
    parser.add_argument("--version", action="version", version=f"mcmil {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sd = argparse.SUPPRESS

    p = sub.add_parser("synth", help="generate a synthetic multi-camera dataset", argument_default=sd)
    _add_common(p)
    p.add_argument("--cameras", type=int)
    p.add_argument("--scenes", type=int, help="scenes per class")
    p.add_argument("--dim", type=int, help="feature dimension")
    p.add_argument("--min-clips", type=int)
    p.add_argument("--max-clips", type=int)
    p.add_argument("--shift", type=float, help="anomaly shift magnitude")
    p.add_argument("--min-segment", type=int)
    p.add_argument("--max-segment", type=int)
    p.add_argument("--occlusion", type=float, help="per-camera occlusion probability")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train one model", argument_default=sd)
    _add_common(p)
    _add_training(p)
    p.add_argument("--checkpoint", help="checkpoint file name inside the output directory")

    p = sub.add_parser("score", help="write per-clip scores", argument_default=sd)
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=["train", "test"])

    p = sub.add_parser("eval", help="frame-level metrics and ROC curves", argument_default=sd)
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    _add_eval(p)

    p = sub.add_parser("experiment", help="repeated runs aggregated into a report", argument_default=sd)
    _add_common(p)
    _add_training(p, with_mode=False)
    _add_eval(p)
    p.add_argument(
        "--modes",
        type=_csv_list(str),
        help="comma list of sc, mc-max, mc-min, mc-mean, mc-bagunion; suffix +mv for multiview",
    )
    p.add_argument("--repeats", type=int)

    p = sub.add_parser("convert", help="convert a CSV feature matrix to MCVF", argument_default=sd)
    _add_common(p)
    p.add_argument("src", nargs="?")
    p.add_argument("--name", help="output file name (default: source stem + .mcvf)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check", argument_default=sd)
    _add_common(p)
    _add_training(p)
    p.add_argument("--seeds", type=int, help="number of random seeds")
    p.add_argument("--pairs", type=int, help="bag pairs per check")
    p.add_argument("--h", type=float, help="finite-difference step")
    p.add_argument("--tol", type=float, help="relative tolerance")
    p.add_argument("--atol", type=float, help="absolute fallback tolerance")
    p.add_argument("--samples", type=int, help="coordinates checked per seed")
    return parser


def resolve_config(command, flags, file_path=None):
    """Merge defaults, an optional JSON file and explicit flags, in that order."""
    defaults = DEFAULTS[command]
    merged = dict(defaults)
    if file_path is not None:
        try:
            doc = json.loads(Path(file_path).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {file_path}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {file_path} is not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise ValidationError(f"unknown config keys for {command}: {unknown}")
        merged.update(doc)
    merged.update(flags)
    return merged


def _output_dir(flags):
    return Path(flags.pop("out", None) or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ValidationError(f"--{k.replace('_', '-')} is required")


def _inside(out, name):
    """``out/name``, refusing names that would escape the output directory."""
    p = Path(name)
    if p.is_absolute() or p.name != str(p) or p.name in ("", ".", ".."):
        raise ValidationError(f"{name!r} must be a plain file name inside the output directory")
    return out / p.name


def _train_config(cfg, mode=None, combine=None, multiview=None):
    mode = MODE_ALIASES[cfg["mode"] if mode is None else mode]
    cams = cfg["train_cameras"]
    return TrainConfig(
        mode=mode,
        camera=int(cfg.get("camera", 0)),
        cameras=tuple(cams) if cams is not None else None,
        multiview=bool(cfg["multiview"] if multiview is None else multiview),
        split_layer=int(cfg["split_layer"]),
        iterations=int(cfg["iters"]),
        n_normal=int(cfg["batch"]),
        n_anomalous=int(cfg["batch"]),
        loss=LossConfig(
            lambda1=float(cfg["lambda1"]),
            lambda2=float(cfg["lambda2"]),
            lambda3=float(cfg["lambda3"]),
            combinator=cfg["combine"] if combine is None else combine,
            normalize_by_bag_size=bool(cfg["normalize_by_bag_size"]),
        ),
        learning_rate=float(cfg["lr"]),
        epsilon=float(cfg["epsilon"]),
        keep_prob=float(cfg["keep_prob"]),
        hidden=tuple(int(v) for v in cfg["hidden"]),
        seed=int(cfg["seed"]),
        compute_dtype=cfg["compute_dtype"],
    )


def _fusion(cfg, n_cameras):
    if cfg["fuse"] is None:
        if cfg["beta"] is not None:
            raise ValidationError("--beta needs --fuse linear")
        return FusionConfig()
    if n_cameras < 2:
        raise ValidationError(f"--fuse {cfg['fuse']} needs at least 2 cameras, manifest has {n_cameras}")
    return FusionConfig(cfg["fuse"], cfg["beta"])


def _check_threshold(cfg):
    t = float(cfg["threshold"])
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"threshold must be in [0, 1], got {t}")
    return t


def _check_dims(params, dataset):
    if params.layer_dims[0] != dataset.feature_dim:
        raise ValidationError(f"checkpoint expects {params.layer_dims[0]}-D features, manifest has {dataset.feature_dim}")
    if params.multiview and params.n_cameras != dataset.n_cameras:
        raise ValidationError(f"multiview checkpoint has {params.n_cameras} cameras, manifest has {dataset.n_cameras}")


def _dump_config(out, command, cfg):
    doc = {"command": command, **{k: cfg[k] for k in sorted(cfg)}}
    (out / "effective_config.json").write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def _metrics_text(result):
    width = max(len(t) for t in result.reports)
    lines = ["target".ljust(width) + "".join(f"  {m.upper():>7}" for m in METRIC_NAMES)]
    for target, rep in result.reports.items():
        lines.append(target.ljust(width) + "".join(f"  {getattr(rep, m):7.4f}" for m in METRIC_NAMES))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ commands


def cmd_synth(cfg, out):
    spec = SyntheticSpec(
        n_cameras=int(cfg["cameras"]),
        feature_dim=int(cfg["dim"]),
        scenes_per_class=int(cfg["scenes"]),
        min_clips=int(cfg["min_clips"]),
        max_clips=int(cfg["max_clips"]),
        anomaly_shift=float(cfg["shift"]),
        min_segment=int(cfg["min_segment"]),
        max_segment=int(cfg["max_segment"]),
        occlusion_probability=float(cfg["occlusion"]),
        seed=int(cfg["seed"]),
    )
    spec.validate()
    yield
    ds = generate_synthetic(spec)
    path = write_dataset(ds, out)
    occ = {sid: flags for sid, flags in sorted(ds.occluded.items())}
    (out / "occlusion.json").write_text(json.dumps(occ, indent=1) + "\n")
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test scenes to {path}")


def cmd_train(cfg, out):
    _require(cfg, "manifest")
    tc = _train_config(cfg)
    ckpt = _inside(out, cfg["checkpoint"])
    ds = load_manifest(cfg["manifest"])
    tc.train_cameras(ds.n_cameras)
    yield
    params, trace = train(ds, tc)
    save_checkpoint(ckpt, params)
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", *COMPONENTS])
        for it in range(len(trace.loss)):
            w.writerow([it, repr(float(trace.loss[it])), *(repr(float(v)) for v in trace.components[it])])
    last = float(trace.loss[-1]) if len(trace.loss) else float("nan")
    print(f"{tc.label()}: {tc.iterations} iterations, final loss {last:.6f}, checkpoint {ckpt}")


def cmd_score(cfg, out):
    _require(cfg, "checkpoint", "manifest")
    params = load_checkpoint(cfg["checkpoint"])
    ds = load_manifest(cfg["manifest"])
    _check_dims(params, ds)
    yield
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "label", "camera", "clip", "score"])
        for scene in ds.scenes(cfg["split"]):
            for bag in score_scene(params, scene):
                for k, s in enumerate(bag.scores):
                    w.writerow([scene.scene_id, scene.label, ds.cameras[bag.camera_id], k, repr(float(s))])
    print(f"scored {len(ds.scenes(cfg['split']))} scenes into {out / 'scores.csv'}")


def cmd_eval(cfg, out):
    _require(cfg, "checkpoint", "manifest")
    threshold = _check_threshold(cfg)
    params = load_checkpoint(cfg["checkpoint"])
    ds = load_manifest(cfg["manifest"])
    fusion = _fusion(cfg, ds.n_cameras)
    _check_dims(params, ds)
    yield
    result = evaluate(params, ds.scenes(cfg["split"]), ds.cameras, fusion, threshold)
    text = _metrics_text(result)
    (out / "metrics.txt").write_text(text)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", *METRIC_NAMES, "degenerate"])
        for target, rep in result.reports.items():
            w.writerow([target, *(repr(getattr(rep, m)) for m in METRIC_NAMES), ";".join(rep.degenerate)])
    curves = {}
    for target, seq in result.sequences.items():
        curves[target] = roc_points(seq)
        write_roc_csv(out / f"roc_{target}.csv", curves[target])
    (out / "roc.svg").write_text(roc_svg(curves))
    print(text, end="")


def _parse_mode_token(token):
    base, _, suffix = token.partition("+")
    if suffix not in ("", "mv"):
        raise ValidationError(f"unknown mode suffix in {token!r}")
    mv = suffix == "mv"
    if base == "sc":
        return ("sc", None, mv)
    if base in ("mc-max", "mc-min", "mc-mean"):
        return ("mc", base[3:], mv)
    if base in ("mc-bagunion", "bag-union"):
        return ("bag_union", None, mv)
    raise ValidationError(f"unknown experiment mode {token!r}")


def cmd_experiment(cfg, out):
    _require(cfg, "manifest")
    threshold = _check_threshold(cfg)
    repeats = int(cfg["repeats"])
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    modes = [_parse_mode_token(t) for t in cfg["modes"]]
    if not modes:
        raise ValidationError("--modes is empty")
    ds = load_manifest(cfg["manifest"])
    fusion = _fusion(cfg, ds.n_cameras)
    configs = []
    for mode, comb, mv in modes:
        if mode == "sc":
            for c in range(ds.n_cameras):
                configs.append(_train_config({**cfg, "camera": c}, "sc", "max", mv))
        else:
            configs.append(_train_config(cfg, mode, comb or "max", mv))
    for tc in configs:
        tc.train_cameras(ds.n_cameras)
    yield
    results = []
    for tc in configs:
        res = run_experiment(ds, tc, repeats, fusion, threshold)
        if tc.mode == "sc":
            res.label = f"SC-MIL {ds.cameras[tc.camera]}" + (" +MV" if tc.multiview else "")
        results.append(res)
        print(f"finished {res.label}", file=sys.stderr)
    rows = rows_from_results(results)
    table = format_table(rows)
    (out / "report.txt").write_text(table)
    write_report_csv(out / "report.csv", rows)
    print(table, end="")


def cmd_convert(cfg, out):
    _require(cfg, "src")
    src = Path(cfg["src"])
    if not src.is_file():
        raise ValidationError(f"no such file: {src}")
    dst = _inside(out, cfg["name"] or src.stem + ".mcvf")
    yield
    shape = csv_to_mcvf(src, dst)
    print(f"wrote {shape[0]}x{shape[1]} matrix to {dst}")


def cmd_gradcheck(cfg, out):
    tc = _train_config(cfg)
    n_seeds = int(cfg["seeds"])
    n_pairs = int(cfg["pairs"])
    if n_seeds < 1 or n_pairs < 1:
        raise ValidationError("--seeds and --pairs must be >= 1")
    ds = load_manifest(cfg["manifest"]) if cfg["manifest"] else None
    yield
    reports = []
    for k in range(n_seeds):
        data = ds or generate_synthetic(SyntheticSpec(feature_dim=8, scenes_per_class=4, seed=tc.seed + k))
        run = replace(tc, seed=tc.seed + k)
        cams = run.train_cameras(data.n_cameras)
        pairs = sample_batch(data.train, n_pairs, n_pairs, np.random.default_rng([run.seed, 1]))
        params = initial_params(data, run)
        rep = gradient_check(
            params,
            batch_objective(pairs, run, cams),
            h=float(cfg["h"]),
            tol=float(cfg["tol"]),
            atol=float(cfg["atol"]),
            n_samples=int(cfg["samples"]),
            rng=np.random.default_rng(run.seed),
        )
        reports.append({"seed": run.seed, **asdict(rep)})
    ok = all(r["passed"] for r in reports)
    (out / "gradcheck.json").write_text(json.dumps({"passed": ok, "runs": reports}, indent=1) + "\n")
    worst = max(r["max_rel_error"] for r in reports)
    worst_abs = max(r["max_abs_error"] for r in reports)
    print(f"{tc.label()}: {'PASS' if ok else 'FAIL'} over {n_seeds} seeds, worst relative error {worst:.3e}, worst absolute error {worst_abs:.3e}")
    if not ok:
        raise ArithmeticError("analytic and numeric gradients disagree")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "convert": cmd_convert,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None):
    """Parse and execute; returns the exit code instead of exiting."""
    try:
        ns = build_parser().parse_args(argv)
        flags = vars(ns)
        command = flags.pop("command")
        out = _output_dir(flags)
        cfg = resolve_config(command, flags, flags.pop("config", None))
        steps = COMMANDS[command](cfg, out)
        # each command validates everything up to its bare ``yield``; nothing is written before it
        next(steps)
        out.mkdir(parents=True, exist_ok=True)
        _dump_config(out, command, cfg)
        for _ in steps:
            pass
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergenceError, ArithmeticError, MCMILError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
