"""Command-line entry point: ``laserodom <command> [options]``.

Option values resolve as built-in defaults < ``--config`` file < flags.
The config file is JSON; top-level keys apply to every command and a
section named after the command applies to that command only.  A run
manifest written by an earlier run is itself a valid ``--config`` file, so
``laserodom <command> --config <manifest>`` repeats the run.

Exit codes: 0 success, 1 internal error, 2 I/O or usage error, 3 config
mismatch, 4 data misalignment.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_CONFIG, EXIT_ALIGN = 0, 1, 2, 3, 4

log = logging.getLogger("laserodom")


class UsageError(Exception):
    pass


class ConfigMismatch(Exception):
    pass


# (name, type, default, help); a default of None means "unset"
OPTIONS = {
    "synth": [
        ("frames", int, 200, "frames per sequence (>= 2)"),
        ("preset", str, "circle", "trajectory preset: line, circle, random-walk"),
        ("sequences", int, 1, "number of sequences to generate"),
        ("seq_id", str, "00", "id of the first sequence; later ones count up"),
        ("noise", float, 0.02, "range noise standard deviation (m)"),
        ("dropout", float, 0.01, "per-ray dropout probability"),
        ("radius", float, 20.0, "circle radius (m)"),
        ("step", float, 0.5, "distance per frame for line/circle (m)"),
        ("arena", float, 60.0, "side of the square arena (m)"),
        ("density", float, 0.5, "obstacles per 100 m^2"),
        ("max_range", float, 80.0, "scanner range (m)"),
    ],
    "ingest-kitti": [
        ("root", str, None, "KITTI odometry root (contains sequences/ and poses/)"),
        ("sequences_list", str, "00", "comma-separated sequence ids"),
        ("band", str, "-0.2,0.2", "elevation band of the extracted layer (deg)"),
        ("max_frames", int, None, "only ingest the first N frames"),
        ("max_range", float, 80.0, "encoder range clamp (m)"),
    ],
    "train-cnn": [
        ("data", str, None, "dataset root"),
        ("train", str, None, "comma-separated training sequences (default: KITTI split)"),
        ("stage", str, "cnn-pretrain-classification", "cnn-pretrain-classification or cnn-pretrain-regression"),
        ("regression_form", str, "squared", "squared or euclidean-literal"),
        ("beta", float, 100.0, "rotation loss weight"),
        ("epochs", int, 10, "epochs"),
        ("lr", float, 1e-4, "Adam learning rate"),
        ("batch_size", int, 32, "pairs per step"),
        ("checkpoint_every", int, 0, "epochs between intermediate checkpoints"),
        ("resume", str, None, "checkpoint to resume from"),
        ("max_frames", int, None, "truncate sequences"),
    ],
    "train-rcnn": [
        ("data", str, None, "dataset root"),
        ("train", str, None, "comma-separated training sequences (default: KITTI split)"),
        ("cnn_ckpt", str, None, "pretrained CNN checkpoint (required)"),
        ("regression_form", str, "squared", "squared or euclidean-literal"),
        ("beta", float, 100.0, "rotation loss weight"),
        ("epochs", int, 10, "epochs"),
        ("lr", float, 1e-4, "Adam learning rate"),
        ("window", int, 8, "frames per truncated window"),
        ("windows_per_batch", int, 4, "windows per step"),
        ("finetune_cnn", int, 1, "1 to keep training the convolutions, 0 to freeze them"),
        ("checkpoint_every", int, 0, "epochs between intermediate checkpoints"),
        ("resume", str, None, "checkpoint to resume from"),
        ("max_frames", int, None, "truncate sequences"),
    ],
    "infer": [
        ("ckpt", str, None, "trained RCNN checkpoint"),
        ("data", str, None, "dataset root"),
        ("seq", str, None, "sequence id"),
        ("mode", str, "heading-accumulating", "heading-accumulating or paper-literal"),
        ("emit_deltas", int, 0, "1 to also write per-frame motion deltas"),
        ("max_frames", int, None, "truncate the sequence"),
    ],
    "eval": [
        ("gt", str, None, "ground-truth trajectory CSV"),
        ("est", list, None, "estimated trajectory as LABEL=PATH (repeatable)"),
        ("seq_id", str, "", "sequence id for the reports"),
        ("reports", list, None, "earlier drift report JSON files to merge (repeatable)"),
        ("compare", int, 0, "1 to write a comparison table"),
        ("paper_baselines", int, 0, "1 to append the transcribed published drift values"),
    ],
    "icp": [
        ("data", str, None, "dataset root"),
        ("seq", str, None, "sequence id"),
        ("max_iterations", int, 150, "iterations per pair"),
        ("max_correspondence", float, 2.0, "correspondence distance cap (m)"),
        ("tolerance", float, 1e-5, "convergence tolerance on the transform change"),
        ("trim", float, 0.1, "fraction of worst correspondences dropped"),
        ("max_frames", int, None, "truncate the sequence"),
    ],
    "gradcheck": [
        ("stage", str, "all", "stage name or 'all'"),
        ("regression_form", str, "squared", "squared or euclidean-literal"),
        ("eps", float, 1e-5, "finite-difference step"),
        ("tolerance", float, 1e-4, "maximum accepted relative error"),
    ],
}

FLAG_NAMES = {"sequences_list": "sequences"}


def _flag(name: str) -> str:
    return "--" + FLAG_NAMES.get(name, name).replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file or an earlier run manifest")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--workers", type=int, default=None, help="numeric threads; 1 is fully deterministic")
    common.add_argument("--out", default=None, help="output directory (default .)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="laserodom", description="2D laser odometry toolkit")
    parser.add_argument("--version", action="version", version=f"laserodom {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, parents=[common])
        for name, typ, default, help_ in opts:
            if typ is list:
                p.add_argument(_flag(name), dest=name, action="append", default=None, help=help_)
            else:
                p.add_argument(_flag(name), dest=name, type=typ, default=None,
                               help=f"{help_} (default {default})" if default is not None else help_)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults < config file < explicit flags."""
    cmd = args.command
    cfg = {"seed": 0, "workers": 1, "out": "."}
    cfg.update({name: default for name, _, default, _ in OPTIONS[cmd]})
    model = None
    if args.config:
        path = Path(args.config)
        try:
            obj = json.loads(path.read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if "manifest_version" in obj:
            obj = obj["config"]
        known = set(cfg) | {"model"}
        for key, val in obj.items():
            if key in known:
                cfg[key] = val
        section = obj.get(cmd, {})
        for key, val in section.items():
            if key not in known:
                raise UsageError(f"unknown option {key!r} in config section {cmd!r}")
            cfg[key] = val
        model = cfg.pop("model", None)
    for key in ("seed", "workers", "out"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    for name, _, _, _ in OPTIONS[cmd]:
        val = getattr(args, name)
        if val is not None:
            cfg[name] = val
    if model is not None:
        cfg["model"] = model
    cfg["command"] = cmd
    return cfg


# -- manifests --------------------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(paths) -> str:
    """Digest over the contents of many files, in sorted path order."""
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode())
        h.update(file_digest(p).encode())
    return h.hexdigest()


def write_manifest(cfg: dict, inputs: dict, outputs: list, out_dir: Path) -> Path:
    manifest = {
        "manifest_version": 1,
        "command": cfg["command"],
        "config": {k: v for k, v in cfg.items() if k != "command"},
        "seed": cfg["seed"],
        "tool_version": __version__,
        "inputs": inputs,
        "outputs": {str(Path(p).relative_to(out_dir)) if Path(p).is_relative_to(out_dir) else str(p):
                    file_digest(p) for p in outputs},
    }
    path = out_dir / f"{cfg['command']}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- helpers -----------------------------------------------------------------------------


def _require(cfg, *names):
    missing = [_flag(n) for n in names if cfg.get(n) in (None, "", [])]
    if missing:
        raise UsageError(f"{cfg['command']}: missing required option(s) {', '.join(missing)}")


def _split_ids(text: str) -> list[str]:
    return [s for s in str(text).split(",") if s]


def _model_config(cfg):
    from .model import ModelConfig

    return ModelConfig.from_dict(cfg["model"]) if cfg.get("model") else ModelConfig()


def _load_train_data(cfg):
    from .kitti import DEFAULT_TRAIN, load_sequence

    ids = _split_ids(cfg["train"]) if cfg.get("train") else list(DEFAULT_TRAIN)
    return [load_sequence(cfg["data"], s, max_frames=cfg.get("max_frames")) for s in ids], ids


def _load_checkpoint(path, what="checkpoint"):
    from .model import Checkpoint

    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return Checkpoint.load(p)


def _dataset_inputs(root, ids) -> dict:
    root = Path(root)
    out = {}
    for s in ids:
        pose = root / "poses" / f"{s}.txt"
        if pose.is_file():
            out[str(pose)] = file_digest(pose)
        for sub in ("encoded", "velodyne", "raw"):
            for base in (root / "sequences" / s, root / s):
                files = sorted((base / sub).glob("*")) if (base / sub).is_dir() else []
                if files:
                    out[str(base / sub)] = tree_digest(files)
    return out


# -- commands -------------------------------------------------------------------------------


def cmd_synth(cfg, out: Path):
    import numpy as np

    from .kitti import save_sequence
    from .synth import ScannerSpec, TrajectorySpec, WorldConfig, generate_sequence, generate_world

    if cfg["frames"] < 2:
        raise UsageError("synth: --frames must be at least 2")
    if cfg["sequences"] < 1:
        raise UsageError("synth: --sequences must be at least 1")
    if cfg["preset"] not in ("line", "circle", "random-walk"):
        raise UsageError(f"synth: unknown preset {cfg['preset']!r}")
    side = float(cfg["arena"])
    wcfg = WorldConfig(width=side, height=side, density=cfg["density"])
    spec = ScannerSpec(max_range=cfg["max_range"], noise_std=cfg["noise"], dropout=cfg["dropout"])
    outputs = []
    base_id = cfg["seq_id"]
    width = len(base_id)
    for k in range(cfg["sequences"]):
        seq_id = f"{int(base_id) + k:0{width}d}" if base_id.isdigit() else (base_id if k == 0 else f"{base_id}_{k}")
        sub_seed = [int(cfg["seed"]), k]
        traj_seed, world_seed, noise_seed = (int(x) for x in np.random.SeedSequence(sub_seed).generate_state(3))
        n = cfg["frames"]
        if cfg["preset"] == "circle":
            traj = TrajectorySpec.circle(n, cfg["radius"], cfg["step"], center=(side / 2, side / 2))
        elif cfg["preset"] == "line":
            margin = 5.0
            if (n - 1) * cfg["step"] > side - 2 * margin:
                raise UsageError(f"synth: a {(n - 1) * cfg['step']:.1f} m line does not fit a {side:.0f} m arena; raise --arena")
            from .geometry import Pose2D

            traj = TrajectorySpec.line(n, cfg["step"], Pose2D(side / 2, margin, 0.0))
        else:
            traj = TrajectorySpec.random_walk(n, traj_seed, (0.0, 0.0, side, side))
        path = np.array([[p.x, p.y] for p in traj.poses()])
        world = generate_world(world_seed, wcfg, keep_clear=path)
        try:
            seq = generate_sequence(world, traj, spec, seed=noise_seed, seq_id=seq_id)
        except ValueError as exc:
            raise UsageError(f"synth: {exc}; raise --arena or shorten the trajectory") from exc
        sdir = save_sequence(seq, out)
        wdir = out / "worlds"
        wdir.mkdir(exist_ok=True)
        wfile = wdir / f"{seq_id}.json"
        wfile.write_text(json.dumps({"seed": world_seed, "bounds": list(world.bounds),
                                     "segments": world.segments.tolist()}) + "\n")
        outputs += sorted(sdir.rglob("*.*")) + [out / "poses" / f"{seq_id}.txt", wfile]
        print(f"sequence {seq_id}: {n} frames, preset {cfg['preset']}")
    return {}, outputs


def cmd_ingest_kitti(cfg, out: Path):
    from .encoding import EncoderConfig
    from .kitti import LayerSelector, load_sequence, save_sequence

    _require(cfg, "root")
    lo, hi = (float(v) for v in str(cfg["band"]).split(","))
    sel = LayerSelector(band=(lo, hi))
    ids = _split_ids(cfg["sequences_list"])
    outputs = []
    for s in ids:
        seq = load_sequence(cfg["root"], s, EncoderConfig(cfg["max_range"]), sel, max_frames=cfg["max_frames"])
        sdir = save_sequence(seq, out)
        outputs += sorted(sdir.rglob("*.scan")) + [out / "poses" / f"{s}.txt"]
        print(f"sequence {s}: {len(seq)} frames")
    inputs = {}
    root = Path(cfg["root"])
    for s in ids:
        pose = root / "poses" / f"{s}.txt"
        if pose.is_file():
            inputs[str(pose)] = file_digest(pose)
    return inputs, outputs


def _check_model_digest(cfg, ckpt_cfg_digest: str, what: str):
    if cfg.get("model"):
        want = _model_config(cfg).digest()
        if want != ckpt_cfg_digest:
            raise ConfigMismatch(f"{what} config digest {ckpt_cfg_digest} does not match configured model {want}")


def cmd_train_cnn(cfg, out: Path):
    from .model import CheckpointError
    from .training import LossConfig, TrainConfig, train_cnn

    _require(cfg, "data")
    data, ids = _load_train_data(cfg)
    model_cfg = _model_config(cfg)
    lcfg = LossConfig(beta=cfg["beta"], regression_form=cfg["regression_form"], stage=cfg["stage"])
    tcfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
                       checkpoint_every=cfg["checkpoint_every"])
    resume = None
    if cfg.get("resume"):
        resume = _load_checkpoint(cfg["resume"], "resume checkpoint")
        if resume.digest != model_cfg.digest():
            raise ConfigMismatch(f"resume checkpoint digest {resume.digest} != configured model {model_cfg.digest()}")
    log_path = out / "train_cnn.log.jsonl"
    try:
        ckpt, hist = train_cnn(data, lcfg, tcfg, model_cfg, resume=resume, log_path=log_path, checkpoint_dir=out,
                               strict=model_cfg == type(model_cfg)())
    except CheckpointError as exc:
        raise ConfigMismatch(str(exc)) from exc
    path = out / "cnn.ckpt"
    ckpt.save(path)
    if hist:
        print(f"epoch {hist[-1]['epoch']}: loss {hist[-1]['loss']:.5f} accuracy {hist[-1]['accuracy']:.4f}")
    print(f"checkpoint {path} (config {ckpt.digest})")
    inputs = _dataset_inputs(cfg["data"], ids)
    if cfg.get("resume"):
        inputs[cfg["resume"]] = file_digest(cfg["resume"])
    return inputs, [path, log_path]


def cmd_train_rcnn(cfg, out: Path):
    from .model import CheckpointError
    from .training import LossConfig, TrainConfig, train_rcnn

    _require(cfg, "cnn_ckpt", "data")
    cnn = _load_checkpoint(cfg["cnn_ckpt"], "CNN checkpoint")
    _check_model_digest(cfg, cnn.digest, "CNN checkpoint")
    data, ids = _load_train_data(cfg)
    lcfg = LossConfig(beta=cfg["beta"], regression_form=cfg["regression_form"], stage="rcnn-regression")
    tcfg = TrainConfig(lr=cfg["lr"], window=cfg["window"], windows_per_batch=cfg["windows_per_batch"],
                       epochs=cfg["epochs"], seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
                       finetune_cnn=bool(cfg["finetune_cnn"]))
    resume = _load_checkpoint(cfg["resume"], "resume checkpoint") if cfg.get("resume") else None
    log_path = out / "train_rcnn.log.jsonl"
    try:
        ckpt, hist = train_rcnn(data, cnn, lcfg, tcfg, resume=resume, log_path=log_path, checkpoint_dir=out)
    except CheckpointError as exc:
        raise ConfigMismatch(str(exc)) from exc
    path = out / "rcnn.ckpt"
    ckpt.save(path)
    if hist:
        h = hist[-1]
        print(f"epoch {h['epoch']}: loss {h['loss']:.5f} |dd| {h['mean_abs_err_d']:.4f} m "
              f"|dth| {h['mean_abs_err_theta']:.5f} rad")
    print(f"checkpoint {path} (config {ckpt.digest})")
    inputs = _dataset_inputs(cfg["data"], ids)
    inputs[cfg["cnn_ckpt"]] = file_digest(cfg["cnn_ckpt"])
    return inputs, [path, log_path]


def cmd_infer(cfg, out: Path):
    from .kitti import load_sequence
    from .odometry import IntegrationMode, Trajectory, run_inference, write_deltas, write_trajectory

    _require(cfg, "ckpt", "data", "seq")
    mode = IntegrationMode(cfg["mode"])
    ckpt = _load_checkpoint(cfg["ckpt"])
    _check_model_digest(cfg, ckpt.digest, "checkpoint")
    seq = load_sequence(cfg["data"], cfg["seq"], keep_raw=True, max_frames=cfg.get("max_frames"))
    traj, deltas, timing = run_inference(seq, ckpt, mode)
    est_path, sidecar = write_trajectory(traj, out / f"{seq.id}_est.csv", mode, ckpt.digest, timing)
    gt_path = Trajectory.from_ground_truth(seq).write_csv(out / f"{seq.id}_gt.csv")
    outputs = [est_path, sidecar, gt_path]
    if cfg["emit_deltas"]:
        outputs.append(write_deltas(deltas, out / f"{seq.id}_deltas.csv"))
    print(f"mean time {timing.mean:.3f} s/frame (p95 {timing.p95:.3f}) over {len(deltas)} frames, mode {mode.value}")
    inputs = _dataset_inputs(cfg["data"], [seq.id])
    inputs[cfg["ckpt"]] = file_digest(cfg["ckpt"])
    return inputs, outputs


def cmd_icp(cfg, out: Path):
    import warnings

    from .icp import IcpConfig, icp_sequence
    from .kitti import load_sequence
    from .odometry import IntegrationMode, Provenance, Trajectory, integrate, write_deltas, write_trajectory

    _require(cfg, "data", "seq")
    icfg = IcpConfig(cfg["max_iterations"], cfg["max_correspondence"], cfg["tolerance"], cfg["trim"])
    seq = load_sequence(cfg["data"], cfg["seq"], keep_raw=True, max_frames=cfg.get("max_frames"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        deltas, results, timing = icp_sequence(seq, icfg)
    for w in caught:
        log.warning("%s", w.message)
    traj = integrate(deltas, provenance=Provenance.ICP)
    est_path, sidecar = write_trajectory(traj, out / f"{seq.id}_icp.csv", IntegrationMode.HEADING_ACCUMULATING,
                                         None, timing)
    gt_path = Trajectory.from_ground_truth(seq).write_csv(out / f"{seq.id}_gt.csv")
    dpath = write_deltas(deltas, out / f"{seq.id}_icp_deltas.csv")
    bad = sum(not r.converged for r in results)
    print(f"ICP: {len(deltas)} pairs, {bad} not converged, mean time {timing.mean:.3f} s/frame")
    return _dataset_inputs(cfg["data"], [seq.id]), [est_path, sidecar, gt_path, dpath]


def _relative_deltas(traj):
    from .geometry import relative_motion_2d

    return [relative_motion_2d(a, b) for a, b in zip(traj.poses, traj.poses[1:])]


def cmd_eval(cfg, out: Path):
    from .evaluation import DriftReport, compare_methods, drift_score, frame_errors
    from .odometry import Trajectory

    ests = cfg.get("est") or []
    if not ests and not cfg.get("reports"):
        raise UsageError("eval: give at least one --est LABEL=PATH or --reports FILE")
    if ests:
        _require(cfg, "gt")
    gt = Trajectory.read_csv(cfg["gt"]) if ests else None
    reports, outputs, inputs = [], [], {}
    if gt is not None:
        inputs[cfg["gt"]] = file_digest(cfg["gt"])
    for item in ests:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        est = Trajectory.read_csv(path)
        inputs[path] = file_digest(path)
        rep = drift_score(gt, est, cfg["seq_id"], label)
        sidecar = Path(path).with_suffix(".json")
        if sidecar.is_file():
            timing = json.loads(sidecar.read_text()).get("timing") or {}
            rep.s_per_frame = timing.get("mean_s_per_frame")
        stats = frame_errors(_relative_deltas(est), _relative_deltas(gt))
        stem = f"{cfg['seq_id'] or 'seq'}_{label}"
        rj = out / f"drift_{stem}.json"
        rj.write_text(rep.to_json() + "\n")
        rc = out / f"drift_{stem}.csv"
        rc.write_text(rep.to_csv())
        fe = stats.write_csv(out / f"frame_errors_{stem}.csv")
        fs = out / f"frame_errors_{stem}.json"
        fs.write_text(json.dumps(stats.summary(), indent=2, sort_keys=True) + "\n")
        outputs += [rj, rc, fe, fs]
        reports.append(rep)
        mean = "n/a (trajectory shorter than 100 m)" if rep.mean is None else f"{rep.mean:.4f}"
        print(f"{label}: mean drift {mean}; mean |rot err| {stats.mean_rot_deg:.4f} deg, "
              f"mean |trans err| {stats.mean_trans_m:.4f} m")
    for path in cfg.get("reports") or []:
        obj = json.loads(Path(path).read_text())
        inputs[path] = file_digest(path)
        lengths = {int(k): v for k, v in obj["lengths"].items()}
        reports.append(DriftReport(obj["sequence_id"], obj["method"], {k: v["drift"] for k, v in lengths.items()},
                                   {k: v["subsequences"] for k, v in lengths.items()},
                                   {k: v["rot_rad_per_m"] for k, v in lengths.items()}, obj["mean_drift"],
                                   obj.get("mean_rot_drift_rad_per_m"), obj.get("s_per_frame")))
    if cfg["compare"] or cfg["paper_baselines"]:
        table = compare_methods(reports, include_reference=bool(cfg["paper_baselines"]))
        (out / "comparison.csv").write_text(table.to_csv())
        (out / "comparison.txt").write_text(table.to_text())
        outputs += [out / "comparison.csv", out / "comparison.txt"]
        print(table.to_text(), end="")
    return inputs, outputs


def cmd_gradcheck(cfg, out: Path):
    from .training import Stage, gradient_check

    stages = list(Stage) if cfg["stage"] == "all" else [Stage(cfg["stage"])]
    results, ok = {}, True
    for st in stages:
        rep = gradient_check(st, seed=cfg["seed"], regression_form=cfg["regression_form"], eps=cfg["eps"])
        passed = rep.passed(cfg["tolerance"])
        ok &= passed
        results[rep.stage] = {"max_rel_error": rep.max_rel_error, "passed": passed, "per_param": rep.per_param}
        print(f"{rep.stage}: max relative error {rep.max_rel_error:.2e} {'PASS' if passed else 'FAIL'}")
    path = out / "gradcheck.json"
    path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    if not ok:
        raise GradientCheckFailed("gradient check above tolerance")
    return {}, [path]


class GradientCheckFailed(Exception):
    pass


COMMANDS = {
    "synth": cmd_synth,
    "ingest-kitti": cmd_ingest_kitti,
    "train-cnn": cmd_train_cnn,
    "train-rcnn": cmd_train_rcnn,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "icp": cmd_icp,
    "gradcheck": cmd_gradcheck,
}


def _limit_threads(workers: int) -> None:
    # only effective before numpy is first imported
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(workers)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _limit_threads(int(cfg["workers"]))
        out = Path(cfg["out"])
        try:
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".write_probe"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise UsageError(f"output directory {out} is not writable: {exc}") from exc
        inputs, outputs = COMMANDS[cfg["command"]](cfg, out)
        write_manifest(cfg, inputs, outputs, out)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigMismatch as exc:
        print(f"config mismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        return _classify(exc)


def _classify(exc: Exception) -> int:
    from .evaluation import AlignmentError
    from .kitti import DatasetError
    from .model import CheckpointError, ConfigError

    if isinstance(exc, AlignmentError):
        print(f"misaligned data: {exc}", file=sys.stderr)
        return EXIT_ALIGN
    if isinstance(exc, (CheckpointError, ConfigError)):
        print(f"config mismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if isinstance(exc, (OSError, DatasetError)):
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if isinstance(exc, GradientCheckFailed):
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    traceback.print_exc()
    return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
