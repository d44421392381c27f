"""Command-line entry point.

Subcommands::

    pipeline build   GAN + real image dirs -> (GAN, simulated-real) pair dirs
    train attack     pair dirs -> attack checkpoint
    train remover    real image dir -> one-class remover checkpoint
    attack apply     image dir -> attacked image dir
    eval report      group dirs x attacks x detectors -> report.csv / report.md
    bench synthetic  the self-contained synthetic end-to-end run

Every command that writes outputs also writes run metadata (``run.json``
next to directory outputs, ``<checkpoint>.run.json`` for training) with the seed,
a hash of the effective configuration and library versions.  Exit status is
0 on success, 1 on an operational failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BASELINES
from .imageio import list_images, read_dir, read_image, write_image
from .kernels import DimensionError, FormatError, load_tensor
from .metrics import evaluate, render_report
from .net import attack_forward, load_params
from .oracle import ExternalDetector, ExternalDetectorConfig, OracleError
from .pipeline import PipelineConfig, PipelineError, build_training_set
from .synth import SyntheticDetector
from .train import TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train_attack, train_remover

log = logging.getLogger("ganattack")

OPERATIONAL_ERRORS = (OSError, FormatError, DimensionError, OracleError, PipelineError,
                      TrainingDiverged, ValueError, KeyError)


class UsageError(Exception):
    pass


# --- helpers ----------------------------------------------------------------

def _read_json(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def versions() -> dict:
    import scipy

    return {"ganattack": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_run_metadata(path, command: str, cfg: dict, seed=None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"command": command, "seed": seed, "config": cfg, "config_sha256": config_hash(cfg),
            "versions": versions()}
    meta.update(extra or {})
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return path


def load_detector(path):
    """Detector from a JSON file.

    ``{"command": [...], "timeout": 30, "batch": true}`` launches an external
    process; ``{"type": "synthetic", "pattern": "fp.tns", "alpha": a, "beta": b}``
    rebuilds the matched-filter oracle (pattern path relative to the JSON).
    """
    cfg = _read_json(path)
    kind = cfg.pop("type", "external")
    name = cfg.pop("name", None)
    if kind == "synthetic":
        pattern = load_tensor(Path(path).parent / cfg["pattern"])
        return name or "synthetic", SyntheticDetector(pattern, float(cfg["alpha"]), float(cfg["beta"]))
    if kind != "external":
        raise ValueError(f"unknown detector type {kind!r}")
    det = ExternalDetector(ExternalDetectorConfig.from_dict(cfg), name=name)
    return det.name, det


def _train_config(args) -> TrainConfig:
    data = _read_json(args.config)
    data = data.get("train", data)
    if args.seed is not None:
        data["seed"] = args.seed
    for flag in ("epochs", "batch_size"):
        if getattr(args, flag, None) is not None:
            data[flag] = getattr(args, flag)
    return TrainConfig.from_dict(data)


def _save_images(out_dir, names, images) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in zip(names, images):
        write_image(img, out / name)


def _attack_fn(method: str, checkpoint):
    if method == "model":
        if checkpoint is None:
            raise UsageError("--method model needs --checkpoint")
        params = load_params(checkpoint)
        return lambda x: np.clip(attack_forward(params, x), 0.0, 1.0)
    return BASELINES[method]


# --- subcommands ------------------------------------------------------------

def cmd_pipeline_build(args) -> int:
    names, gan = read_dir(args.gan, args.size)
    real = read_dir(args.real, args.size)[1] if args.real else None
    det_name, det = load_detector(args.detector)
    cfg = _read_json(args.config)
    pcfg = PipelineConfig(**cfg.get("pipeline", {}))
    tcfg = TrainConfig.from_dict(cfg.get("train", {}))
    remover = load_params(args.remover) if args.remover else None
    pairs, manifest, remover = build_training_set(gan, real, det, pcfg, tcfg, remover=remover)
    out = Path(args.out)
    pair_names = [names[p.index] for p in pairs]
    _save_images(out / "gan", pair_names, [p.gan for p in pairs])
    _save_images(out / "simulated_real", pair_names, [p.simulated_real for p in pairs])
    (out / "manifest.json").write_text(manifest.to_json() + "\n")
    if not args.remover:
        save_checkpoint(remover, None, out / "remover.ckpt")
    write_run_metadata(out / "run.json", "pipeline build", {"pipeline": vars(pcfg), "train": tcfg.to_dict(),
                                                "detector": det_name}, tcfg.seed)
    print(f"{manifest.stage3_out} pairs written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    params = state = None
    if args.resume:
        params, state = load_checkpoint(args.resume)
    if args.what == "attack":
        names, gan = read_dir(Path(args.pairs) / "gan", args.size)
        sim_names, sim = read_dir(Path(args.pairs) / "simulated_real", args.size)
        if names != sim_names:
            raise FormatError("gan/ and simulated_real/ hold different file names")
        params, state, hist = train_attack(gan, sim, cfg, params=params, state=state,
                                           max_steps=args.max_steps, checkpoint_path=args.out)
    else:
        _, real = read_dir(args.real, args.size)
        params, state, hist = train_remover(real, cfg, params=params, state=state,
                                            max_steps=args.max_steps, checkpoint_path=args.out)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, state, out)
    write_run_metadata(out.with_name(out.name + ".run.json"), f"train {args.what}", cfg.to_dict(), cfg.seed,
                       {"steps": state.t, "final_loss": hist[-1] if hist else None})
    print(f"{args.what} checkpoint written to {out} after {state.t} steps")
    return 0


def cmd_attack_apply(args) -> int:
    fn = _attack_fn(args.method, args.checkpoint)
    paths = list_images(args.inp)
    if not paths:
        raise FileNotFoundError(f"no .ppm/.png images in {args.inp}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        img = read_image(p, args.size)
        write_image(np.clip(fn(img), 0.0, 1.0), out / p.name)
    write_run_metadata(out / "run.json", "attack apply", {"method": args.method, "checkpoint": args.checkpoint,
                                             "size": args.size})
    print(f"{len(paths)} images written to {out}")
    return 0


def cmd_eval_report(args) -> int:
    root = Path(args.groups)
    groups = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if list_images(d):
            groups[d.name] = read_dir(d, args.size)[1]
    if not groups:
        raise FileNotFoundError(f"no image sub-directories under {root}")
    detectors = [load_detector(p) for p in args.detector]
    attacks = [(m, _attack_fn(m, args.checkpoint)) for m in args.methods]
    report = evaluate(groups, attacks, detectors, tau=args.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(render_report(report, "csv"))
    (out / "report.md").write_text(render_report(report, "markdown"))
    write_run_metadata(out / "run.json", "eval report", {"methods": args.methods, "tau": args.tau,
                                            "detectors": [d for d, _ in detectors]})
    for _, det in detectors:
        if hasattr(det, "close"):
            det.close()
    print(f"report written to {out}")
    return 0


def cmd_bench_synthetic(args) -> int:
    from .bench import BenchConfig, run_benchmark, write_outputs

    cfg = BenchConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    result = run_benchmark(cfg)
    write_outputs(result, args.out)
    write_run_metadata(Path(args.out) / "run.json", "bench synthetic", cfg.to_dict(), cfg.seed,
                       {"elapsed_s": round(result.elapsed, 1), "checks": result.checks})
    print(render_report(result.report, "markdown"))
    failed = [k for k, ok in result.checks.items() if not ok]
    if failed:
        print("acceptance checks failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ganattack", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="group", required=True)

    pipe = sub.add_parser("pipeline").add_subparsers(dest="action", required=True)
    p = pipe.add_parser("build", help="build (GAN, simulated-real) training pairs")
    p.add_argument("--gan", required=True, help="directory of GAN images")
    p.add_argument("--real", help="directory of real images for the remover")
    p.add_argument("--detector", required=True, help="detector JSON")
    p.add_argument("--remover", help="existing remover checkpoint")
    p.add_argument("--config", help="JSON with optional 'pipeline' and 'train' sections")
    p.add_argument("--size", type=int, help="resize images to SIZE x SIZE on load")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pipeline_build)

    train = sub.add_parser("train").add_subparsers(dest="what", required=True)
    for what in ("attack", "remover"):
        t = train.add_parser(what, help=f"train the {what}")
        if what == "attack":
            t.add_argument("--pairs", required=True, help="output directory of 'pipeline build'")
        else:
            t.add_argument("--real", required=True, help="directory of real images")
        t.add_argument("--config", help="training JSON (TrainConfig fields)")
        t.add_argument("--seed", type=int)
        t.add_argument("--epochs", type=int)
        t.add_argument("--batch-size", dest="batch_size", type=int)
        t.add_argument("--max-steps", dest="max_steps", type=int)
        t.add_argument("--resume", help="checkpoint to continue from")
        t.add_argument("--size", type=int)
        t.add_argument("--out", required=True, help="checkpoint path")
        t.set_defaults(fn=cmd_train)

    methods = sorted(BASELINES) + ["model"]
    att = sub.add_parser("attack").add_subparsers(dest="action", required=True)
    a = att.add_parser("apply", help="attack every image in a directory")
    a.add_argument("--method", required=True, choices=methods)
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--checkpoint")
    a.add_argument("--size", type=int)
    a.set_defaults(fn=cmd_attack_apply)

    ev = sub.add_parser("eval").add_subparsers(dest="action", required=True)
    e = ev.add_parser("report", help="tabulate P_d / PSNR / SSIM")
    e.add_argument("--groups", required=True, help="directory with one sub-directory per image group")
    e.add_argument("--detector", required=True, action="append", help="detector JSON (repeatable)")
    e.add_argument("--methods", nargs="+", default=["gf3", "gf5", "mf3", "mf5"], choices=methods)
    e.add_argument("--checkpoint")
    e.add_argument("--tau", type=float, default=0.5)
    e.add_argument("--size", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval_report)

    bench = sub.add_parser("bench").add_subparsers(dest="action", required=True)
    b = bench.add_parser("synthetic", help="synthetic end-to-end benchmark")
    b.add_argument("--seed", type=int)
    b.add_argument("--config", help="JSON overriding benchmark settings")
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench_synthetic)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"ganattack: error: {exc}", file=sys.stderr)
        return 2
    except OPERATIONAL_ERRORS as exc:
        print(f"ganattack: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
