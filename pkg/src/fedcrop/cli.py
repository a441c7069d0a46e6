"""``fedcrop`` command line: run, compare, detect-train, recover."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import load_manifest
from .detector import save_detector
from .metrics import SummaryReport, compare_methods, emit_plots, write_summary
from .orchestrator import ExperimentConfig, PROFILES, run_experiment, seed_from_env, setup, train_detector
from .recovery import GeneratorConfig, infer_target_class, save_recovered

log = logging.getLogger("fedcrop")


def load_config(path, profile=None, seed=None, aggregator=None) -> ExperimentConfig:
    if path is not None:
        data = json.loads(Path(path).read_text())
    else:
        data = {}
    if profile is not None:
        data["profile"] = profile
    if aggregator is not None:
        data["aggregator"] = aggregator
    cfg = ExperimentConfig.from_dict(data)
    cfg = seed_from_env(cfg)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _load_images(directory) -> np.ndarray:
    directory = Path(directory)
    if (directory / "manifest.json").exists():
        return load_manifest(directory).x
    files = sorted(directory.glob("*.npy"))
    if not files:
        raise FileNotFoundError(f"no manifest.json or .npy images in {directory}")
    arrays = [np.load(f) for f in files]
    x = np.concatenate([a if a.ndim == 4 else a[None] for a in arrays]).astype(np.float32)
    return x / 255.0 if x.max() > 1.0 else x


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.profile, args.seed, args.aggregator)
    out = Path(args.out)
    reports = run_experiment(cfg, out)
    summary = SummaryReport.from_reports(cfg.aggregator, reports)
    write_summary([summary], out / "summary.csv")
    emit_plots({cfg.aggregator: reports}, out)
    print(json.dumps(asdict(summary)))
    return 0


def cmd_compare(args) -> int:
    configs = [load_config(p, seed=args.seed) for p in args.configs]
    names = [Path(p).stem for p in args.configs]
    if len(set(names)) != len(names):
        names = None
    summaries, _ = compare_methods(configs, args.out, names)
    for s in summaries:
        print(json.dumps(asdict(s)))
    return 0 if all(s.status == "ok" for s in summaries) else 1


def cmd_detect_train(args) -> int:
    cfg = load_config(args.config, args.profile, args.seed, "gancrop")
    out = Path(args.out or cfg.detector_path or "detector.fcrop")
    state = setup(cfg.replace(aggregator="fedavg"))
    mod = train_detector(cfg, state.public_set, state.initial)
    save_detector(out, mod)
    print(json.dumps({"detector": str(out), "train_accuracy": mod.train_accuracy}))
    return 0


def cmd_recover(args) -> int:
    suspect, _ = load_checkpoint(args.model)
    if suspect.spec is None:
        print("checkpoint carries no model spec", file=sys.stderr)
        return 2
    probes = _load_images(args.images)[: args.n_probe]
    target = "search" if args.target is None else args.target
    cfg = GeneratorConfig(target_class=target, seed=args.seed, steps=args.steps, lambda_norm=args.lambda_norm)
    cls, rec = infer_target_class(suspect, probes, cfg)
    save_recovered(args.out, rec)
    print(json.dumps({"target_class": cls, "flip_rate": rec.flip_rate, "mean_norm": rec.mean_norm, "converged": rec.converged}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcrop", description="Federated backdoor attack/defense simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", help="JSON config (defaults to the desk profile)")
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--aggregator")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several configs and summarize")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--out", default="runs/compare")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("detect-train", help="train the detector and save it")
    p.add_argument("--config")
    p.add_argument("--out", help="detector checkpoint path")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.set_defaults(func=cmd_detect_train)

    p = sub.add_parser("recover", help="recover a trigger from a model checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True, help="directory with manifest.json or .npy images")
    p.add_argument("--out", required=True)
    p.add_argument("--target", type=int, help="fixed target class (default: search all classes)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=GeneratorConfig.steps)
    p.add_argument("--lambda-norm", type=float, default=GeneratorConfig.lambda_norm)
    p.add_argument("--n-probe", type=int, default=256)
    p.set_defaults(func=cmd_recover)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
