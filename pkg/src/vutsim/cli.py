"""Command-line entry point: ``vutsim {synth,train,eval,simulate,sweep,gradcheck}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Errors are printed to stderr as single lines starting with ``error:``.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ABLATIONS, EngineConfig, config_from_dict, load_config
from .cost import (DEFAULT_PRIOR, FeatureError, FitError, ParameterError, PlanningError,
                   load_distribution, load_key, sample_key, save_distribution, save_key)
from .numeric import CheckpointError, NumericError, ParamStore, config_hash, grad_check
from .scenario import ConfigError, ScenarioParseError, ScenarioValidationError, load_scenario, save_scenario, \
    slice_frames
from .sim import RolloutError, diversity_sweep, export_trace, rollout
from .synth import KINDS, SynthParams, generate_synthetic_scenario

VALIDATION_ERRORS = (ConfigError, ScenarioParseError, ScenarioValidationError, ParameterError, CheckpointError,
                     FeatureError, FitError, ValueError, KeyError)
RUNTIME_ERRORS = (NumericError, RolloutError, PlanningError, RuntimeError, OSError, FloatingPointError)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _manifest(cfg: EngineConfig, **extra) -> dict:
    d = {"vutsim_version": __version__, "python": platform.python_version(), "torch": torch.__version__,
         "numpy": np.__version__, "config_hash": config_hash(cfg.to_dict()), "seed": cfg.seed}
    d.update(extra)
    return d


def _scenario_ref(path) -> dict:
    p = Path(path)
    return {"scenario": p.name, "scenario_sha256": hashlib.sha256(p.read_bytes()).hexdigest()}


def _config(args) -> EngineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else config_from_dict(None)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _scenario_files(data_dir) -> list[Path]:
    d = Path(data_dir)
    if not d.is_dir():
        raise NotADirectoryError(f"{d}: not a directory")
    files = sorted(p for p in d.glob("*.json") if p.name != "manifest.json")
    if not files:
        raise FileNotFoundError(f"{d}: no scenario files")
    return files


def _load_frames(data_dir):
    frames = []
    for p in _scenario_files(data_dir):
        frames.extend(slice_frames(load_scenario(p)))
    if not frames:
        raise ValueError(f"{data_dir}: scenarios too short to yield any 70-step frame")
    return frames


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    if args.count < 0:
        raise ValueError("--count must be >= 0")
    params = SynthParams(duration_steps=args.duration)
    params.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(args.count):
        seed = args.seed + i
        sc = generate_synthetic_scenario(args.kind, seed, params)
        name = f"{args.kind}_{i:04d}.json"
        save_scenario(sc, out / name)
        files.append({"file": name, "seed": seed})
    _write_json(out / "manifest.json", {"kind": args.kind, "count": args.count, "base_seed": args.seed,
                                        "duration_steps": args.duration, "scenarios": files,
                                        "vutsim_version": __version__})
    print(f"wrote {args.count} scenarios to {out}")
    return 0


def cmd_train(args) -> int:
    from .training import save_training_checkpoint, train

    cfg = _config(args)
    tcfg = cfg.training
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.ablation is not None:
        overrides["ablation"] = args.ablation
    if args.seed is not None:
        overrides["seed"] = args.seed
    tcfg = dataclasses.replace(tcfg, **overrides)
    tcfg.validate()
    frames = _load_frames(args.data)
    result = train(frames, tcfg, cfg.model, cfg.planner)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_training_checkpoint(result, out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    log_path.write_text(result.log_text())
    save_distribution(result.distribution, out.with_suffix(".dist.json"))
    _write_json(out.with_suffix(".manifest.json"),
                _manifest(dataclasses.replace(cfg, training=tcfg), command="train", frames=len(frames),
                          checkpoint=out.name, log=log_path.name))
    last = result.log[-1][1] if result.log else float("nan")
    print(f"trained {tcfg.steps} steps on {len(frames)} frames ({tcfg.ablation}); final loss {last:.6g}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate_ade_fde, load_training_checkpoint

    ck = load_training_checkpoint(args.checkpoint, dtype=torch.float32)
    frames = _load_frames(args.data)
    m = evaluate_ade_fde(ck.model, frames)
    text = json.dumps(m.report(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"frames={m.n_frames} agents={m.n_agents}", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    from .training import load_training_checkpoint

    cfg = _config(args)
    if not Path(args.key).is_file():
        raise FileNotFoundError(f"{args.key}: key file not found")
    key = load_key(args.key)
    ck = load_training_checkpoint(args.checkpoint)
    scenario = load_scenario(args.scenario)
    trace = rollout(scenario, ck, key, args.duration, cfg.seed, cfg.sim, replay=args.replay)
    manifest = _manifest(cfg, command="simulate", **_scenario_ref(args.scenario))
    paths = export_trace(trace, args.out, scenario, manifest)
    print(f"wrote {paths['trace']}")
    return 0


def cmd_sweep(args) -> int:
    from .training import load_training_checkpoint

    cfg = _config(args)
    ck = load_training_checkpoint(args.checkpoint)
    scenario = load_scenario(args.scenario)
    if args.keys:
        keys = [load_key(p) for p in args.keys]
    else:
        dist = load_distribution(args.dist) if args.dist else ck.distribution
        if args.n_keys is None:
            raise ValueError("give --keys or --n-keys")
        keys = [sample_key(dist, cfg.seed + i) for i in range(args.n_keys)]
    if len(keys) < 2:
        raise ValueError("a sweep needs at least 2 keys")
    report, traces = diversity_sweep(scenario, ck, keys, args.duration, cfg.seed, cfg.sim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_text())
    for i, (k, tr) in enumerate(zip(keys, traces)):
        save_key(k, out / f"key_{i}.txt")
        export_trace(tr, out / f"rollout_{i}", scenario)
    _write_json(out / "manifest.json", _manifest(cfg, command="sweep", **_scenario_ref(args.scenario),
                                                 checkpoint_id=ck.checkpoint_id, n_keys=len(keys)))
    print(f"wrote {out / 'report.json'}")
    return 0


def gradcheck_setup(cfg: EngineConfig):
    """One synthetic intersection frame, float64 model, all four loss terms active."""
    from .model import build_model
    from .training import composite_loss, prepare_examples, refresh_plans

    scenario = generate_synthetic_scenario("intersection", cfg.seed)
    frame = slice_frames(scenario)[0]
    examples = prepare_examples([frame], cfg.model, cfg.planner)
    refresh_plans(examples, DEFAULT_PRIOR.mean_key(), cfg.planner)
    model = build_model(dataclasses.replace(cfg.model, no_augment=cfg.training.ablation == "no_augment"),
                        seed=cfg.seed, dtype=torch.float64)
    key = DEFAULT_PRIOR.mean_key()
    return model, (lambda: composite_loss(model, examples, key, cfg.training))


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    model, fn = gradcheck_setup(cfg)
    if not args.epsilon > 0:
        raise ValueError("--epsilon must be > 0")
    report = grad_check(fn, ParamStore(model), epsilon=args.epsilon, tolerance=args.tolerance,
                        n_sample=args.samples, seed=cfg.seed)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if not report.ok:
        print(f"error: gradient check failed for {sum(not v for v in report.passed.values())} parameters",
              file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vutsim", description="VUT-conditioned background traffic inference and simulation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic scenarios")
    s.add_argument("--kind", choices=KINDS, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=int, default=200, help="steps at 10 Hz")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a directory of scenarios")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="training log path (default: <out>.log.csv)")
    s.add_argument("--steps", type=int)
    s.add_argument("--ablation", choices=ABLATIONS)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="ADE/FDE of a checkpoint on a directory of scenarios")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="closed-loop rollout under one key")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenario", required=True)
    s.add_argument("--key", required=True)
    s.add_argument("--duration", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--replay", action="store_true", help="inject the logged VUT future, single inference")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="rollouts under several keys and their divergence")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenario", required=True)
    s.add_argument("--dist", help="distribution file (default: the checkpoint's)")
    s.add_argument("--n-keys", type=int)
    s.add_argument("--keys", nargs="+", help="explicit key files")
    s.add_argument("--duration", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcheck", help="finite-difference check of the composite loss gradients")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--samples", type=int, default=256)
    s.add_argument("--epsilon", type=float, default=1e-5, help="central-difference step")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

if __name__ == "__main__":
    sys.exit(main())
