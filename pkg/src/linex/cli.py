"""``linex`` command line.

Exit codes: 0 on success, 2 for configuration or input errors, 3 when
training or extrapolation hits non-finite numbers.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

CONFIG_SECTIONS = ("model", "task", "grpo", "schedule", "io")
IO_DEFAULTS = {"out": None, "steps": 100, "ckpt_every": 20, "seed": 0, "run_id": "run"}


class ConfigError(Exception):
    pass


class NumericError(Exception):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------- config

def _load_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    try:
        if p.suffix == ".json":
            data = json.loads(text)
            # a run manifest carries the resolved config under "config"
            if "config" in data and isinstance(data["config"], dict):
                data = data["config"]
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # Python 3.10
                import tomli as tomllib
            data = tomllib.loads(text)
    except Exception as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from None
    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"{p}: unknown sections {unknown}; expected {list(CONFIG_SECTIONS)}")
    return data


def _build(cls, section: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    extra = sorted(set(section) - allowed)
    if extra:
        raise ConfigError(f"[{name}] unknown keys {extra}; allowed: {sorted(allowed)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def resolve_train_config(args) -> dict:
    """Merge defaults, the config file and command-line overrides."""
    from .grpo import GrpoConfig
    from .policy import ModelConfig
    from .tasks import TaskSpec
    from .trainer import ScheduleSpec

    raw = _load_config_file(args.config) if args.config else {}
    for s in CONFIG_SECTIONS:
        if s in raw and not isinstance(raw[s], dict):
            raise ConfigError(f"[{s}] must be a table")
    io = dict(IO_DEFAULTS)
    extra = sorted(set(raw.get("io", {})) - set(IO_DEFAULTS))
    if extra:
        raise ConfigError(f"[io] unknown keys {extra}; allowed: {sorted(IO_DEFAULTS)}")
    io.update(raw.get("io", {}))
    for flag, key in (("out", "out"), ("steps", "steps"), ("ckpt_every", "ckpt_every"), ("seed", "seed"),
                      ("run_id", "run_id")):
        v = getattr(args, flag, None)
        if v is not None:
            io[key] = v
    if io["out"] is None:
        raise ConfigError("no output directory: pass --out or set [io] out")

    sched = dict(raw.get("schedule", {}))
    if args.schedule:
        try:
            parsed = ScheduleSpec.parse(args.schedule)
        except ValueError as exc:
            raise ConfigError(f"--schedule: {exc}") from None
        sched.update(m=parsed.m, n=parsed.n, beta=parsed.beta)
    for flag in ("anchor", "adam"):
        if getattr(args, flag, None):
            sched[flag] = getattr(args, flag)

    model_sec = dict(raw.get("model", {}))
    model_sec.setdefault("seed", int(io["seed"]))
    model = _build(ModelConfig, model_sec, "model")
    task_sec = dict(raw.get("task", {}))
    task_sec.setdefault("vocab_size", model.vocab_size)
    task = _build(TaskSpec, task_sec, "task")
    grpo = _build(GrpoConfig, dict(raw.get("grpo", {})), "grpo")
    schedule = _build(ScheduleSpec, sched, "schedule")
    for key in ("steps", "ckpt_every", "seed"):
        if not isinstance(io[key], int) or io[key] < (1 if key == "ckpt_every" else 0):
            raise ConfigError(f"[io] {key} must be a non-negative integer (ckpt_every >= 1), got {io[key]!r}")
    return {"model": model.to_dict(), "task": task.to_dict(), "grpo": grpo.to_dict(),
            "schedule": schedule.to_dict(), "io": io}


# ---------------------------------------------------------------- manifest

def write_run_manifest(out_dir, command: str, config: dict, seeds: dict, inputs, outputs, started: float) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run_manifest.json"
    path.write_text(json.dumps({
        "command": command,
        "config": config,
        "seeds": seeds,
        "tool_version": __version__,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.time() - started, 3),
    }, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, float)):
        return None if not np.isfinite(o) else float(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _clean(obj):
    """Replace non-finite floats with None so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _load_traj(path):
    from .tensor_store import load_trajectory
    if not Path(path).exists():
        raise ConfigError(f"trajectory not found: {path}")
    return load_trajectory(path)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .grpo import GrpoConfig, NumericFailure
    from .policy import ModelConfig, PolicyModel
    from .tasks import TaskSpec
    from .trainer import ScheduleSpec, gradient_stability_report, train

    started = time.time()
    cfg = resolve_train_config(args)
    io = cfg["io"]
    out = Path(io["out"])
    model = PolicyModel.init(ModelConfig.from_dict(cfg["model"]))
    schedule = ScheduleSpec(**cfg["schedule"])
    try:
        res = train(model, TaskSpec.from_dict(cfg["task"]), GrpoConfig.from_dict(cfg["grpo"]), schedule,
                    io["steps"], io["ckpt_every"], seed=io["seed"], out_dir=out, run_id=io["run_id"])
    except NumericFailure as exc:
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "numeric_failure.json", {"error": str(exc), "diagnostics": exc.diagnostics})
        raise NumericError(str(exc), exc.diagnostics) from None
    outputs = [p for _, p in res.trajectory.entries] + [out / "metrics.csv", out / "trajectory.json"]
    try:
        gradient_stability_report(res.log, out / "gradient_stability.csv")
        outputs.append(out / "gradient_stability.csv")
    except ValueError:
        pass
    n_grad = res.log.grad_steps()
    print(f"trained {io['steps']} steps ({n_grad} GRAD, {io['steps'] - n_grad} EXTRA); "
          f"{len(res.trajectory)} checkpoints in {out}")
    write_run_manifest(out, "train", cfg, {"seed": io["seed"], "model_init": cfg["model"]["seed"]},
                       [args.config] if args.config else [], outputs, started)
    return EXIT_OK


def _analysis_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _probes_for(traj, args, config):
    from .analysis import Probe, generate_probes, task_of
    from .policy import PolicyModel

    src = getattr(args, "probes", None)
    if src and Path(src).is_file():
        data = json.loads(Path(src).read_text())
        try:
            return [Probe(np.array(p["tokens"], dtype=np.int64), int(p["prompt_len"])) for p in data["probes"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{src}: malformed probes file ({exc})") from None
    n = int(src) if src else args.n_probes
    model0 = PolicyModel.from_checkpoint(traj.path_at(traj.steps[0]), config)
    return generate_probes(model0, task_of(traj), n_prompts=n, per_prompt=args.per_prompt, seed=args.seed)


def _save_probes(path, probes) -> None:
    _dump_json(path, {"probes": [p.to_dict() for p in probes]})


def cmd_analyze(args) -> int:
    from .analysis import (SamplingPlan, analyze_activations, analyze_weights, categorize_tokens,
                           export_logprob_matrix, import_logprob_matrix, model_config_of, probe_logprobs)
    from .linfit import FilterPolicy

    started = time.time()
    out = _analysis_out(args)
    inputs, outputs = [], []
    conf = {"what": args.what, "seed": args.seed, "warmup_steps": args.warmup_steps}
    if args.what == "weights":
        traj = _load_traj(args.traj)
        inputs.append(args.traj)
        frac = 0.001 if args.sample_frac is None else args.sample_frac
        plan = SamplingPlan(frac, args.seed, per_tensor=not args.global_sample)
        policy = FilterPolicy(min_changes=args.min_changes, abs_change_floor=args.abs_change_floor)
        wa = analyze_weights(traj, plan, policy, args.warmup_steps)
        wa.write(out)
        summary = {"kind": "weights", **wa.summary(), "layers": wa.tensor_summary()}
        conf.update(sample_frac=frac, per_tensor=plan.per_tensor, min_changes=args.min_changes,
                    abs_change_floor=args.abs_change_floor)
        outputs += [out / "weight_fits.csv", out / "layer_summary.csv"]
        if wa.trivial:
            print("warning: only two checkpoints after warmup; every R^2 is 1 by construction", file=sys.stderr)
    elif args.what == "tokens":
        if args.import_path:
            matrix = import_logprob_matrix(args.import_path)
            inputs.append(args.import_path)
        else:
            if not args.traj:
                raise ConfigError("analyze tokens needs --traj or --import")
            traj = _load_traj(args.traj).after(args.warmup_steps)
            inputs.append(args.traj)
            config = model_config_of(traj)
            probes = _probes_for(traj, args, config)
            matrix = probe_logprobs(traj, probes, config)
            _save_probes(out / "probes.json", probes)
            export_logprob_matrix(matrix, out / "logprob_matrix.csv")
            outputs += [out / "probes.json", out / "logprob_matrix.csv"]
        fits = categorize_tokens(matrix, args.var_threshold, args.r2_threshold)
        fits.write(out / "token_fits.csv", matrix)
        outputs.append(out / "token_fits.csv")
        summary = {"kind": "tokens", "steps": matrix.steps, **fits.summary()}
        conf.update(var_threshold=args.var_threshold, r2_threshold=args.r2_threshold)
    else:
        traj = _load_traj(args.traj).after(args.warmup_steps)
        inputs.append(args.traj)
        config = model_config_of(traj)
        probes = _probes_for(traj, args, config)
        _save_probes(out / "probes.json", probes)
        frac = 1.0 if args.sample_frac is None else args.sample_frac
        taps = args.taps.split(",") if args.taps else None
        aa = analyze_activations(traj, probes, taps, SamplingPlan(frac, args.seed), config)
        aa.write(out)
        layers = aa.layer_summary()
        summary = {"kind": "activations", "steps": aa.steps, "layers": layers}
        if layers:
            summary["fraction_r2_gt_0.7"] = float(np.nanmean([r["fraction_r2_gt_0.7"] for r in layers
                                                              if r["fraction_r2_gt_0.7"] is not None] or [np.nan]))
        conf.update(sample_frac=frac, taps=taps)
        outputs += [out / "probes.json", out / "activation_fits.csv", out / "activation_layer_summary.csv"]
    _dump_json(out / "summary.json", _clean(summary))
    outputs.append(out / "summary.json")
    print(f"analyze {args.what}: wrote {len(outputs)} files to {out}")
    write_run_manifest(out, f"analyze {args.what}", conf, {"seed": args.seed}, inputs, outputs, started)
    return EXIT_OK


def _eval_kwargs(args) -> dict:
    return {"n_prompts": args.eval_prompts, "samples": args.eval_samples, "seed": args.eval_seed,
            "mode": args.eval_mode, "temperature": args.temperature, "top_p": args.top_p}


def cmd_extrapolate(args) -> int:
    from .analysis import task_of
    from .extrapolate import (ExtrapolationSpec, InterpolationWarning, compare_logit_extrapolation,
                              extrapolate_weights, sweep_weight_extrapolation)

    started = time.time()
    traj = _load_traj(args.traj)
    out = _analysis_out(args)
    for t in (args.t0, args.t1):
        if t not in traj.steps:
            raise ConfigError(f"step {t} is not in the trajectory (steps: {traj.steps})")
    if args.t1 <= args.t0:
        raise ConfigError("--t1 must be greater than --t0")
    conf = {"what": args.what, "t0": args.t0, "t1": args.t1}
    outputs = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", InterpolationWarning)
        if args.what == "weights":
            if args.target is not None and args.alpha is not None:
                raise ConfigError("pass at most one of --target or --alpha")
            if args.target is None and args.alpha is None and not args.grid:
                raise ConfigError("pass --target, --alpha or --grid")
            if args.target is not None or args.alpha is not None:
                spec = (ExtrapolationSpec(args.t0, args.t1, args.target) if args.target is not None
                        else ExtrapolationSpec.from_coefficient(args.t0, args.t1, args.alpha[0]))
                path = out / f"extrap_{int(round(spec.t_prime)):06d}.lnxt"
                try:
                    side = extrapolate_weights(traj, spec, path)
                except FloatingPointError as exc:
                    raise NumericError(str(exc)) from None
                outputs += [path, side]
                conf.update(t_prime=spec.t_prime, beta=spec.coefficient)
                print(f"wrote {path} (beta={spec.coefficient:g})")
            if args.grid:
                try:
                    grid = [float(g) for g in args.grid.split(",")]
                except ValueError:
                    raise ConfigError(f"--grid must be comma-separated numbers, got {args.grid!r}") from None
                sweep_weight_extrapolation(traj, args.t0, args.t1, grid, task_of(traj),
                                           eval_kwargs=_eval_kwargs(args), out_csv=out / "weight_sweep.csv")
                outputs.append(out / "weight_sweep.csv")
                conf.update(grid=grid, eval=_eval_kwargs(args))
                print(f"wrote {out / 'weight_sweep.csv'} ({len(set(grid))} points)")
        else:
            alphas = args.alpha if args.alpha is not None else (
                [ExtrapolationSpec(args.t0, args.t1, args.target).coefficient] if args.target is not None else None)
            if not alphas:
                raise ConfigError("pass --alpha (one or more values) or --target")
            for a in alphas:
                if a <= 1:
                    warnings.warn(f"alpha {a:g} <= 1 interpolates between the checkpoints", InterpolationWarning)
            rows = compare_logit_extrapolation(traj, [(args.t0, args.t1)], alphas, task_of(traj),
                                               eval_kwargs=_eval_kwargs(args), out_csv=out / "logit_compare.csv")
            outputs.append(out / "logit_compare.csv")
            conf.update(alphas=alphas, eval=_eval_kwargs(args))
            for r in rows:
                print(f"alpha={r['alpha']:g}: extrapolated {r['mean_reward_extrapolated']:.4f}, "
                      f"real t1 {r['mean_reward_real_t1']:.4f}")
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_run_manifest(out, f"extrapolate {args.what}", conf, {"eval_seed": args.eval_seed}, [args.traj],
                       outputs, started)
    return EXIT_OK


def cmd_decompose(args) -> int:
    from .analysis import decompose_layer, model_config_of

    started = time.time()
    traj = _load_traj(args.traj)
    out = _analysis_out(args)
    for t in (args.t0, args.t1):
        if t not in traj.steps:
            raise ConfigError(f"step {t} is not in the trajectory (steps: {traj.steps})")
    config = model_config_of(traj)
    probes = _probes_for(traj, args, config)
    _save_probes(out / "probes.json", probes)
    rep, idx = decompose_layer(traj, args.t0, args.t1, probes, args.layer, config)
    rep.write_csv(out / "decomposition.csv", idx)
    _dump_json(out / "summary.json", _clean({"kind": "decompose", **rep.summary()}))
    outputs = [out / "probes.json", out / "decomposition.csv", out / "summary.json"]
    print(f"decompose {args.layer} {args.t0}->{args.t1}: {rep.total.size} samples")
    write_run_manifest(out, "decompose", {"t0": args.t0, "t1": args.t1, "layer": args.layer},
                       {"seed": args.seed}, [args.traj], outputs, started)
    return EXIT_OK


def _read_csv_rows(path) -> list[dict]:
    import csv
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


REPORT_TABLES = ("weight_sweep.csv", "logit_compare.csv", "gradient_stability.csv", "layer_summary.csv",
                 "activation_layer_summary.csv")


def cmd_report(args) -> int:
    started = time.time()
    root = Path(args.in_dir)
    if not root.is_dir():
        raise ConfigError(f"input directory not found: {root}")
    out_path = Path(args.out) if args.out else root / "summary.json"
    report = {"kind": "report", "sections": {}, "tables": {}}
    inputs = []
    for path in sorted(root.rglob("summary.json")):
        data = json.loads(path.read_text())
        if data.get("kind") in (None, "report"):
            continue
        key = str(path.parent.relative_to(root)) or "."
        report["sections"][key] = data
        inputs.append(path)
    for name in REPORT_TABLES:
        for path in sorted(root.rglob(name)):
            key = f"{path.parent.relative_to(root)}/{name}"
            report["tables"][key] = _read_csv_rows(path)
            inputs.append(path)
    for path in sorted(root.rglob("metrics.csv")):
        rows = _read_csv_rows(path)
        rewards = [float(r["mean_reward"]) for r in rows if r["phase"] == "GRAD" and r["mean_reward"]]
        report["sections"][f"{path.parent.relative_to(root)}/metrics"] = {
            "kind": "train", "steps": len(rows), "grad_steps": sum(r["phase"] == "GRAD" for r in rows),
            "first_mean_reward": rewards[0] if rewards else None, "last_mean_reward": rewards[-1] if rewards else None}
        inputs.append(path)
    if not inputs:
        raise ConfigError(f"nothing to report in {root}: no summary.json or known CSV files")
    report["histograms"] = {k: v["histogram"] for k, v in report["sections"].items() if "histogram" in v}
    _dump_json(out_path, _clean(report))
    print(f"report: merged {len(inputs)} files into {out_path}")
    write_run_manifest(out_path.parent, "report", {"in": str(root)}, {}, inputs, [out_path], started)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _alpha_list(text: str) -> list[float]:
    try:
        return [float(a) for a in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_probe_flags(p) -> None:
    p.add_argument("--probes", help="probes.json file, or number of prompts to sample probes from")
    p.add_argument("--n-probes", type=int, default=4, help="prompts used for probe generation")
    p.add_argument("--per-prompt", type=int, default=16, help="sampled completions per probe prompt")


def _add_eval_flags(p) -> None:
    p.add_argument("--eval-prompts", type=int, default=256)
    p.add_argument("--eval-samples", type=int, default=4)
    p.add_argument("--eval-seed", type=int, default=12345)
    p.add_argument("--eval-mode", choices=["sample", "expected"], default="sample")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-p", type=float, default=1.0)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="linex", description="Linearity analysis and extrapolation for RLVR checkpoints.")
    parser.add_argument("--version", action="version", version=f"linex {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker thread bound (default: $LINEX_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="GRPO / RL-Extra training")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--schedule", help="m,n[,beta]")
    p.add_argument("--anchor", choices=["chain", "last_grad_pair"])
    p.add_argument("--adam", choices=["freeze", "reset"])
    p.add_argument("--steps", type=int)
    p.add_argument("--ckpt-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-id")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="linearity fits of weights, token log-probs or activations")
    p.add_argument("what", choices=["weights", "tokens", "activations"])
    p.add_argument("--traj")
    p.add_argument("--sample-frac", type=float, default=None,
                   help="fraction of coordinates to track (weights: 0.001, activations: 1.0)")
    p.add_argument("--global-sample", action="store_true", help="sample over all weights instead of per tensor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--min-changes", type=int, default=3)
    p.add_argument("--abs-change-floor", type=float, default=0.0)
    p.add_argument("--import", dest="import_path", help="log-prob matrix CSV to categorize")
    p.add_argument("--var-threshold", type=float, default=0.1)
    p.add_argument("--r2-threshold", type=float, default=0.7)
    p.add_argument("--taps", help="comma-separated activation taps (default: every block and logits)")
    _add_probe_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("extrapolate", help="weight or logit extrapolation from two checkpoints")
    p.add_argument("what", choices=["weights", "logits"])
    p.add_argument("--traj", required=True)
    p.add_argument("--t0", type=int, required=True)
    p.add_argument("--t1", type=int, required=True)
    p.add_argument("--target", type=float)
    p.add_argument("--alpha", type=_alpha_list, help="coefficient, or a comma-separated grid for logits")
    p.add_argument("--grid", help="comma-separated target steps for a weight sweep")
    _add_eval_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extrapolate)

    p = sub.add_parser("decompose", help="split a linear layer's output change into weight/input terms")
    p.add_argument("--traj", required=True)
    p.add_argument("--t0", type=int, required=True)
    p.add_argument("--t1", type=int, required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_probe_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("report", help="merge summaries and CSVs under a directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", help="output JSON (default: <in>/summary.json)")
    p.set_defaults(func=cmd_report)
    return parser


def _thread_count(args) -> int:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("LINEX_THREADS"):
        try:
            n = int(os.environ["LINEX_THREADS"])
        except ValueError:
            raise ConfigError(f"LINEX_THREADS must be an integer, got {os.environ['LINEX_THREADS']!r}") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .linfit import InsufficientDataError
    from .tensor_store import CorruptionError, FormatError, SchemaError, TensorNotFoundError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=_thread_count(args)):
            return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"linex: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, CorruptionError, SchemaError, TensorNotFoundError, InsufficientDataError,
            FileNotFoundError, ValueError, KeyError) as exc:
        print(f"linex: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
