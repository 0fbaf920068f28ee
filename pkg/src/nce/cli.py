"""Command-line entry points: search, retrain, baseline, analyze, cost, sweep.

Every command writes into a run directory holding the resolved config, the
seed, the code version and its artifacts. Completed run directories are
never overwritten. Errors print one ``ErrorClass: message`` line on stderr
and exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import pickle
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from nce import analysis as A
from nce import pipeline as P
from nce.arch import Arch
from nce.config import ExperimentConfig, dump_config, parse_config, resolve_config, to_dict
from nce.costmodel import exact_cost
from nce.data import load_dataset
from nce.errors import ConfigError, InputError, NCEError, UsageError

log = logging.getLogger("nce")

CONFIG_FILE = "config.yaml"
META_FILE = "run.json"
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.pkl"
ARCH_FILE = "derived_arch.yaml"
MODEL_FILE = "model.pkl"
REPORT_FILE = "report.json"
COST_FILE = "cost.csv"
COMPLETE_MARKER = "COMPLETE"
MODEL_FORMAT = "nce-model"


def version_string() -> str:
    from nce import __version__

    return f"nce {__version__}"


def shipped_arch_path(name: str) -> Path:
    return Path(str(resources.files("nce") / "archs" / f"{name}.yaml"))


def shipped_arch_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("nce").joinpath("archs").iterdir()
                  if p.name.endswith(".yaml"))


def resolve_arch(spec: str) -> Arch:
    """A path to an arch file, or the name of a shipped one (e.g. resnet20-cifar)."""
    path = Path(spec)
    if path.is_file():
        return Arch.load(path)
    for name in (spec, f"{spec}-cifar"):
        if name in shipped_arch_names():
            return Arch.load(shipped_arch_path(name))
    raise InputError(f"no architecture file or shipped architecture named {spec!r} "
                     f"(shipped: {', '.join(shipped_arch_names())})")


def resolve_config_path(spec: str) -> Path:
    """A config file path, or the name of a shipped preset (e.g. toy)."""
    path = Path(spec)
    if path.is_file():
        return path
    preset = Path(str(resources.files("nce") / "presets" / f"{spec}.yaml"))
    return preset if preset.is_file() else path


# -- run directories ------------------------------------------------------------

def open_run_dir(path, resume: bool = False) -> Path:
    path = Path(path)
    if (path / COMPLETE_MARKER).exists():
        raise UsageError(f"run directory {path} holds a completed run; choose a new output directory")
    if path.exists() and any(path.iterdir()) and not resume:
        raise UsageError(f"run directory {path} is not empty; pass --resume to continue it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_files(run_dir: Path, cfg: ExperimentConfig, command: str):
    (run_dir / CONFIG_FILE).write_text(dump_config(cfg))
    meta = {"command": command, "seed": cfg.run.seed, "mode": cfg.mode, "version": version_string(),
            "threads": cfg.run.threads}
    (run_dir / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")


def mark_complete(run_dir: Path):
    (run_dir / COMPLETE_MARKER).write_text(version_string() + "\n")


def load_config_arg(args) -> ExperimentConfig:
    cfg = parse_config(resolve_config_path(args.config)) if args.config else resolve_config({})
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["run.threads"] = args.threads
    if getattr(args, "out", None):
        overrides["run.output_dir"] = str(args.out)
    return cfg.replace(**overrides) if overrides else cfg


def save_model(result: P.TrainResult, cfg: ExperimentConfig, path: Path):
    payload = {"format": MODEL_FORMAT, "version": 1, "arch": result.arch.to_dict(),
               "quant": to_dict(cfg)["quant"], "state": result.network.state_dict()}
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)


def load_model(path):
    from nce.network import SuperNet
    from nce.quantize import QuantConfig

    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format") != MODEL_FORMAT:
        raise InputError(f"{path} is not a saved model")
    arch = Arch.from_dict(payload["arch"])
    net = SuperNet.standalone(arch, np.random.default_rng(0), QuantConfig(**payload["quant"]))
    net.load_state_dict(payload["state"])
    return net


def write_report(result: P.TrainResult, run_dir: Path):
    (run_dir / REPORT_FILE).write_text(json.dumps(result.report(), indent=2) + "\n")
    result.cost.write_csv(run_dir / COST_FILE)


# -- commands -------------------------------------------------------------------

def cmd_search(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        if (run_dir / COMPLETE_MARKER).exists():
            raise UsageError(f"run directory {run_dir} holds a completed run")
        cfg = parse_config(run_dir / CONFIG_FILE)
        with threadpool_limits(cfg.run.threads):
            state = P.load_checkpoint(run_dir / CHECKPOINT_FILE)
            return _finish_search(state, run_dir)
    cfg = load_config_arg(args)
    if cfg.mode not in ("nce", "prune-only"):
        raise ConfigError(f"search needs mode nce or prune-only, got {cfg.mode!r}")
    run_dir = open_run_dir(cfg.run.output_dir)
    write_run_files(run_dir, cfg, "search")
    with threadpool_limits(cfg.run.threads):
        state = P.init_state(cfg)
        P.save_checkpoint(state, run_dir / CHECKPOINT_FILE)
        return _finish_search(state, run_dir, stop_after=args.stop_after)


def _finish_search(state: P.ExperimentState, run_dir: Path, stop_after: Optional[int] = None) -> int:
    checkpoint = run_dir / CHECKPOINT_FILE
    cfg = state.config
    while state.warmup_done < cfg.search.warmup_epochs or state.search_done < cfg.search.search_epochs \
            or state.phase == "init":
        if stop_after is not None and state.epoch >= stop_after:
            P.write_metrics(state.metrics, run_dir / METRICS_FILE)
            print(f"stopped after epoch {state.epoch}; resume with --resume {run_dir}")
            return 0
        if state.warmup_done < cfg.search.warmup_epochs or state.phase == "init":
            P.warmup(state, 1 if state.warmup_done < cfg.search.warmup_epochs else 0)
        else:
            P.search_epoch(state)
        P.save_checkpoint(state, checkpoint)
        P.write_metrics(state.metrics, run_dir / METRICS_FILE)
    arch = state.arch if state.phase == "derive" else P.derive(state)
    arch.save(run_dir / ARCH_FILE)
    P.save_checkpoint(state, checkpoint)
    P.write_metrics(state.metrics, run_dir / METRICS_FILE)
    exact_cost(arch).write_csv(run_dir / COST_FILE)
    mark_complete(run_dir)
    print(f"derived {arch.name}: {json.dumps(arch.widths())}")
    print(f"wrote {run_dir / ARCH_FILE}")
    return 0


def cmd_retrain(args) -> int:
    if args.run:
        src = Path(args.run)
        cfg = parse_config(src / CONFIG_FILE)
        arch_path = src / ARCH_FILE
        out = Path(args.out) if args.out else src / "retrain"
    else:
        if not (args.arch and args.config):
            raise UsageError("retrain needs a search run directory or both --arch and --config")
        cfg = parse_config(resolve_config_path(args.config))
        arch_path = Path(args.arch)
        out = Path(args.out) if args.out else Path(cfg.run.output_dir) / "retrain"
    if args.seed is not None:
        cfg = cfg.replace(**{"run.seed": args.seed})
    arch = Arch.load(arch_path)
    run_dir = open_run_dir(out)
    cfg = cfg.replace(**{"run.output_dir": str(run_dir)})
    write_run_files(run_dir, cfg, "retrain")
    arch.save(run_dir / ARCH_FILE)
    with threadpool_limits(cfg.run.threads):
        data = load_dataset(cfg.dataset, cfg.dataset_seed)
        rows = []
        result = P.train_network(arch, cfg, data, np.random.default_rng(cfg.run.seed), args.epochs, rows)
    P.write_metrics(rows, run_dir / METRICS_FILE)
    save_model(result, cfg, run_dir / MODEL_FILE)
    write_report(result, run_dir)
    mark_complete(run_dir)
    print(json.dumps(result.report()))
    return 0


def cmd_baseline(args) -> int:
    cfg = load_config_arg(args)
    changes = {"mode": args.mode}
    if args.gamma is not None:
        changes["width_multiplier"] = args.gamma
    cfg = cfg.replace(**changes)
    run_dir = open_run_dir(cfg.run.output_dir)
    write_run_files(run_dir, cfg, "baseline")
    with threadpool_limits(cfg.run.threads):
        data = load_dataset(cfg.dataset, cfg.dataset_seed)
        if args.mode == "prune-only":
            result, state = P.run_experiment(cfg, data)
            rows = state.metrics
            P.save_checkpoint(state, run_dir / CHECKPOINT_FILE)
        else:
            rng = np.random.default_rng(cfg.run.seed)
            rows = []
            result = P.train_network(P.baseline_arch(cfg, data, rng), cfg, data, rng, log_rows=rows)
    result.arch.save(run_dir / ARCH_FILE)
    P.write_metrics(rows, run_dir / METRICS_FILE)
    save_model(result, cfg, run_dir / MODEL_FILE)
    write_report(result, run_dir)
    mark_complete(run_dir)
    print(json.dumps(result.report()))
    return 0


def cmd_analyze(args) -> int:
    target = Path(args.target)
    checkpoint = target / CHECKPOINT_FILE if target.is_dir() else target
    out = Path(args.out) if args.out else (target if target.is_dir() else target.parent) / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    existing = [p.name for p in out.iterdir()]
    if existing and not args.force:
        raise UsageError(f"analysis directory {out} is not empty; pass --out to choose another")
    written = []
    if checkpoint.exists():
        state = P.load_checkpoint(checkpoint)
        if not state.trace.rows:
            raise InputError(f"{checkpoint} holds no search epochs to analyze")
        A.write_gradient_trace(state.trace, out / "gradient_trace.csv", args.kind)
        report = A.kendall_report(state.trace, state.config.quant.enabled, args.kind)
        report.write_csv(out / "kendall.csv")
        written += ["gradient_trace.csv", "kendall.csv"]
        print(f"mean Kendall preference score: {report.mean:.4f}")
        data = state.data
    else:
        data = None
    model_path = next((p for p in (target / MODEL_FILE, target / "retrain" / MODEL_FILE) if p.exists()), None) \
        if target.is_dir() else None
    if model_path is not None:
        cfg = parse_config(model_path.parent / CONFIG_FILE)
        net = load_model(model_path)
        data = data if data is not None else load_dataset(cfg.dataset, cfg.dataset_seed)
        probe = data.x_test[:args.probe]
        profile = A.layer_signal_profile(net, [probe[i:i + 128] for i in range(0, len(probe), 128)])
        A.write_signal_profile(profile, out / "signal_profile.csv")
        written.append("signal_profile.csv")
    if not written:
        raise InputError(f"nothing to analyze in {target}: no checkpoint or trained model found")
    for name in written:
        print(f"wrote {out / name}")
    return 0


def cmd_cost(args) -> int:
    arch = resolve_arch(args.arch)
    report = exact_cost(arch, args.resolution)
    if args.csv:
        report.write_csv(args.csv)
    if args.layers:
        rows = list(report.rows())
        print(",".join(rows[0]))
        for row in rows:
            print(",".join(str(v) for v in row.values()))
    print(f"{arch.name}: FLOPs {report.macs / 1e6:.2f}M  PARAMs {report.params / 1e6:.2f}M "
          f"({int(report.macs)} MACs, {int(report.params)} parameters)")
    return 0


def _sweep_one(cfg_dict: dict, seeds: list, label: str) -> A.TradeoffPoint:
    cfg = resolve_config(cfg_dict)
    with threadpool_limits(cfg.run.threads):
        return A.tradeoff_sweep([(label, cfg)], seeds)[0]


def cmd_sweep(args) -> int:
    configs = []
    for path in args.configs:
        cfg = parse_config(resolve_config_path(path))
        if args.gammas:
            for g in args.gammas:
                configs.append((f"width-multiplier-{g:g}",
                                cfg.replace(**{"mode": "width-multiplier", "width_multiplier": g})))
        else:
            configs.append((Path(path).stem, cfg))
    if not configs:
        raise UsageError("sweep needs at least one config")
    out = Path(args.out)
    if out.exists():
        raise UsageError(f"{out} exists; sweeps never overwrite earlier tables")
    seeds = args.seeds or [0]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_one, to_dict(c), seeds, label) for label, c in configs]
            points = [f.result() for f in futures]
        points.sort(key=lambda p: (p.params, p.flops, p.label))
    else:
        points = []
        for label, cfg in configs:
            with threadpool_limits(cfg.run.threads):
                points.extend(A.tradeoff_sweep([(label, cfg)], seeds))
        points.sort(key=lambda p: (p.params, p.flops, p.label))
    out.parent.mkdir(parents=True, exist_ok=True)
    A.write_tradeoff(points, out)
    for p in points:
        print(f"{p.label}: params={p.params:.0f} flops={p.flops:.0f} acc={p.mean_accuracy:.4f}±{p.std_accuracy:.4f}")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nce", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=version_string())
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="experiment config (YAML) or shipped preset name (toy, cifar10-resnet20)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--threads", type=int, help="override run.threads")
        if out:
            p.add_argument("--out", help="override run.output_dir")

    p = sub.add_parser("search", help="warm-up + channel search + derivation")
    common(p)
    p.add_argument("--resume", metavar="RUN_DIR", help="continue an interrupted search from its checkpoint")
    p.add_argument("--stop-after", type=int, metavar="EPOCH", help="stop (resumably) after this epoch")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("retrain", help="train a derived architecture from scratch")
    p.add_argument("run", nargs="?", help="search run directory (uses its config and derived arch)")
    p.add_argument("--arch", help="architecture file (with --config, instead of a run directory)")
    p.add_argument("--config", help="experiment config (YAML) or shipped preset name (toy, cifar10-resnet20)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--epochs", type=int, help="override search.retrain_epochs")
    p.add_argument("--out", help="output directory (default: RUN/retrain)")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("baseline", help="train a comparison baseline")
    common(p)
    p.add_argument("--mode", required=True, choices=["fixed", "random", "prune-only", "width-multiplier"])
    p.add_argument("--gamma", type=float, help="width multiplier for --mode width-multiplier")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("analyze", help="export gradient traces, Kendall scores and signal profiles")
    p.add_argument("target", help="run directory or checkpoint file")
    p.add_argument("--out", help="output directory (default: TARGET/analysis)")
    p.add_argument("--kind", choices=["ce", "total"], default="ce",
                   help="gradient source: cross-entropy only (default) or the full architecture loss")
    p.add_argument("--probe", type=int, default=512, help="test samples used for signal profiles")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("cost", help="exact FLOPs/PARAMs of an architecture file")
    p.add_argument("arch", help="arch file path or shipped name (" + ", ".join(shipped_arch_names()) + ")")
    p.add_argument("--resolution", type=int, help="input resolution (default: from the file)")
    p.add_argument("--csv", help="write the per-layer cost table here")
    p.add_argument("--layers", action="store_true", help="print per-layer rows")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("sweep", help="accuracy-vs-cost table over configs and seeds")
    p.add_argument("configs", nargs="+", help="experiment configs")
    p.add_argument("--gammas", type=float, nargs="+", help="expand each config into width-multiplier runs")
    p.add_argument("--seeds", type=int, nargs="+", help="run seeds (default: 0)")
    p.add_argument("--jobs", type=int, default=1, help="run configs as this many independent processes")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NCEError as exc:
        print(f"{type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    except (OSError, yaml.YAMLError) as exc:
        print(f"{type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
