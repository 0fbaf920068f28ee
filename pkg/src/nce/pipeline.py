"""The search procedure as a phase state machine.

init -> warmup -> search -> derive -> retrain. Weights are trained on one half
of the training set with SGD, search parameters on the other half with Adam,
and after every search epoch each searchable group may grow a larger
candidate. Baseline modes (fixed, random, prune-only, width multiplier)
reuse the same training loop.
"""
from __future__ import annotations

import contextlib
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from nce import functional as F
from nce.arch import Arch, build_arch
from nce.config import ExperimentConfig, resolve_config, to_dict
from nce.costmodel import CostBudget, CostReport, cost_loss, exact_cost, expected_cost
from nce.data import Dataset, load_dataset
from nce.errors import ConfigError, InputError, NumericError, PhaseError
from nce.network import SuperNet
from nce.optim import SGD, Adam, cosine_lr, zero_grad
from nce.quantize import pact_penalty
from nce.searchspace import derive_architecture
from nce.tensor import Tensor

log = logging.getLogger(__name__)

PHASES = ("init", "warmup", "search", "derive", "retrain")
CHECKPOINT_FORMAT = "nce-checkpoint"
CHECKPOINT_VERSION = 1
RANDOM_RATIOS = (0.75, 1.0, 1.25)
METRIC_COLUMNS = ["epoch", "phase", "loss_weight", "loss_arch_ce", "loss_cost", "loss_arch",
                  "expected_flops", "expected_params", "candidate_lengths", "max_mass", "expanded",
                  "lr", "test_accuracy"]


@dataclass
class DataSplit:
    weight: np.ndarray
    arch: np.ndarray

    def __post_init__(self):
        if np.intersect1d(self.weight, self.arch).size:
            raise InputError("weight and architecture splits overlap")


def split_dataset(dataset, seed: int) -> DataSplit:
    """Random disjoint halves; an odd extra sample goes to the weight half."""
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if n < 2:
        raise InputError(f"need at least 2 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    half = (n + 1) // 2
    return DataSplit(np.sort(order[:half]), np.sort(order[half:]))


@dataclass
class GradientTrace:
    """Epoch-mean d(loss)/d(alpha) per searchable group."""

    rows: list = field(default_factory=list)  # dicts: epoch, group, ce, total

    def groups(self) -> list:
        seen = []
        for row in self.rows:
            if row["group"] not in seen:
                seen.append(row["group"])
        return seen

    def for_group(self, group: str, kind: str = "ce") -> list:
        return [np.asarray(row[kind]) for row in self.rows if row["group"] == group]


@dataclass
class ExperimentState:
    config: ExperimentConfig
    supernet: SuperNet
    budget: CostBudget
    split: DataSplit
    rng: np.random.Generator
    data: Optional[Dataset] = None
    phase: str = "init"
    epoch: int = 0
    warmup_done: int = 0
    search_done: int = 0
    weight_steps: int = 0
    metrics: list = field(default_factory=list)
    trace: GradientTrace = field(default_factory=GradientTrace)
    arch: Optional[Arch] = None
    audit: Optional[list] = None  # (kind, indices) per update when enabled

    @property
    def seed_arch(self) -> Arch:
        return seed_architecture(self.config, self.data)

    def require(self, *phases):
        if self.phase not in phases:
            raise PhaseError(f"operation needs phase {' or '.join(phases)}, state is in {self.phase!r}")


# -- construction -----------------------------------------------------------

def seed_architecture(cfg: ExperimentConfig, data: Optional[Dataset] = None) -> Arch:
    if data is not None:
        channels, size = data.image_shape[0], data.image_shape[1]
        classes = data.num_classes
    else:
        channels = cfg.dataset.channels
        size = cfg.dataset.image_size
        classes = cfg.dataset.classes
    name = cfg.model.arch
    if name.endswith((".yaml", ".yml")) or Path(name).is_file():
        arch = Arch.load(name)
        found = (arch.in_channels, arch.input_size, arch.num_classes)
        if found != (channels, size, classes):
            raise ConfigError(f"architecture file {name} expects (channels, size, classes) = {found}, "
                              f"data provides {(channels, size, classes)}")
        return arch
    return build_arch(name, cfg.model.seed_width, classes, channels, size)


def make_budget(cfg: ExperimentConfig, arch: Arch) -> CostBudget:
    seed_cost = exact_cost(arch)
    b = cfg.budget
    return CostBudget(b.flop_target or seed_cost.macs, b.param_target or seed_cost.params,
                      b.lambda_flop, b.lambda_param, b.band)


def init_state(cfg: ExperimentConfig, data: Optional[Dataset] = None) -> ExperimentState:
    """Fresh state for a search run (mode nce or prune-only)."""
    if cfg.mode not in ("nce", "prune-only"):
        raise ConfigError(f"search needs mode nce or prune-only, got {cfg.mode!r}")
    data = data if data is not None else load_dataset(cfg.dataset, cfg.dataset_seed)
    rng = np.random.default_rng(cfg.run.seed)
    arch = seed_architecture(cfg, data)
    net = SuperNet(arch, rng, cfg.quant, search=True, n0=cfg.search.initial_candidates,
                   cap=cfg.search.expansion_cap, expandable=cfg.mode == "nce")
    return ExperimentState(cfg, net, make_budget(cfg, arch), split_dataset(len(data), cfg.run.seed), rng, data)


# -- single updates -----------------------------------------------------------

@contextlib.contextmanager
def frozen(params):
    """Stop gradient flow into ``params`` for the duration of the block."""
    saved = [(p, p.requires_grad) for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator) -> list:
    order = rng.permutation(indices)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _sgd(cfg: ExperimentConfig, params) -> SGD:
    o = cfg.optim
    return SGD(params, o.weight_lr, o.momentum, o.weight_decay)


def _total_weight_steps(state: ExperimentState) -> int:
    s = state.config.search
    per_epoch = -(-len(state.split.weight) // s.batch_size)
    return per_epoch * (s.warmup_epochs + s.search_epochs)


def _check_loss(state: ExperimentState, loss: Tensor, what: str):
    if not np.isfinite(loss.values).all():
        dump = diagnostic_dump(state.supernet)
        raise NumericError(f"non-finite {what} at epoch {state.epoch}; layer stats: {dump}")


def diagnostic_dump(net: SuperNet) -> dict:
    stats = {}
    for cid, conv in net.convs.items():
        w = conv.weight.values
        stats[cid] = {"weight_absmax": float(np.abs(w).max()), "weight_finite": bool(np.isfinite(w).all()),
                      "clip": None if conv.clip is None else float(conv.clip.values[0])}
    for g, cs in net.candidates.items():
        stats[f"alpha:{g}"] = cs.alphas.values.tolist()
    return stats


def weight_step(state: ExperimentState, idx: np.ndarray, uniform: bool = False, quantize: bool = True) -> float:
    """One SGD update of weights and PACT clips on a D_weight batch."""
    net, cfg, data = state.supernet, state.config, state.data
    if state.audit is not None:
        state.audit.append(("weight", np.asarray(idx)))
    subsets = net.sample(state.rng, cfg.search.sample_size, uniform=uniform)
    params = net.weight_parameters()
    zero_grad(params)
    with frozen(net.arch_parameters()):
        logits = net(data.x_train[idx], subsets, training=True, quantize=quantize)
        ce = F.softmax_cross_entropy(logits, data.y_train[idx])
        loss = ce
        penalty = pact_penalty(net.clips(), cfg.quant.pact_reg) if quantize else None
        if penalty is not None:
            loss = loss + penalty
        _check_loss(state, loss, "weight loss")
        loss.backward()
    opt = _sgd(cfg, params)
    opt.lr = cosine_lr(cfg.optim.weight_lr, state.weight_steps, _total_weight_steps(state))
    opt.step()
    for clip in net.clips():
        clip.project()
    zero_grad(params)
    state.weight_steps += 1
    return float(ce.values)


def arch_step(state: ExperimentState, idx: np.ndarray, quantize: bool = True) -> dict:
    """One Adam update of the search parameters on a D_arch batch.

    Returns the loss terms and the per-group alpha gradients of the
    cross-entropy alone and of the full objective.
    """
    net, cfg, data = state.supernet, state.config, state.data
    if state.audit is not None:
        state.audit.append(("arch", np.asarray(idx)))
    subsets = net.sample(state.rng, cfg.search.sample_size)
    alphas = net.arch_parameters()
    zero_grad(alphas)
    with frozen(net.weight_parameters()):
        logits = net(data.x_train[idx], subsets, training=True, quantize=quantize)
        ce = F.softmax_cross_entropy(logits, data.y_train[idx])
        _check_loss(state, ce, "architecture loss")
        if ce.requires_grad:
            ce.backward()
    ce_grads = {g: _grad_or_zero(net.candidates[g].alphas) for g in net.searchable_groups}
    report = expected_cost(net)
    closs = cost_loss(report, state.budget)
    if isinstance(closs, Tensor) and closs.requires_grad:
        closs.backward()
    total_grads = {g: _grad_or_zero(net.candidates[g].alphas) for g in net.searchable_groups}
    o = cfg.optim
    Adam(alphas, o.arch_lr, o.arch_betas, o.arch_eps).step()
    zero_grad(alphas)
    return {"ce": float(ce.values), "cost": float(getattr(closs, "values", closs)),
            "ce_grads": ce_grads, "total_grads": total_grads}


def _grad_or_zero(p) -> np.ndarray:
    return np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64).copy()


# -- phases -------------------------------------------------------------------

def warmup(state: ExperimentState, epochs: Optional[int] = None) -> ExperimentState:
    """Train supernet weights with uniformly sampled candidates; alphas stay fixed."""
    state.require("init", "warmup")
    state.phase = "warmup"
    cfg = state.config
    epochs = cfg.search.warmup_epochs - state.warmup_done if epochs is None else epochs
    for _ in range(epochs):
        losses = [weight_step(state, idx, uniform=True, quantize=cfg.quant.quantize_warmup)
                  for idx in _batches(state.split.weight, cfg.search.batch_size, state.rng)]
        state.warmup_done += 1
        state.epoch += 1
        _log_epoch(state, "warmup", loss_weight=float(np.mean(losses)))
    return state


def search_epoch(state: ExperimentState) -> ExperimentState:
    """Alternate weight and architecture updates over paired batches, then run
    the expansion check on every searchable group."""
    state.require("warmup", "search")
    state.phase = "search"
    cfg, net = state.config, state.supernet
    wb = _batches(state.split.weight, cfg.search.batch_size, state.rng)
    ab = _batches(state.split.arch, cfg.search.batch_size, state.rng)
    w_losses, a_ce, a_cost = [], [], []
    sums_ce, sums_total, steps = {}, {}, 0
    for w_idx, a_idx in zip(wb, ab):
        w_losses.append(weight_step(state, w_idx))
        res = arch_step(state, a_idx)
        a_ce.append(res["ce"])
        a_cost.append(res["cost"])
        for g in net.searchable_groups:
            sums_ce[g] = sums_ce.get(g, 0) + res["ce_grads"][g]
            sums_total[g] = sums_total.get(g, 0) + res["total_grads"][g]
        steps += 1
    state.epoch += 1
    state.search_done += 1
    for g in net.searchable_groups:
        if steps:
            state.trace.rows.append({"epoch": state.epoch, "group": g,
                                     "ce": (sums_ce[g] / steps).tolist(),
                                     "total": (sums_total[g] / steps).tolist()})
    expanded = net.expand(cfg.search.threshold, state.rng) if cfg.mode == "nce" else {}
    _log_epoch(state, "search", loss_weight=float(np.mean(w_losses)) if w_losses else float("nan"),
               loss_arch_ce=float(np.mean(a_ce)) if a_ce else float("nan"),
               loss_cost=float(np.mean(a_cost)) if a_cost else float("nan"),
               expanded=";".join(g for g, e in expanded.items() if e))
    return state


def run_search(state: ExperimentState, checkpoint=None) -> ExperimentState:
    """Warm-up then search to the configured epoch counts (resumable)."""
    cfg = state.config
    if state.phase in ("init", "warmup"):
        while state.warmup_done < cfg.search.warmup_epochs:
            warmup(state, 1)
            if checkpoint:
                save_checkpoint(state, checkpoint)
        if state.phase == "init":
            warmup(state, 0)
    while state.search_done < cfg.search.search_epochs:
        search_epoch(state)
        if checkpoint:
            save_checkpoint(state, checkpoint)
    return state


def derive(state: ExperimentState) -> Arch:
    state.require("search", "warmup")
    state.arch = derive_architecture(state.supernet)
    state.phase = "derive"
    return state.arch


@dataclass
class TrainResult:
    network: SuperNet
    arch: Arch
    accuracy: float
    cost: CostReport
    history: list

    def report(self) -> dict:
        return {"arch": self.arch.name, "test_accuracy": self.accuracy, "flops": self.cost.macs,
                "params": self.cost.params, "widths": self.arch.widths()}


def train_network(arch: Arch, cfg: ExperimentConfig, data: Dataset, rng: np.random.Generator,
                  epochs: Optional[int] = None, log_rows: Optional[list] = None,
                  first_epoch: int = 0) -> TrainResult:
    """Train a standalone network from a fresh random init on the full training set."""
    epochs = cfg.search.retrain_epochs if epochs is None else epochs
    net = SuperNet.standalone(arch, rng, cfg.quant)
    params = net.weight_parameters()
    opt = _sgd(cfg, params)
    n = len(data.x_train)
    per_epoch = -(-n // cfg.search.batch_size)
    total = per_epoch * epochs
    step = 0
    history = []
    for e in range(epochs):
        losses = []
        for idx in _batches(np.arange(n), cfg.search.batch_size, rng):
            zero_grad(params)
            logits = net(data.x_train[idx], training=True)
            ce = F.softmax_cross_entropy(logits, data.y_train[idx])
            loss = ce
            penalty = pact_penalty(net.clips(), cfg.quant.pact_reg)
            if penalty is not None:
                loss = loss + penalty
            if not np.isfinite(loss.values).all():
                raise NumericError(f"non-finite training loss in epoch {e}; layer stats: {diagnostic_dump(net)}")
            loss.backward()
            opt.lr = cosine_lr(cfg.optim.weight_lr, step, total)
            opt.step()
            for clip in net.clips():
                clip.project()
            step += 1
            losses.append(float(ce.values))
        row = {"epoch": first_epoch + e + 1, "phase": "retrain", "loss_weight": float(np.mean(losses)),
               "lr": opt.lr}
        if e == epochs - 1:
            row["test_accuracy"] = net.accuracy(data.x_test, data.y_test)
        history.append(row)
        if log_rows is not None:
            log_rows.append(_metric_row(row))
    zero_grad(params)
    acc = history[-1]["test_accuracy"] if history else net.accuracy(data.x_test, data.y_test)
    return TrainResult(net, arch, acc, exact_cost(arch), history)


def retrain(state: ExperimentState, train_epochs: Optional[int] = None) -> TrainResult:
    state.require("derive")
    rng = np.random.default_rng(state.rng.integers(2 ** 63))
    result = train_network(state.arch, state.config, state.data, rng, train_epochs, state.metrics, state.epoch)
    state.epoch += len(result.history)
    state.phase = "retrain"
    return result


def derive_and_retrain(state: ExperimentState, train_epochs: Optional[int] = None) -> TrainResult:
    derive(state)
    return retrain(state, train_epochs)


def random_arch(seed_arch: Arch, rng: np.random.Generator) -> Arch:
    """Per searchable group, a width ratio drawn from {0.75, 1, 1.25}."""
    widths = {}
    for g in seed_arch.searchable_groups:
        w = seed_arch.group_members(g)[0].channels
        widths[g] = max(1, int(np.floor(w * rng.choice(RANDOM_RATIOS) + 0.5)))
    return seed_arch.with_widths(widths, name=f"{seed_arch.name}-random")


def baseline_arch(cfg: ExperimentConfig, data: Optional[Dataset] = None,
                  rng: Optional[np.random.Generator] = None) -> Arch:
    seed = seed_architecture(cfg, data)
    if cfg.mode == "fixed":
        return seed
    if cfg.mode == "width-multiplier":
        return seed if cfg.width_multiplier == 1.0 else seed.scaled(cfg.width_multiplier)
    if cfg.mode == "random":
        return random_arch(seed, rng if rng is not None else np.random.default_rng(cfg.run.seed))
    raise ConfigError(f"mode {cfg.mode!r} has no fixed architecture")


def run_experiment(cfg: ExperimentConfig, data: Optional[Dataset] = None, checkpoint=None) -> tuple:
    """Run any mode end to end; returns (TrainResult, state or None)."""
    data = data if data is not None else load_dataset(cfg.dataset, cfg.dataset_seed)
    if cfg.mode in ("nce", "prune-only"):
        state = init_state(cfg, data)
        run_search(state, checkpoint)
        return derive_and_retrain(state), state
    return run_baseline(cfg.mode, cfg, data), None


def run_baseline(mode: str, cfg: ExperimentConfig, data: Optional[Dataset] = None) -> TrainResult:
    if mode not in ("fixed", "random", "prune-only", "width-multiplier"):
        raise ConfigError(f"unknown baseline mode {mode!r}")
    if cfg.mode != mode:
        cfg = cfg.replace(mode=mode)
    data = data if data is not None else load_dataset(cfg.dataset, cfg.dataset_seed)
    if mode == "prune-only":
        return run_experiment(cfg, data)[0]
    rng = np.random.default_rng(cfg.run.seed)
    arch = baseline_arch(cfg, data, rng)
    return train_network(arch, cfg, data, rng)


# -- metrics ------------------------------------------------------------------

def _metric_row(values: dict) -> dict:
    row = {c: "" for c in METRIC_COLUMNS}
    for k, v in values.items():
        row[k] = f"{v:.6g}" if isinstance(v, float) else v
    return row


def _log_epoch(state: ExperimentState, phase: str, **values):
    net = state.supernet
    report = expected_cost(net)
    groups = net.searchable_groups
    row = {"epoch": state.epoch, "phase": phase,
           "expected_flops": report.macs, "expected_params": report.params,
           "candidate_lengths": ";".join(f"{g}={len(net.candidates[g].counts)}" for g in groups),
           "max_mass": ";".join(f"{g}={net.candidates[g].max_mass():.4f}" for g in groups)}
    if "loss_arch_ce" in values and "loss_cost" in values:
        values["loss_arch"] = values["loss_arch_ce"] + values["loss_cost"]
    row.update(values)
    state.metrics.append(_metric_row(row))


def write_metrics(rows: list, path):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(state: ExperimentState, path) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": to_dict(state.config),
        "phase": state.phase,
        "epoch": state.epoch,
        "warmup_done": state.warmup_done,
        "search_done": state.search_done,
        "weight_steps": state.weight_steps,
        "supernet": state.supernet.state_dict(),
        "rng": state.rng.bit_generator.state,
        "metrics": [dict(r) for r in state.metrics],
        "trace": [dict(r) for r in state.trace.rows],
        "arch": None if state.arch is None else state.arch.to_dict(),
        "split": (state.split.weight, state.split.arch),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)
    tmp.replace(path)
    return path


def load_checkpoint(path, data: Optional[Dataset] = None) -> ExperimentState:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = resolve_config(payload["config"])
    data = data if data is not None else load_dataset(cfg.dataset, cfg.dataset_seed)
    arch = seed_architecture(cfg, data)
    net = SuperNet(arch, np.random.default_rng(0), cfg.quant, search=True, n0=cfg.search.initial_candidates,
                   cap=cfg.search.expansion_cap, expandable=cfg.mode == "nce")
    net.load_state_dict(payload["supernet"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng"]
    state = ExperimentState(cfg, net, make_budget(cfg, arch), DataSplit(*payload["split"]), rng, data,
                            phase=payload["phase"], epoch=payload["epoch"], warmup_done=payload["warmup_done"],
                            search_done=payload["search_done"], weight_steps=payload["weight_steps"],
                            metrics=payload["metrics"], trace=GradientTrace(payload["trace"]))
    if payload["arch"] is not None:
        state.arch = Arch.from_dict(payload["arch"])
    return state
