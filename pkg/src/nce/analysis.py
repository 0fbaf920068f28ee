"""Diagnostics: gradient traces, Kendall preference scores, per-layer signal
profiles and accuracy-vs-cost sweeps. Everything exports to CSV."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from nce import quantize as Q
from nce.errors import InputError
from nce.tensor import no_grad

GRADIENT_COLUMNS = ["epoch", "layer", "candidate", "grad"]
KENDALL_COLUMNS = ["layer", "tau"]
SIGNAL_COLUMNS = ["layer", "stdev_fp", "stdev_q", "sqnr_db"]
TRADEOFF_COLUMNS = ["label", "params", "flops", "mean_accuracy", "std_accuracy", "runs"]


@dataclass
class KendallResult:
    tau: float
    tied: bool = False  # y had no untied pair; tau is undefined and reported as 0


def kendall_tau(x, y) -> KendallResult:
    """Tie-corrected Kendall tau-b over all pairs, vectorised O(n^2)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise InputError(f"kendall_tau needs two equal-length vectors of length >= 2, got {x.size} and {y.size}")
    iu = np.triu_indices(x.size, 1)
    dx = np.sign(x[:, None] - x[None, :])[iu]
    dy = np.sign(y[:, None] - y[None, :])[iu]
    n_x = np.count_nonzero(dx)
    n_y = np.count_nonzero(dy)
    if n_x == 0 or n_y == 0:
        return KendallResult(0.0, True)
    s = float(np.sum(dx * dy))
    tau = s / math.sqrt(float(n_x) * float(n_y))
    return KendallResult(min(1.0, max(-1.0, tau)))


@dataclass
class KendallReport:
    layers: dict  # layer -> mean tau
    quantized: bool
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.layers.values()))) if self.layers else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(KENDALL_COLUMNS)
            for layer, tau in self.layers.items():
                w.writerow([layer, f"{tau:.6f}"])


def preference_score(trace, layer: str, kind: str = "ce") -> float:
    """Mean over epochs of tau(candidate index, -gradient) for one layer."""
    vectors = trace.for_group(layer, kind)
    if not vectors:
        raise InputError(f"gradient trace has no entries for layer {layer!r}")
    taus = [kendall_tau(np.arange(len(g)), -np.asarray(g)).tau for g in vectors]
    return float(np.mean(taus))


def kendall_report(trace, quantized: bool, kind: str = "ce", meta: Optional[dict] = None) -> KendallReport:
    layers = {g: preference_score(trace, g, kind) for g in trace.groups()}
    return KendallReport(layers, quantized, dict(meta or {}))


def write_gradient_trace(trace, path, kind: str = "ce"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GRADIENT_COLUMNS)
        for row in trace.rows:
            for i, g in enumerate(row[kind]):
                w.writerow([row["epoch"], row["group"], i, repr(float(g))])


# -- signal profiles ------------------------------------------------------------

@dataclass
class SignalProfile:
    stdev_fp: float
    stdev_q: float
    sqnr_db: float


def layer_signal_profile(network, batches: Iterable[np.ndarray]) -> dict:
    """Per quantized conv layer: STDEV of the pre-normalization output on the
    quantized path and the full-precision path, and their SQNR.

    Both paths are evaluated on the same recorded layer input (taken from the
    network's own quantized forward pass) with the same weights, so the SQNR
    isolates the quantizers of that one layer. STDEV is a population
    statistic over all pooled probe samples.
    """
    fp_parts, q_parts = {}, {}
    with no_grad():
        for x in batches:
            record = {}
            network.forward(x, training=False, quantize=True, record=record)
            for cid, conv in network.convs.items():
                if not conv.quantized:
                    continue
                inp = record[cid]
                width = conv.candidates.max_count
                q_parts.setdefault(cid, []).append(conv.conv_output(inp, width, quantize=True).values)
                fp_parts.setdefault(cid, []).append(conv.conv_output(inp, width, quantize=False).values)
    profile = {}
    for cid in q_parts:
        q = np.concatenate(q_parts[cid])
        fp = np.concatenate(fp_parts[cid])
        try:
            ratio = Q.sqnr(fp, q)
        except InputError:
            ratio = float("nan")
        profile[cid] = SignalProfile(Q.activation_stdev(fp), Q.activation_stdev(q), ratio)
    return profile


def trained_activation_stdev(network, batches: Iterable[np.ndarray]) -> dict:
    """STDEV of each conv layer's pre-normalization output on the network's
    own forward path (quantized if the network quantizes that layer)."""
    parts = {}
    with no_grad():
        for x in batches:
            record = {}
            network.forward(x, training=False, quantize=True, record=record)
            for cid, conv in network.convs.items():
                out = conv.conv_output(record[cid], conv.candidates.max_count, quantize=True)
                parts.setdefault(cid, []).append(out.values)
    return {cid: Q.activation_stdev(np.concatenate(v)) for cid, v in parts.items()}


def write_signal_profile(profile: dict, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SIGNAL_COLUMNS)
        for layer, p in profile.items():
            w.writerow([layer, f"{p.stdev_fp:.6g}", f"{p.stdev_q:.6g}", f"{p.sqnr_db:.6g}"])


# -- trade-off sweeps -----------------------------------------------------------

@dataclass
class TradeoffPoint:
    label: str
    params: float
    flops: float
    mean_accuracy: float
    std_accuracy: float
    runs: int


def tradeoff_sweep(configs: Sequence, seeds: Sequence[int] = (0,), data=None, runner=None) -> list:
    """Run every config for every seed; one point per config, sorted by cost.

    ``configs`` holds ExperimentConfig objects or (label, config) pairs. Cost
    is the mean exact cost of the trained architectures across seeds.
    """
    from nce.data import load_dataset
    from nce.pipeline import run_experiment

    runner = runner or (lambda cfg, d: run_experiment(cfg, d)[0])
    points = []
    for i, item in enumerate(configs):
        label, cfg = item if isinstance(item, tuple) else (_label(item, i), item)
        accs, params, flops = [], [], []
        for seed in seeds:
            run_cfg = cfg.replace(**{"run.seed": int(seed)})
            d = data if data is not None else load_dataset(run_cfg.dataset, run_cfg.dataset_seed)
            result = runner(run_cfg, d)
            accs.append(result.accuracy)
            params.append(result.cost.params)
            flops.append(result.cost.macs)
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        points.append(TradeoffPoint(label, float(np.mean(params)), float(np.mean(flops)),
                                    float(np.mean(accs)), std, len(accs)))
    return sorted(points, key=lambda p: (p.params, p.flops, p.label))


def _label(cfg, i: int) -> str:
    if cfg.mode == "width-multiplier":
        return f"width-multiplier-{cfg.width_multiplier:g}"
    return f"{cfg.mode}-{i}"


def write_tradeoff(points: Sequence[TradeoffPoint], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRADEOFF_COLUMNS)
        for p in points:
            w.writerow([p.label, f"{p.params:.0f}", f"{p.flops:.0f}", f"{p.mean_accuracy:.6f}",
                        f"{p.std_accuracy:.6f}", p.runs])
