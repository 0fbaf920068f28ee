"""End-to-end acceptance criteria. Each test records one PASS/FAIL line that
is repeated in the terminal summary.

Criteria 7-9 share one set of toy runs (ResNet8 at W2A2 on 12x12 gratings,
the shipped ``toy`` preset); the session fixture below takes ~8 minutes on
a single core.
"""
import math
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

import nce
from helpers import away_from, brute_kendall, numeric_grad, record, rel_error
from helpers import check_gradients as _check
from nce import analysis as A
from nce import functional as F
from nce import pipeline as P
from nce import quantize as Q
from nce.arch import Arch, build_arch
from nce.cli import shipped_arch_path
from nce.config import parse_config, resolve_config
from nce.costmodel import CostBudget, cost_loss, exact_cost, expected_cost
from nce.data import load_dataset
from nce.errors import ConfigError
from nce.network import SuperNet
from nce.searchspace import ChannelCandidateSet, SearchableConv, expand_if_preferred, mix
from nce.tensor import Tensor, exp, precision, softmax, stack

pytestmark = pytest.mark.acceptance



def check_gradients(build, arrays):
    """Worst relative FD error without asserting, so every op gets a number."""
    return _check(build, arrays, tol=math.inf)


TOY = Path(nce.__file__).parent / "presets" / "toy.yaml"
FULL_PRECISION = {"quant.weight_bits": "full", "quant.activation_bits": "full"}
SEEDS = range(5)


# -- 1 ------------------------------------------------------------------------------

def test_01_cost_model_reproduction():
    expected = {"resnet20-cifar": (40.81e6, 0.27e6), "resnet32-cifar": (69.12e6, 0.47e6),
                "resnet56-cifar": (125.75e6, 0.86e6), "vgg16-cifar": (313.2e6, 14.72e6)}
    t0 = time.perf_counter()
    errors = {}
    for name, (macs, params) in expected.items():
        report = exact_cost(Arch.load(shipped_arch_path(name)))
        errors[name] = max(abs(report.macs - macs) / macs, abs(report.params - params) / params)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 0.02 and elapsed < 1.0
    record(1, "cost-model reproduction", ok,
           f"worst rel. error {errors[worst]:.2%} ({worst}), {elapsed * 1000:.0f} ms")
    assert ok


# -- 2 ------------------------------------------------------------------------------

def test_02_quantizer_grid():
    rng = np.random.default_rng(0)
    problems = []
    for bits in (2, 3, 4):
        for clip in (0.5, 1.0, 3.7):
            x = rng.normal(clip / 2, clip, 50_000).astype(np.float32)
            out = Q.quantize_activation(Tensor(x), Q.PactClip(clip), bits).values
            grid = Q.activation_levels(clip, bits)
            if len(np.unique(out)) > 2 ** bits or not np.isin(out, grid).all():
                problems.append(f"activation b={bits} clip={clip}")
        w = rng.normal(size=50_000).astype(np.float32)
        qw = Q.quantize_weight(Tensor(w), bits).values
        grid = Q.weight_levels(np.abs(w).max(), bits)
        if len(np.unique(qw)) > 2 ** bits - 1 or not np.isin(qw, grid).all() or \
                not np.array_equal(qw, -Q.quantize_weight(Tensor(-w), bits).values):
            problems.append(f"weight b={bits}")
    x = np.linspace(-1, 2, 3001, dtype=np.float32)
    two_bit = set(np.unique(Q.quantize_activation(Tensor(x), Q.PactClip(1.0), 2).values).tolist())
    exact = {np.float32(0), np.float32(1) / np.float32(3), np.float32(2) / np.float32(3), np.float32(1)}
    if two_bit != {float(v) for v in exact}:
        problems.append(f"2-bit alpha=1 grid {sorted(two_bit)}")
    ok = not problems
    record(2, "quantizer grid", ok, "all grids bit-exact" if ok else "; ".join(problems))
    assert ok


# -- 3 ------------------------------------------------------------------------------

def _surrogate_check(rng):
    """STE activation quantizer vs the clamp surrogate, gradients for x and the clip."""
    clip = rng.uniform(0.5, 3)
    bits = int(rng.choice([2, 3, 4]))
    x = away_from(rng.uniform(-0.5 * clip, 1.5 * clip, 10), [0.0, clip], 1e-3)
    r = rng.normal(size=10)
    with precision(np.float64):
        xt = Tensor(x.copy(), requires_grad=True)
        ct = Q.PactClip(clip)
        (Q.quantize_activation(xt, ct, bits) * Tensor(r)).sum().backward()

    def surrogate(arrs):
        return float((np.clip(arrs[0], 0, arrs[1][0]) * r).sum())

    arrays = [x.copy(), np.array([clip])]
    return max(rel_error(xt.grad, numeric_grad(surrogate, arrays, 0)),
               rel_error(ct.grad, numeric_grad(surrogate, arrays, 1)))


def _weight_ste_check(rng):
    w, r = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    with precision(np.float64):
        t = Tensor(w, requires_grad=True)
        (Q.quantize_weight(t, 2) * Tensor(r)).sum().backward()
    return rel_error(t.grad, numeric_grad(lambda a: float((a[0] * r).sum()), [w.copy()], 0))


def _cost_loss_check(rng, i):
    net = SuperNet(build_arch("resnet8", 8, input_size=8), np.random.default_rng(i))
    groups = net.searchable_groups
    base = exact_cost(net.arch)
    budget = CostBudget(base.macs * rng.uniform(0.2, 0.4), base.params * rng.uniform(1.6, 2.5),
                        rng.uniform(0.5, 3), rng.uniform(0.5, 3))

    def f(*alphas):
        for g, a in zip(groups, alphas):
            net.candidates[g].alphas = a
        return cost_loss(expected_cost(net), budget)

    return check_gradients(f, [rng.normal(size=len(net.candidates[g].counts)) for g in groups])


def _op_checks():
    """name -> builder(rng) returning a worst relative error for one random instance."""
    def n(rng, *shape):
        return rng.normal(size=shape)

    def conv(rng):
        k, s = int(rng.choice([1, 3])), int(rng.choice([1, 2]))
        r = n(rng, 2, 3, *([(5 + 2 * (k // 2) - k) // s + 1] * 2))
        return check_gradients(lambda x, w: (F.conv2d(x, w, s, k // 2) * Tensor(r)).sum(),
                               [n(rng, 2, 2, 5, 5), n(rng, 3, 2, k, k)])

    def bn(rng):
        r = n(rng, 4, 3, 2, 2)
        return check_gradients(lambda x, g, b: (F.batch_norm(x, g, b, np.zeros(3), np.ones(3), True)
                                                * Tensor(r)).sum(),
                               [n(rng, 4, 3, 2, 2), n(rng, 3), n(rng, 3)])

    def relu(rng):
        r = n(rng, 3, 4)
        return check_gradients(lambda x: (F.relu(x) * Tensor(r)).sum(), [away_from(n(rng, 3, 4), 0.0, 1e-3)])

    def maxpool(rng):
        r = n(rng, 1, 2, 2, 2)
        return check_gradients(lambda x: (F.max_pool2d(x, 2) * Tensor(r)).sum(), [n(rng, 1, 2, 4, 4)])

    def gap(rng):
        r = n(rng, 2, 3)
        return check_gradients(lambda x: (F.global_avg_pool(x) * Tensor(r)).sum(), [n(rng, 2, 3, 3, 3)])

    def linear(rng):
        r = n(rng, 2, 4)
        return check_gradients(lambda x, w, b: (F.linear(x, w, b) * Tensor(r)).sum(),
                               [n(rng, 2, 3), n(rng, 4, 3), n(rng, 4)])

    def cross_entropy(rng):
        labels = rng.integers(0, 5, 4)
        return check_gradients(lambda z: F.softmax_cross_entropy(z, labels), [n(rng, 4, 5) * 3])

    def soft(rng):
        r = n(rng, 6)
        return check_gradients(lambda a: (softmax(a) * Tensor(r)).sum(), [n(rng, 6) * 2])

    def cwi(rng):
        c = int(rng.integers(1, 5))
        t = c + int(rng.integers(1, 5))
        r = n(rng, 2, t, 2, 2)
        return check_gradients(lambda x: (F.channel_interp(x, t) * Tensor(r)).sum(), [n(rng, 2, c, 2, 2)])

    def mixed(rng):
        cs = ChannelCandidateSet([2, 4, 6, 8])
        subset = tuple(sorted(rng.choice(4, 2, replace=False)))
        top = cs.counts[subset[-1]]
        r = n(rng, 2, top, 3, 3)

        def f(alphas, w, x):
            cs.alphas = alphas
            return (mix(F.conv2d(x, w, 1, 1), cs, subset) * Tensor(r)).sum()

        return check_gradients(f, [n(rng, 4), n(rng, top, 2, 3, 3), n(rng, 2, 2, 3, 3)])

    def arithmetic(rng):
        return check_gradients(lambda p, q, s: ((p * q - s) / q + (-p) * p).mean() + (p[1:] * 2).sum(),
                               [n(rng, 5), away_from(n(rng, 5), 0.0, 0.3), n(rng, 5)])

    def stacked(rng):
        r = n(rng, 3, 4)
        return check_gradients(lambda a, b, c: (stack([a, exp(b), c.reshape(4)]) * Tensor(r)).sum(),
                               [n(rng, 4), n(rng, 4), n(rng, 2, 2)])

    def pact_penalty(rng):
        coeff = rng.uniform(1e-4, 0.1)
        return check_gradients(lambda a, b: Q.pact_penalty([a, b], coeff), [rng.uniform(0.1, 5, 1),
                                                                          rng.uniform(0.1, 5, 1)])

    return {"conv2d": conv, "batch_norm": bn, "relu": relu, "max_pool2d": maxpool, "global_avg_pool": gap,
            "linear": linear, "cross_entropy": cross_entropy, "softmax": soft, "channel_interp": cwi,
            "mixed_output": mixed, "arithmetic": arithmetic, "stack/exp/reshape": stacked,
            "pact_penalty": pact_penalty, "activation_ste": _surrogate_check, "weight_ste": _weight_ste_check}


def test_03_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {}
    failures = []
    for name, check in list(_op_checks().items()) + [("cost_loss", None)]:
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        errs = []
        for i in range(100):
            errs.append(_cost_loss_check(rng, i) if check is None else check(rng))
        worst[name] = max(errs)
        if worst[name] > 1e-3:
            failures.append(name)
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    top = max(worst, key=worst.get)
    record(3, "gradient fidelity", ok,
           f"{len(worst)} ops x 100 instances, worst {worst[top]:.1e} ({top}), {elapsed:.0f} s"
           + (f", failing: {failures}" if failures else ""))
    assert ok


# -- 4 ------------------------------------------------------------------------------

def test_04_expansion_mechanics():
    rng = np.random.default_rng(0)
    arch = build_arch("resnet8", 16, input_size=8)
    layer = arch["s1.b1.conv1"]
    issues = {"a": 0, "b": 0, "c": 0}
    trials = 500
    for _ in range(trials):
        n = int(rng.integers(2, 17))
        cs = ChannelCandidateSet(list(range(2, 2 * n + 1, 2)), cap=16, step=2, alphas=rng.normal(0, 2, n))
        conv = SearchableConv(layer, cs, 16, 16, rng)
        threshold = float(rng.uniform(0.13, 0.9))
        mass = cs.max_mass()
        bank, gamma = conv.weight.values.copy(), conv.gamma.values.copy()
        fired = expand_if_preferred(cs, threshold, [conv], rng)
        if fired != (mass >= threshold and n < 16):
            issues["a"] += 1
        if fired:
            p = cs.probabilities()
            if abs(p[-1] - p[-2]) > 1e-6:
                issues["b"] += 1
            if not (np.array_equal(conv.weight.values[:2 * n], bank) and np.array_equal(conv.gamma.values[:2 * n], gamma)):
                issues["c"] += 1
    # (d) forced growth under the default configuration
    net = SuperNet(build_arch("resnet8", 16, input_size=8), rng)
    longest = 0
    for _ in range(40):
        for cs in net.candidates.values():
            if cs.searchable:
                cs.alphas.values[-1] = cs.alphas.values.max() + 5
        net.expand(resolve_config({}).search.threshold, rng)
        longest = max(longest, max(len(cs.counts) for cs in net.candidates.values()))
    ok = not any(issues.values()) and longest <= 16
    record(4, "expansion mechanics", ok,
           f"{trials} random trials, violations (a,b,c)={tuple(issues.values())}, max candidates {longest}")
    assert ok


# -- 5 ------------------------------------------------------------------------------

def test_05_one_hot_consistency():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(20):
        net = SuperNet(build_arch(["resnet8", "resnet20"][trial % 2], 16), rng)
        widths = {}
        for g, cs in net.candidates.items():
            k = int(rng.integers(len(cs.counts)))
            a = np.full(len(cs.counts), -100.0)
            a[k] = 100.0
            cs.alphas.values = a.astype(cs.alphas.values.dtype)
            widths[g] = cs.counts[k]
        exact = exact_cost(net.arch.with_widths(widths))
        report = expected_cost(net)
        worst = max(worst, abs(report.macs / exact.macs - 1), abs(report.params / exact.params - 1))
    exact_singleton = True
    for name in ("resnet8", "resnet20", "vgg16"):
        arch = build_arch(name, 8 if name != "vgg16" else None)
        net = SuperNet.standalone(arch, rng)
        rep, ref = expected_cost(net), exact_cost(arch)
        exact_singleton &= rep.macs == ref.macs and rep.params == ref.params
    ok = worst <= 1e-3 and exact_singleton
    record(5, "one-hot consistency", ok, f"worst saturated rel. gap {worst:.1e}, singleton exact={exact_singleton}")
    assert ok


# -- 6 ------------------------------------------------------------------------------

def test_06_kendall_oracle():
    rng = np.random.default_rng(0)
    mismatches = ties = 0
    for i in range(1000):
        n = int(rng.integers(2, 17))
        x = rng.integers(0, 5, n).astype(float) if i % 2 else np.arange(n, dtype=float)
        y = rng.integers(0, 4, n).astype(float) if i % 3 else rng.normal(size=n)
        expected, got = brute_kendall(x, y), A.kendall_tau(x, y)
        if expected is None:
            ties += 1
            mismatches += not (got.tied and got.tau == 0.0)
        else:
            mismatches += got.tau != pytest.approx(expected, abs=1e-12)
    ok = mismatches == 0
    record(6, "Kendall oracle", ok, f"1000 vectors, {mismatches} mismatches, {ties} undefined (all-tied) cases")
    assert ok


# -- shared toy runs (7-9) ----------------------------------------------------------

@pytest.fixture(scope="session")
def toy():
    cfg = parse_config(TOY)
    return cfg, load_dataset(cfg.dataset, cfg.dataset_seed)


@pytest.fixture(scope="session")
def toy_runs(toy):
    cfg, data = toy
    t0 = time.perf_counter()
    runs = {}
    for mode in ("nce", "prune-only", "random", "fixed"):
        for seed in SEEDS:
            runs[mode, seed] = P.run_experiment(cfg.replace(**{"mode": mode, "run.seed": seed}), data)
    return runs, time.perf_counter() - t0


def test_07_end_to_end_direction(toy_runs):
    runs, elapsed = toy_runs
    acc = {m: np.array([runs[m, s][0].accuracy for s in SEEDS]) for m in ("nce", "prune-only", "random", "fixed")}
    mean = {m: float(a.mean()) for m, a in acc.items()}
    pooled = math.sqrt(np.mean([a.var(ddof=1) for a in acc.values()]))
    checks = {
        "nce>=prune-only": mean["nce"] >= mean["prune-only"] - pooled,
        "nce>=random": mean["nce"] >= mean["random"] - pooled,
        "prune-only>=random": mean["prune-only"] >= mean["random"] - pooled,
        "nce-fixed>=0": mean["nce"] - mean["fixed"] >= -pooled,
    }
    strict = mean["nce"] >= max(mean["prune-only"], mean["random"], mean["fixed"])
    ok = all(checks.values()) and elapsed <= 45 * 60
    record(7, "end-to-end direction", ok,
           "means " + ", ".join(f"{m}={v:.3f}" for m, v in mean.items())
           + f"; pooled SD {pooled:.3f}; within-SD ordering {'holds' if all(checks.values()) else checks}"
           + f"; strict NCE-best {'yes' if strict else 'no'}; {elapsed / 60:.1f} min")
    assert ok


def test_08_quantization_preference(toy, toy_runs):
    cfg, data = toy
    runs, _ = toy_runs
    t0 = time.perf_counter()
    quantized, full = [], []
    for seed in range(3):
        quantized.append(A.kendall_report(runs["nce", seed][1].trace, True).mean)
        state = P.init_state(cfg.replace(**{"run.seed": seed, **FULL_PRECISION}), data)
        P.run_search(state)
        full.append(A.kendall_report(state.trace, False).mean)
    elapsed = time.perf_counter() - t0
    ok = np.mean(quantized) >= np.mean(full) and elapsed <= 30 * 60
    record(8, "quantization preference", ok,
           f"mean Kendall W2A2 {np.mean(quantized):.4f} vs FP {np.mean(full):.4f} "
           f"(per seed {np.round(quantized, 3).tolist()} vs {np.round(full, 3).tolist()}); {elapsed / 60:.1f} min")
    assert ok


def test_09_dynamic_range(toy, toy_runs):
    cfg, data = toy
    runs, _ = toy_runs
    probe = [data.x_test[i:i + 100] for i in range(0, len(data.x_test), 100)]
    wins = total = 0
    per_seed = []
    for seed in range(3):
        q_net = runs["fixed", seed][0].network
        fp_net = P.run_baseline("fixed", cfg.replace(**{"run.seed": seed, **FULL_PRECISION}), data).network
        sq = A.trained_activation_stdev(q_net, probe)
        sf = A.trained_activation_stdev(fp_net, probe)
        layers = [cid for cid, conv in q_net.convs.items() if conv.quantized]
        w = sum(sq[c] > sf[c] for c in layers)
        per_seed.append(f"{w}/{len(layers)}")
        wins += w
        total += len(layers)
    frac = wins / total
    ok = frac >= 0.6
    record(9, "dynamic-range direction", ok,
           f"W2A2 STDEV > FP STDEV in {frac:.0%} of quantized layers (per seed {', '.join(per_seed)})")
    assert ok


# -- 10 -----------------------------------------------------------------------------

def test_10_determinism(tmp_path):
    cfg = parse_config(TOY).replace(**{"search.warmup_epochs": 1, "search.search_epochs": 4,
                                      "search.retrain_epochs": 2, "dataset.train_samples": 300})
    data = load_dataset(cfg.dataset, cfg.dataset_seed)

    def full_run():
        state = P.init_state(cfg, data)
        P.run_search(state)
        P.derive_and_retrain(state)
        return state

    a, b = full_run(), full_run()
    ckpt = tmp_path / "ckpt.pkl"
    part = P.init_state(cfg, data)
    P.warmup(part)
    P.search_epoch(part)
    P.search_epoch(part)
    P.save_checkpoint(part, ckpt)
    resumed = P.load_checkpoint(ckpt, data)
    P.run_search(resumed)
    P.derive_and_retrain(resumed)
    rerun_ok = a.metrics == b.metrics and a.arch.to_dict() == b.arch.to_dict()
    resume_ok = resumed.metrics == a.metrics and resumed.arch.to_dict() == a.arch.to_dict()
    ok = rerun_ok and resume_ok
    record(10, "determinism", ok, f"full rerun identical={rerun_ok}, checkpoint resume identical={resume_ok}")
    assert ok


# -- 11 -----------------------------------------------------------------------------

def test_11_threshold_guard(tmp_path):
    rejected = []
    for n0, threshold in ((8, 0.125), (8, 0.1), (8, 0.0), (4, 0.25), (16, 0.05)):
        path = tmp_path / f"t{n0}-{threshold}.yaml"
        path.write_text(f"search:\n  initial_candidates: {n0}\n  threshold: {threshold}\n")
        try:
            parse_config(path)
        except ConfigError:
            rejected.append(True)
        else:
            rejected.append(False)
    accepted = parse_config(TOY).search.threshold == 0.3
    ok = all(rejected) and accepted
    record(11, "threshold guard", ok, f"{sum(rejected)}/{len(rejected)} configs with T <= 1/n0 rejected at parse time")
    assert ok
