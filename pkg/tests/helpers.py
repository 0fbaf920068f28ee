"""Independent oracles and finite-difference tooling shared by the tests."""
import itertools
import math

import numpy as np

from nce.tensor import Tensor, precision

FD_EPS = 1e-6
REL_TOL = 1e-3


def naive_conv2d(x, w, stride=1, padding=0):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for k in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, k, i * stride + u, j * stride + v] * w[o, k, u, v]
                    out[b, o, i, j] = acc
    return out


def brute_kendall(x, y):
    """Tau-b by explicit pair enumeration."""
    concordant = discordant = tie_x = tie_y = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        dx = x[i] - x[j]
        dy = y[i] - y[j]
        if dx == 0 and dy == 0:
            tie_x += 1
            tie_y += 1
        elif dx == 0:
            tie_x += 1
        elif dy == 0:
            tie_y += 1
        elif dx * dy > 0:
            concordant += 1
        else:
            discordant += 1
    n0 = len(x) * (len(x) - 1) // 2
    denom = math.sqrt((n0 - tie_x) * (n0 - tie_y))
    if denom == 0:
        return None
    return (concordant - discordant) / denom


def hand_resnet_cost(blocks, widths=(16, 32, 64), classes=10, size=32, in_ch=3):
    """Closed-form MACs/params of a CIFAR ResNet, written out layer by layer."""
    macs = params = 0

    def conv(cin, cout, k, hw):
        nonlocal macs, params
        macs += cin * cout * k * k * hw * hw
        params += cin * cout * k * k + 2 * cout

    conv(in_ch, widths[0], 3, size)
    hw, cin = size, widths[0]
    for s, cout in enumerate(widths):
        for b in range(blocks):
            stride = 2 if s > 0 and b == 0 else 1
            hw_out = (hw + 2 - 3) // stride + 1
            conv(cin, cout, 3, hw_out)
            conv(cout, cout, 3, hw_out)
            if stride == 2:
                conv(cin, cout, 1, hw_out)
            hw, cin = hw_out, cout
    macs += cin * classes
    params += cin * classes + classes
    return macs, params


def numeric_grad(f, arrays, index, eps=FD_EPS):
    """Central difference of scalar f(arrays) w.r.t. arrays[index], elementwise."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        k = it.multi_index
        old = base[k]
        base[k] = old + eps
        plus = f(arrays)
        base[k] = old - eps
        minus = f(arrays)
        base[k] = old
        grad[k] = (plus - minus) / (2 * eps)
    return grad


def rel_error(a, b, floor=1e-4):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_gradients(build, arrays, wrt=None, tol=REL_TOL):
    """Compare autodiff gradients of ``build(*tensors) -> scalar Tensor`` with
    central differences in float64. Returns the worst relative error."""
    wrt = range(len(arrays)) if wrt is None else wrt
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with precision(np.float64):
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = build(*tensors)
        out.backward()

        def f(arrs):
            return float(build(*[Tensor(a) for a in arrs]).values)

        worst = 0.0
        for i in wrt:
            num = numeric_grad(f, arrays, i)
            ana = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
            worst = max(worst, rel_error(ana, num))
    assert worst <= tol, f"gradient mismatch: relative error {worst:.2e}"
    return worst


def away_from(values, points, margin):
    """Nudge entries closer than ``margin`` to any kink point."""
    v = np.array(values, dtype=np.float64)
    for p in np.atleast_1d(points):
        close = np.abs(v - p) < margin
        v[close] = p + np.where(v[close] >= p, margin, -margin) * 2
    return v


def tiny_config(**overrides):
    """A seconds-scale experiment: ResNet8 at width 4 on 8x8 synthetic images."""
    from nce.config import resolve_config

    base = {
        "model": {"arch": "resnet8", "seed_width": 4},
        "dataset": {"kind": "synthetic-images", "train_samples": 64, "test_samples": 32,
                    "image_size": 8, "noise": 1.0},
        "search": {"warmup_epochs": 1, "search_epochs": 2, "retrain_epochs": 1, "batch_size": 16},
    }
    return resolve_config(base).replace(**overrides)


ACCEPTANCE_RESULTS = {}


def record(number, title, ok, detail):
    """Store an acceptance outcome for the terminal summary and echo it."""
    ACCEPTANCE_RESULTS[number] = (bool(ok), title, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
    return bool(ok)
