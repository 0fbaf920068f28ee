"""FLOPs/PARAMs accounting and the hardware-constraint loss.

FLOPs are reported as multiply-accumulate counts (the convention under which
a CIFAR ResNet20 costs 40.81M). PARAMs count conv/linear weights, linear
biases and batch-norm affine parameters.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

from nce.arch import Arch
from nce.errors import ConfigError
from nce.tensor import Tensor, maximum0


@dataclass
class CostBudget:
    flop_target: float
    param_target: float
    lambda_flop: float = 2.0
    lambda_param: float = 2.0
    band: float = 0.05

    def __post_init__(self):
        if not (self.flop_target > 0 and self.param_target > 0):
            raise ConfigError("cost targets must be positive")
        if self.lambda_flop < 0 or self.lambda_param < 0:
            raise ConfigError("cost coefficients must be nonnegative")
        if not 0 <= self.band < 1:
            raise ConfigError("budget band must lie in [0, 1)")

    @classmethod
    def from_arch(cls, arch: Arch, resolution: Optional[int] = None, **kwargs) -> "CostBudget":
        report = exact_cost(arch, resolution)
        return cls(report.macs, report.params, **kwargs)


@dataclass
class LayerCost:
    layer: str
    macs: object  # float, or Tensor for expected costs
    params: object


@dataclass
class CostReport:
    layers: list = field(default_factory=list)
    marker: str = "exact"

    @property
    def total_macs(self):
        return _total(entry.macs for entry in self.layers)

    @property
    def total_params(self):
        return _total(entry.params for entry in self.layers)

    @property
    def macs(self) -> float:
        return _value(self.total_macs)

    @property
    def params(self) -> float:
        return _value(self.total_params)

    def rows(self):
        for entry in self.layers:
            yield {"layer": entry.layer, "macs": _value(entry.macs), "params": _value(entry.params),
                   "marker": self.marker}
        yield {"layer": "total", "macs": self.macs, "params": self.params, "marker": self.marker}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["layer", "macs", "params", "marker"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow(row)

    def summary(self) -> str:
        return f"FLOPs(MACs)={self.macs / 1e6:.2f}M PARAMs={self.params / 1e6:.2f}M ({self.marker})"


def _total(values):
    total = 0.0
    for v in values:
        total = v + total if isinstance(v, Tensor) else total + v
    return total


def _value(v) -> float:
    return float(v.values) if isinstance(v, Tensor) else float(v)


def layer_costs(arch: Arch, width: Callable, resolution: Optional[int] = None) -> list:
    """Per-layer (MACs, PARAMs) with channel counts supplied by ``width(layer)``.

    ``width`` may return plain numbers or differentiable tensors; the formulas
    only use + and *, so both paths share this code.
    """
    sizes = arch.spatial_sizes(resolution)
    out = []
    for layer in arch:
        if layer.type in ("add", "maxpool", "gap"):
            continue
        src = arch.width_source(layer.inputs[0])
        cin = arch.in_channels if src is None else width(src)
        cout = width(layer)
        if layer.type == "conv":
            k2 = layer.kernel * layer.kernel
            hw = sizes[layer.id] ** 2
            weights = cout * cin * k2
            macs = weights * hw
            params = weights + cout * 2  # batch-norm gamma and beta
        elif layer.type == "linear":
            macs = cout * cin
            params = macs + cout
        else:
            raise ConfigError(f"unknown layer type {layer.type!r}")
        out.append(LayerCost(layer.id, macs, params))
    return out


def exact_cost(arch: Arch, resolution: Optional[int] = None) -> CostReport:
    return CostReport(layer_costs(arch, lambda layer: layer.channels, resolution), "exact")


def expected_cost(supernet, resolution: Optional[int] = None) -> CostReport:
    """Expected MACs/PARAMs under the candidate softmax of every width group.

    Producer and consumer widths are treated as independent, so an edge costs
    E[c_in] * E[c_out]; the report is exact whenever every softmax is one-hot.
    """
    expected = {g: cs.expected_count() for g, cs in supernet.candidates.items()}

    def width(layer):
        if layer.type == "conv":
            return expected[layer.group]
        return layer.channels

    return CostReport(layer_costs(supernet.arch, width, resolution), "expected")


def band_hinge(ratio, band: float):
    """max(0, r - (1 + band)) + max(0, (1 - band) - r)."""
    if isinstance(ratio, Tensor):
        return maximum0(ratio - (1.0 + band)) + maximum0((1.0 - band) - ratio)
    return max(0.0, ratio - (1.0 + band)) + max(0.0, (1.0 - band) - ratio)


def cost_loss(report: CostReport, budget: CostBudget):
    flop_term = band_hinge(report.total_macs / budget.flop_target, budget.band)
    param_term = band_hinge(report.total_params / budget.param_target, budget.band)
    return flop_term * budget.lambda_flop + param_term * budget.lambda_param
