"""Supernet over an :class:`~nce.arch.Arch`; a standalone network is the same
object with singleton candidate sets."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from nce import functional as F
from nce.arch import Arch
from nce.errors import ConfigError
from nce.optim import Parameter
from nce.quantize import QuantConfig
from nce.searchspace import (
    DEFAULT_CAP,
    DEFAULT_INITIAL,
    ChannelCandidateSet,
    SearchableConv,
    expand_if_preferred,
    sample_candidates,
)
from nce.tensor import Tensor, no_grad


def excluded_layer_ids(arch: Arch, override=None) -> set:
    """Layers run in full precision: first, last and shortcut layers unless overridden."""
    if override is not None:
        unknown = set(override) - {layer.id for layer in arch}
        if unknown:
            raise ConfigError(f"quant.excluded_layers names unknown layers {sorted(unknown)}")
        return set(override)
    return {layer.id for layer in arch if layer.type in ("conv", "linear") and layer.quant_excluded}


class SuperNet:
    def __init__(self, arch: Arch, rng: np.random.Generator, quant: Optional[QuantConfig] = None,
                 search: bool = True, n0: int = DEFAULT_INITIAL, cap: int = DEFAULT_CAP,
                 expandable: bool = True):
        self.arch = arch
        self.quant = quant or QuantConfig("full", "full")
        self.expandable = expandable
        self.candidates = {}
        for group in arch.groups:
            width = arch.group_members(group)[0].channels
            if search and group in arch.searchable_groups:
                cs = ChannelCandidateSet.for_seed(width, n0, cap if expandable else n0, name=group)
                if not expandable:
                    cs.cap = len(cs.counts)
            else:
                cs = ChannelCandidateSet.singleton(width, name=group)
            self.candidates[group] = cs

        excluded = excluded_layer_ids(arch, self.quant.excluded_layers)
        self.convs = {}
        for layer in arch.convs:
            src = arch.width_source(layer.inputs[0])
            seed_cin = arch.in_channels_of(layer)
            cin_cap = seed_cin if src is None else self._width_cap(src)
            self.convs[layer.id] = SearchableConv(layer, self.candidates[layer.group], cin_cap, seed_cin,
                                                  rng, self.quant, quantized=layer.id not in excluded)
        fc = arch["fc"]
        src = arch.width_source(fc.inputs[0])
        fan_in = src.channels
        bound = 1.0 / math.sqrt(fan_in)
        self.fc_weight = Parameter(rng.uniform(-bound, bound, (fc.channels, self._width_cap(src))), name="fc.weight")
        self.fc_bias = Parameter(rng.uniform(-bound, bound, fc.channels), name="fc.bias")

    @classmethod
    def standalone(cls, arch: Arch, rng: np.random.Generator, quant: Optional[QuantConfig] = None):
        return cls(arch, rng, quant, search=False)

    def _width_cap(self, layer) -> int:
        if layer.type != "conv":
            return layer.channels
        return self.candidates[layer.group].max_possible(self.expandable)

    # -- parameter groups ---------------------------------------------------
    def weight_parameters(self) -> list:
        params = []
        for conv in self.convs.values():
            params.extend(conv.parameters())
        return params + [self.fc_weight, self.fc_bias]

    def clips(self) -> list:
        return [conv.clip for conv in self.convs.values() if conv.clip is not None]

    def arch_parameters(self) -> list:
        return [cs.alphas for cs in self.candidates.values() if cs.alphas.learnable]

    @property
    def searchable_groups(self) -> list:
        return [g for g, cs in self.candidates.items() if len(cs.counts) > 1 or cs.cap > 1]

    # -- forward ------------------------------------------------------------
    def full_subsets(self) -> dict:
        """Subsets that select only the largest candidate of every group."""
        return {g: (len(cs.counts) - 1,) for g, cs in self.candidates.items()}

    def sample(self, rng: np.random.Generator, k: int, uniform: bool = False) -> dict:
        return {g: sample_candidates(cs, k, rng, uniform) for g, cs in self.candidates.items()}

    def forward(self, x, subsets: Optional[dict] = None, training: bool = True, quantize: bool = True,
                record: Optional[dict] = None) -> Tensor:
        """Logits for a batch; ``record`` (if given) collects every conv input."""
        subsets = subsets or self.full_subsets()
        outs = {"input": x if isinstance(x, Tensor) else Tensor(x)}
        for layer in self.arch:
            src = outs[layer.inputs[0]]
            if layer.type == "conv":
                if record is not None:
                    record[layer.id] = src
                out = self.convs[layer.id].forward(src, subsets[layer.group], training, quantize)
                if layer.relu:
                    out = F.relu(out)
            elif layer.type == "add":
                other = outs[layer.inputs[1]]
                if other.shape != src.shape:
                    raise ConfigError(f"residual shapes differ at {layer.id}: {src.shape} vs {other.shape}")
                out = src + other
                if layer.relu:
                    out = F.relu(out)
            elif layer.type == "maxpool":
                out = F.max_pool2d(src, layer.kernel)
            elif layer.type == "gap":
                out = F.global_avg_pool(src)
            elif layer.type == "linear":
                out = F.linear(src, self.fc_weight[:, :src.shape[1]], self.fc_bias)
            else:
                raise ConfigError(f"unknown layer type {layer.type!r}")
            outs[layer.id] = out
        return outs[self.arch.layers[-1].id]

    __call__ = forward

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        chunks = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                chunks.append(self.forward(x[i:i + batch_size], training=False).values)
        return np.concatenate(chunks)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict_logits(x).argmax(axis=1) == y).mean())

    # -- structural changes -------------------------------------------------
    def expand(self, threshold: float, rng: np.random.Generator) -> dict:
        """Run the expansion check on every searchable group; returns group -> expanded."""
        result = {}
        for g in self.searchable_groups:
            layers = [self.convs[layer.id] for layer in self.arch.group_members(g)]
            result[g] = expand_if_preferred(self.candidates[g], threshold, layers, rng)
        return result

    # -- state --------------------------------------------------------------
    def state_dict(self) -> dict:
        state = {"candidates": {g: {"counts": list(cs.counts), "cap": cs.cap, "step": cs.step,
                                    "alphas": cs.alphas.values.copy(),
                                    "alpha_state": _copy_state(cs.alphas.state)}
                                for g, cs in self.candidates.items()},
                 "params": {}, "buffers": {}}
        for p in self.weight_parameters():
            state["params"][p.name] = (p.values.copy(), _copy_state(p.state))
        for cid, conv in self.convs.items():
            state["buffers"][cid] = (conv.running_mean.copy(), conv.running_var.copy())
        return state

    def load_state_dict(self, state: dict):
        for g, d in state["candidates"].items():
            cs = self.candidates[g]
            grow = len(d["counts"]) - len(cs.counts)
            cs.counts = list(d["counts"])
            cs.cap, cs.step = d["cap"], d["step"]
            cs.alphas.values = d["alphas"].copy()
            cs.alphas.state = _copy_state(d["alpha_state"])
            if grow:
                for layer in self.arch.group_members(g):
                    conv = self.convs[layer.id]
                    extra = cs.max_count - conv.weight.shape[0]
                    if extra > 0:
                        conv.grow(extra, np.random.default_rng(0))
        params = {p.name: p for p in self.weight_parameters()}
        for name, (values, pstate) in state["params"].items():
            params[name].values = values.copy()
            params[name].state = _copy_state(pstate)
            params[name].grad = None
        for cid, (mean, var) in state["buffers"].items():
            self.convs[cid].running_mean = mean.copy()
            self.convs[cid].running_var = var.copy()


def _copy_state(state: dict) -> dict:
    return {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in state.items()}
