"""Channel candidate sets, the sampled mixed-output convolution, expansion and
winner-takes-all derivation."""
from __future__ import annotations

import logging
import math
from typing import Optional, Sequence

import numpy as np

from nce import functional as F
from nce import quantize as Q
from nce.arch import Arch, Layer
from nce.errors import UsageError
from nce.optim import Parameter
from nce.tensor import Tensor, softmax

log = logging.getLogger(__name__)

DEFAULT_INITIAL = 8
DEFAULT_CAP = 16


def initial_counts(seed_width: int, n0: int = DEFAULT_INITIAL) -> list:
    """Evenly spaced counts at ratios 1/n0 .. n0/n0 of the seed width.

    Rounding is half-up and clamped to >= 1; duplicates produced by narrow
    seeds are dropped so the list stays strictly ascending.
    """
    counts = sorted({max(1, int(math.floor(seed_width * i / n0 + 0.5))) for i in range(1, n0 + 1)})
    return counts


def expansion_step(seed_width: int, n0: int = DEFAULT_INITIAL) -> int:
    return max(1, int(math.floor(seed_width / n0 + 0.5)))


class ChannelCandidateSet:
    """Ascending channel counts with one search parameter per count."""

    def __init__(self, counts: Sequence[int], cap: int = DEFAULT_CAP, step: int = 1,
                 alphas: Optional[np.ndarray] = None, learnable: bool = True, name: str = ""):
        counts = [int(c) for c in counts]
        if not counts or any(c < 1 for c in counts) or any(b <= a for a, b in zip(counts, counts[1:])):
            raise UsageError(f"candidate counts must be positive and strictly ascending, got {counts}")
        if len(counts) > cap:
            raise UsageError(f"{len(counts)} candidates exceed the cap of {cap}")
        self.counts = counts
        self.cap = cap
        self.step = step
        self.name = name
        init = np.zeros(len(counts)) if alphas is None else np.asarray(alphas)
        self.alphas = Parameter(init, learnable=learnable and len(counts) > 1, name=f"{name}.alpha")

    @classmethod
    def for_seed(cls, seed_width: int, n0: int = DEFAULT_INITIAL, cap: int = DEFAULT_CAP, name: str = ""):
        return cls(initial_counts(seed_width, n0), cap, expansion_step(seed_width, n0), name=name)

    @classmethod
    def singleton(cls, count: int, name: str = ""):
        return cls([count], cap=1, step=0, learnable=False, name=name)

    def __len__(self):
        return len(self.counts)

    def __repr__(self):
        return f"ChannelCandidateSet({self.name!r}, counts={self.counts})"

    @property
    def searchable(self) -> bool:
        return len(self.counts) > 1 or self.cap > 1

    @property
    def max_count(self) -> int:
        return self.counts[-1]

    def max_possible(self, expandable: bool = True) -> int:
        if not expandable:
            return self.counts[-1]
        return self.counts[-1] + max(0, self.cap - len(self.counts)) * self.step

    def probabilities(self) -> np.ndarray:
        a = self.alphas.values.astype(np.float64)
        e = np.exp(a - a.max())
        return e / e.sum()

    def max_mass(self) -> float:
        return float(self.probabilities()[-1])

    def softmax(self) -> Tensor:
        return softmax(self.alphas)

    def expected_count(self):
        """Softmax-weighted channel count; a plain int for singleton sets."""
        if len(self.counts) == 1:
            return float(self.counts[0])
        counts = np.asarray(self.counts, dtype=self.alphas.values.dtype)
        return (self.softmax() * counts).sum()

    def chosen_index(self) -> int:
        # np.argmax returns the first maximum, i.e. the smaller count on ties
        return int(np.argmax(self.alphas.values))

    def chosen_count(self) -> int:
        return self.counts[self.chosen_index()]

    def append(self) -> int:
        """Add the next count of the arithmetic grid, copying the last alpha."""
        new = self.counts[-1] + self.step
        self.counts.append(new)
        self.alphas.grow(0, self.alphas.values[-1:].copy())
        return new


def sample_candidates(cs: ChannelCandidateSet, k: int, rng: np.random.Generator,
                      uniform: bool = False) -> tuple:
    """Draw min(k, |C|) distinct candidate indices without replacement.

    Search draws are weighted by softmax(alphas); warm-up draws are uniform.
    """
    if k < 1:
        raise UsageError("sample size must be >= 1")
    n = len(cs.counts)
    if n == 1:
        return (0,)
    size = min(k, n)
    p = None if uniform else cs.probabilities()
    picked = rng.choice(n, size=size, replace=False, p=p)
    return tuple(sorted(int(i) for i in picked))


def cwi(output: Tensor, target_channels: int) -> Tensor:
    """Channel-wise interpolation of [N,c,H,W] up to ``target_channels``."""
    return F.channel_interp(output, target_channels)


def mixture_weights(cs: ChannelCandidateSet, subset: Sequence[int]) -> Tensor:
    """softmax over the sampled alphas only."""
    return softmax(cs.alphas[list(subset)])


def mix(output: Tensor, cs: ChannelCandidateSet, subset: Sequence[int]) -> Tensor:
    """Sum_j w_j * CWI(output[:, :c_j], max c) for a full-width ``output``."""
    if len(subset) == 1:
        return output
    counts = [cs.counts[i] for i in subset]
    top = max(counts)
    weights = mixture_weights(cs, subset)
    total = None
    for j, c in enumerate(counts):
        part = output if c == top else cwi(output[:, :c], top)
        term = part * weights[j]
        total = term if total is None else total + term
    return total


class SearchableConv:
    """Conv + batch norm over a weight bank sliced per sampled candidate.

    The bank's output extent always equals the group's largest count; its
    input extent is allocated up front for the producer's largest possible
    width so expansions never have to touch consumers.
    """

    def __init__(self, layer: Layer, candidates: ChannelCandidateSet, cin_cap: int, seed_cin: int,
                 rng: np.random.Generator, quant: Optional[Q.QuantConfig] = None, quantized: bool = False):
        self.layer = layer
        self.candidates = candidates
        k = layer.kernel
        cout = candidates.max_count
        std = math.sqrt(2.0 / (seed_cin * k * k))
        self.weight = Parameter(rng.normal(0.0, std, (cout, cin_cap, k, k)), name=f"{layer.id}.weight")
        self.gamma = Parameter(np.ones(cout), name=f"{layer.id}.bn.gamma")
        self.beta = Parameter(np.zeros(cout), name=f"{layer.id}.bn.beta")
        self.running_mean = np.zeros(cout, dtype=self.weight.values.dtype)
        self.running_var = np.ones(cout, dtype=self.weight.values.dtype)
        self.quantized = quantized and quant is not None and quant.enabled
        self.weight_bits = quant.weight_bits if self.quantized else Q.FULL
        self.activation_bits = quant.activation_bits if self.quantized else Q.FULL
        self.clip = None
        if self.quantized and self.activation_bits != Q.FULL:
            self.clip = Q.PactClip(quant.pact_clip_init, name=f"{layer.id}.clip")

    @property
    def id(self) -> str:
        return self.layer.id

    def parameters(self):
        params = [self.weight, self.gamma, self.beta]
        return params + [self.clip] if self.clip is not None else params

    def conv_output(self, x: Tensor, width: int, quantize: bool = True) -> Tensor:
        """Pre-normalization output for the first ``width`` filters (Q(X) * Q(W))."""
        w = self.weight[:width, :x.shape[1]]
        if quantize and self.quantized:
            if self.clip is not None:
                x = Q.quantize_activation(x, self.clip, self.activation_bits)
            w = Q.quantize_weight(w, self.weight_bits)
        return F.conv2d(x, w, self.layer.stride, self.layer.padding)

    def mixed_output(self, x: Tensor, subset: Sequence[int], quantize: bool = True) -> Tensor:
        top = max(self.candidates.counts[i] for i in subset)
        return mix(self.conv_output(x, top, quantize), self.candidates, subset)

    def forward(self, x: Tensor, subset: Sequence[int], training: bool, quantize: bool = True) -> Tensor:
        out = self.mixed_output(x, subset, quantize)
        c = out.shape[1]
        return F.batch_norm(out, self.gamma[:c], self.beta[:c], self.running_mean[:c],
                            self.running_var[:c], training)

    def grow(self, extra: int, rng: np.random.Generator):
        """Append ``extra`` freshly initialised filters (std of the existing bank)."""
        bank = self.weight.values
        std = float(bank.std()) or math.sqrt(2.0 / bank[0].size)
        self.weight.grow(0, rng.normal(0.0, std, (extra,) + bank.shape[1:]))
        self.gamma.grow(0, np.ones(extra))
        self.beta.grow(0, np.zeros(extra))
        dtype = self.running_mean.dtype
        self.running_mean = np.concatenate([self.running_mean, np.zeros(extra, dtype)])
        self.running_var = np.concatenate([self.running_var, np.ones(extra, dtype)])


def expand_if_preferred(cs: ChannelCandidateSet, threshold: float, layers: Sequence[SearchableConv] = (),
                        rng: Optional[np.random.Generator] = None) -> bool:
    """Append a larger candidate when the largest count's full-set softmax mass
    reaches ``threshold``; returns whether the set grew."""
    if cs.max_mass() < threshold:
        return False
    if len(cs.counts) >= cs.cap:
        log.info("candidate set %s saturated at %d candidates (max mass %.3f)", cs.name, cs.cap, cs.max_mass())
        return False
    old = cs.max_count
    new = cs.append()
    rng = rng if rng is not None else np.random.default_rng(0)
    for layer in layers:
        layer.grow(new - old, rng)
    log.debug("expanded %s: %d -> %d channels", cs.name, old, new)
    return True


def derive_architecture(supernet) -> Arch:
    """Winner-takes-all: per group, the count with the largest softmax mass
    (ties go to the smaller count)."""
    widths = {g: cs.chosen_count() for g, cs in supernet.candidates.items()}
    return supernet.arch.with_widths(widths, name=f"{supernet.arch.name}-derived")
