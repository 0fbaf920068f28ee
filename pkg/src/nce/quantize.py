"""Uniform fake quantization with straight-through gradients.

Activations use a PACT-style learned clip; weights use symmetric per-layer
max-scaled levels. Rounding is half-away-from-zero so level grids do not
depend on the platform's tie-breaking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from nce.errors import ConfigError, InputError, NumericError
from nce.optim import Parameter
from nce.tensor import Tensor

Bits = Union[int, str]
FULL = "full"
MIN_CLIP = 1e-3


@dataclass
class QuantConfig:
    weight_bits: Bits = 2
    activation_bits: Bits = 2
    pact_clip_init: float = 8.0
    pact_reg: float = 0.001
    excluded_layers: Optional[list] = None  # None: first, last and shortcut layers
    quantize_warmup: bool = True

    def __post_init__(self):
        for name in ("weight_bits", "activation_bits"):
            bits = getattr(self, name)
            if bits != FULL and not (isinstance(bits, int) and bits >= 2):
                raise ConfigError(f"quant.{name} must be an integer >= 2 or 'full', got {bits!r}")
        if not self.pact_clip_init > 0:
            raise ConfigError("quant.pact_clip_init must be positive")
        if self.pact_reg < 0:
            raise ConfigError("quant.pact_reg must be nonnegative")

    @property
    def enabled(self) -> bool:
        return self.weight_bits != FULL or self.activation_bits != FULL

    @property
    def tag(self) -> str:
        w = 32 if self.weight_bits == FULL else self.weight_bits
        a = 32 if self.activation_bits == FULL else self.activation_bits
        return f"W{w}A{a}"


class PactClip(Parameter):
    """Learnable positive activation clip, one per quantized input site."""

    def __init__(self, init: float = 8.0, name: str = "clip"):
        super().__init__(np.array([init]), learnable=True, name=name)

    def project(self):
        np.maximum(self.values, MIN_CLIP, out=self.values)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def activation_levels(clip: float, bits: int, dtype=np.float32) -> np.ndarray:
    n = 2 ** bits - 1
    alpha = np.asarray(clip, dtype=dtype)
    return alpha * (np.arange(n + 1, dtype=dtype) / dtype(n))


def weight_levels(scale: float, bits: int, dtype=np.float32) -> np.ndarray:
    m = 2 ** (bits - 1) - 1
    s = np.asarray(scale, dtype=dtype)
    return s * (np.arange(-m, m + 1, dtype=dtype) / dtype(m))


def quantize_activation(x: Tensor, clip: Tensor, bits: Bits) -> Tensor:
    """PACT quantizer: round(clamp(x, 0, a) * n / a) * a / n with n = 2^bits - 1.

    Backward: dy/dx = 1 on 0 < x < a, dy/da = 1 where x >= a (STE). The L2
    penalty on ``a`` lives in the training loss, not here.
    """
    if bits == FULL:
        return x
    if bits < 2:
        raise ConfigError(f"activation bits must be >= 2, got {bits}")
    alpha = clip.values.reshape(())
    if not alpha > 0:
        raise NumericError(f"PACT clip must be positive, got {float(alpha)}")
    dtype = x.values.dtype
    n = dtype.type(2 ** bits - 1)
    xv = x.values
    clamped = np.clip(xv, 0, alpha)
    q = round_half_away(clamped * (n / alpha))
    out = alpha * (q / n)
    inside = (xv > 0) & (xv < alpha)
    above = xv >= alpha

    def backward(g):
        return g * inside, np.array([(g * above).sum()], dtype=g.dtype).reshape(clip.shape)

    return Tensor.from_op(out.astype(dtype), (x, clip), backward, "pact")


def quantize_weight(w: Tensor, bits: Bits) -> Tensor:
    """Symmetric per-layer quantizer, scale = max|w|, identity straight-through."""
    if bits == FULL:
        return w
    if bits < 2:
        raise ConfigError(f"weight bits must be >= 2, got {bits}")
    wv = w.values
    scale = np.abs(wv).max() if wv.size else 0
    if scale == 0:
        return w
    dtype = wv.dtype
    m = dtype.type(2 ** (bits - 1) - 1)
    q = round_half_away(np.clip(wv / scale, -1, 1) * m)
    out = scale * (q / m)
    return Tensor.from_op(out.astype(dtype), (w,), lambda g: (g,), "weight_quant")


def pact_penalty(clips, coeff: float) -> Optional[Tensor]:
    """coeff * sum(a^2) over the clip parameters, or None when there are none."""
    total = None
    for c in clips:
        term = (c * c).sum() * coeff
        total = term if total is None else total + term
    return total


def sqnr(reference, quantized) -> float:
    """Signal-to-quantization-noise ratio in dB; +inf when the two agree."""
    ref = np.asarray(getattr(reference, "values", reference), dtype=np.float64)
    qv = np.asarray(getattr(quantized, "values", quantized), dtype=np.float64)
    if ref.shape != qv.shape:
        raise InputError(f"sqnr shape mismatch: {ref.shape} vs {qv.shape}")
    signal = float(np.sum(ref * ref))
    if signal == 0:
        raise InputError("sqnr reference has zero energy")
    noise = float(np.sum((ref - qv) ** 2))
    if noise == 0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


def activation_stdev(x) -> float:
    """Population standard deviation over all elements."""
    v = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if v.size == 0:
        raise InputError("activation_stdev of an empty tensor")
    return float(v.std())
