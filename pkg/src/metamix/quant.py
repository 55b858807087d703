"""Uniform fake quantizers with trainable step sizes (LSQ-style gradients)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, as_tensor

STEP_FLOOR = 1e-8
FIRST_LAST_BITS = 8


@dataclass
class QuantSpec:
    """Bit-width, signedness and step size of one quantizer.

    The representable levels are ``step * k`` for integer ``k`` in
    ``[qmin, qmax]``; the range width is ``(2**bits - 1) * step``.
    """

    bits: int
    signed: bool = False
    step: Tensor = field(default=None)
    trainable: bool = True
    grad_scale: bool = True

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 2:
            raise ValueError(f"bits must be an integer >= 2, got {self.bits}")
        self.bits = int(self.bits)
        if self.step is None:
            self.step = Tensor(1.0)
        elif not isinstance(self.step, Tensor):
            self.step = Tensor(self.step)
        if self.step.size != 1:
            raise ValueError("step must be a scalar")
        self.step.data = self.step.data.reshape(())
        if not self.step.data > 0:
            raise ValueError(f"step must be positive, got {float(self.step.data)}")
        self.step.requires_grad = self.trainable

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2 ** self.bits - 1

    @property
    def range_width(self) -> float:
        return (self.qmax - self.qmin) * float(self.step.data)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.step.requires_grad = flag

    def initialize(self, x_sample) -> None:
        self.step.data[...] = init_step(x_sample, self.bits, signed=self.signed)

    def clamp_step(self, floor: float = STEP_FLOOR) -> None:
        np.maximum(self.step.data, floor, out=self.step.data)


def init_step(x_sample, bits: int, signed: bool = False) -> float:
    """LSQ step initialisation ``2 * mean|x| / sqrt(Q_P)``.

    ``Q_P`` is the largest positive level: ``2**bits - 1`` unsigned,
    ``2**(bits-1) - 1`` signed.  Falls back to 1.0 for an all-zero sample.
    """
    x = np.asarray(x_sample.data if isinstance(x_sample, Tensor) else x_sample, dtype=np.float64)
    if x.size == 0:
        raise ValueError("init_step needs a non-empty sample")
    q_pos = 2 ** (bits - 1) - 1 if signed else 2 ** bits - 1
    if q_pos < 1:
        raise ValueError(f"signed quantizer needs bits >= 2, got {bits}")
    m = float(np.abs(x).mean())
    if m == 0.0:
        return 1.0
    return 2.0 * m / math.sqrt(q_pos)


def quantize(x, spec: QuantSpec, n_features: int | None = None) -> Tensor:
    """Fake-quantize ``x`` with ``spec``.

    Forward: ``step * clamp(round(x / step), qmin, qmax)``.  Backward:
    straight-through for ``x`` inside the range, zero outside; for the step
    ``round(x/step) - x/step`` inside and the clamp level outside, summed and
    optionally scaled by ``1 / sqrt(n_features * qmax)``.  ``n_features``
    defaults to ``x.size``.
    """
    x = as_tensor(x)
    step = spec.step
    s = step.data
    if not s > 0:
        raise ValueError(f"quantize: step must be positive, got {float(s)}")
    qmin, qmax = spec.qmin, spec.qmax
    v = x.data / s
    levels = np.clip(np.round(v), qmin, qmax)
    out = levels * s
    scale = 1.0
    if spec.grad_scale:
        scale = 1.0 / math.sqrt((n_features or x.size) * qmax)

    def backward(g):
        inside = (v >= qmin) & (v <= qmax)
        gx = g * inside
        # per element: levels - v inside the range, the clamp level outside
        gs = (np.vdot(g, levels) - np.vdot(gx, v)) * scale
        return gx, np.asarray(gs, dtype=s.dtype).reshape(s.shape)

    return Tensor._from_op(out, (x, step), backward)


def quantize_weights(w, spec: QuantSpec) -> Tensor:
    """Signed symmetric fake quantization of a weight tensor."""
    if not spec.signed:
        raise ValueError("weight quantizers must be signed")
    return quantize(w, spec)


def first_last_spec(signed: bool, step: float = 1.0) -> QuantSpec:
    """Fixed 8-bit spec used for the first and last layers."""
    return QuantSpec(FIRST_LAST_BITS, signed=signed, step=step)
