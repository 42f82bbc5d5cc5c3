"""Symmetric round-to-nearest quantization with group-wise max-abs scales.

Weights are grouped along their input-channel axis: each group of
`group_size` consecutive input channels (per output channel) shares one
scale s = max|w| / clip_n, where clip_n = 2^(bits-1) - 1. Codes are
round-half-away-from-zero of w/s, clipped to [-clip_n, clip_n]. The zero
point is always zero.

`fake_quant` wires the quantize/dequantize pair into the autodiff tape
with a straight-through backward: the rounding is treated as identity so
upstream gradients pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor

# Scale assigned to a group whose weights are all exactly zero.
ZERO_GROUP_SCALE = np.float32(1e-8)


@dataclass(frozen=True)
class QuantSpec:
    """Bit width, grouping and clipping configuration for one tensor."""

    n_bits: int
    group_size: int = -1
    axis: int = 0  # input-channel axis of the weight

    def __post_init__(self):
        if self.n_bits < 2:
            raise ContractError(f"n_bits must be >= 2, got {self.n_bits}")
        if self.group_size != -1 and self.group_size < 1:
            raise ContractError(f"group_size must be -1 or >= 1, got {self.group_size}")

    @property
    def clip_n(self) -> int:
        return 2 ** (self.n_bits - 1) - 1

    def groups_for(self, channels: int) -> int:
        """Number of groups along an input-channel axis of this extent."""
        if self.group_size == -1:
            return 1
        if self.group_size > channels:
            raise ShapeError(
                f"group_size {self.group_size} exceeds channel count {channels}"
            )
        if channels % self.group_size != 0:
            raise ShapeError(
                f"group_size {self.group_size} does not divide channel count {channels}"
            )
        return channels // self.group_size


@dataclass
class QuantizedTensor:
    """Integer codes plus per-group scales; logically the same shape as the source."""

    q: np.ndarray  # int32, source shape
    scales: np.ndarray  # float32, (n_groups, other_elements)
    spec: QuantSpec
    shape: tuple = field(default=None)

    def __post_init__(self):
        if self.shape is None:
            self.shape = self.q.shape


def _grouped_view(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Reshape to (n_groups, group_size, other) with the grouping axis leading."""
    moved = np.moveaxis(w, spec.axis, 0)
    c = moved.shape[0]
    n_groups = spec.groups_for(c)
    gsz = c // n_groups
    return moved.reshape(n_groups, gsz, -1), moved.shape


def _ungroup(grouped: np.ndarray, moved_shape, spec: QuantSpec) -> np.ndarray:
    return np.moveaxis(grouped.reshape(moved_shape), 0, spec.axis)


def compute_scales(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Per-group symmetric scale: max|w| over the group divided by clip_n."""
    w = np.asarray(w, dtype=np.float32)
    if not np.all(np.isfinite(w)):
        raise NumericError("compute_scales: input contains non-finite values")
    grouped, _ = _grouped_view(w, spec)
    maxabs = np.abs(grouped).max(axis=1)
    scales = maxabs / np.float32(spec.clip_n)
    # Floor covers all-zero groups and subnormal maxima whose division by
    # clip_n underflows to exactly zero.
    scales[scales == 0.0] = ZERO_GROUP_SCALE
    return scales.astype(np.float32)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.trunc(x + np.copysign(np.float32(0.5), x))


def quantize(v: np.ndarray, scales: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    """Round-to-nearest codes in [-clip_n, clip_n]."""
    v = np.asarray(v, dtype=np.float32)
    if np.any(scales <= 0.0):
        raise ContractError("quantize: scales must be strictly positive")
    grouped, moved_shape = _grouped_view(v, spec)
    ratio = grouped / scales[:, None, :]
    codes = np.clip(
        _round_half_away(ratio), -np.float32(spec.clip_n), np.float32(spec.clip_n)
    ).astype(np.int32)
    q = _ungroup(codes, moved_shape, spec)
    return QuantizedTensor(q=q, scales=np.asarray(scales, dtype=np.float32), spec=spec)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    """Reconstruct float32 values: code times its group scale."""
    grouped, moved_shape = _grouped_view(qt.q, qt.spec)
    vals = grouped.astype(np.float32) * qt.scales[:, None, :]
    return _ungroup(vals, moved_shape, qt.spec)


def fake_quant_array(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Quantize-then-dequantize with scales recomputed from w."""
    scales = compute_scales(w, spec)
    return dequantize(quantize(w, scales, spec))


def fake_quant(w: Tensor, spec: QuantSpec) -> Tensor:
    """Simulated quantization on the tape; straight-through gradient."""
    data = fake_quant_array(w.data, spec)

    def backward(out):
        w._accum(out.grad)

    return w._make(data, (w,), backward)


def quant_mse(w: np.ndarray, spec: QuantSpec) -> float:
    """Mean squared reconstruction error of fake-quantizing w."""
    w = np.asarray(w, dtype=np.float32)
    err = w - fake_quant_array(w, spec)
    return float(np.mean(err.astype(np.float64) ** 2))
