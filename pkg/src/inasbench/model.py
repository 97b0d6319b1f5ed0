"""Network IR, Q-format fixed point, and tensor containers.

Activations and weights are int16 with a per-tensor ``frac_bits``; products
accumulate in int64 so any summation order gives the same integer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import NetworkValidationError, ParameterError, ShapeError

INT16_MIN = -32768
INT16_MAX = 32767


def _check_frac(frac_bits: int) -> None:
    if not isinstance(frac_bits, (int, np.integer)) or not 0 <= frac_bits <= 15:
        raise ParameterError(f"frac_bits must be an integer in [0, 15], got {frac_bits!r}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, frac_bits: int) -> np.ndarray:
    """Real values to saturated int16 at ``frac_bits`` fractional bits."""
    _check_frac(frac_bits)
    scaled = np.asarray(x, dtype=np.float64) * float(1 << frac_bits)
    return np.clip(round_half_away(scaled), INT16_MIN, INT16_MAX).astype(np.int16)


def dequantize(x, frac_bits: int) -> np.ndarray:
    _check_frac(frac_bits)
    return np.asarray(x, dtype=np.float64) / float(1 << frac_bits)


def requantize(acc: np.ndarray, shift: int) -> np.ndarray:
    """Divide an int64 accumulator by 2**shift, rounding half away from zero, then saturate."""
    acc = np.asarray(acc, dtype=np.int64)
    if shift > 0:
        mag = (np.abs(acc) + (1 << (shift - 1))) >> shift
        acc = np.where(acc < 0, -mag, mag)
    return np.clip(acc, INT16_MIN, INT16_MAX).astype(np.int16)


@dataclass(frozen=True, eq=False)
class QTensor:
    """Flat row-major int16 storage with a shape and a Q-format scale.

    Activations use ``(channels, height, width)``; weights use
    ``(c_out, c_in, k, k)`` for convolutions and ``(n_out, n_in)`` for FC.
    """

    shape: tuple
    data: np.ndarray
    frac_bits: int

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if any(d < 0 for d in shape):
            raise ShapeError(f"negative dimension in {shape}")
        _check_frac(self.frac_bits)
        raw = np.asarray(self.data)
        if raw.dtype.kind not in "iu":
            raise ParameterError(f"QTensor data must be integer, got {raw.dtype}")
        if raw.size and (raw.min() < INT16_MIN or raw.max() > INT16_MAX):
            raise ParameterError("QTensor element outside int16 range")
        data = raw.astype(np.int16).reshape(-1)
        if data.size != math.prod(shape):
            raise ShapeError(f"data length {data.size} != prod{shape}")
        data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "frac_bits", int(self.frac_bits))

    @classmethod
    def from_array(cls, arr, frac_bits: int) -> "QTensor":
        arr = np.asarray(arr)
        return cls(arr.shape, arr.reshape(-1), frac_bits)

    @classmethod
    def from_real(cls, x, frac_bits: int) -> "QTensor":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.shape, quantize(x, frac_bits), frac_bits)

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def to_real(self) -> np.ndarray:
        return dequantize(self.array(), self.frac_bits)

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.frac_bits == other.frac_bits
            and np.array_equal(self.data, other.data)
        )

    def __hash__(self):
        return hash((self.shape, self.frac_bits, self.data.tobytes()))

    def __repr__(self):
        return f"QTensor(shape={self.shape}, frac_bits={self.frac_bits})"


@dataclass(frozen=True)
class Conv2D:
    c_in: int
    c_out: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind = "conv2d"


@dataclass(frozen=True)
class MaxPool2D:
    window: int
    stride: int
    kind = "maxpool2d"


@dataclass(frozen=True)
class FullyConnected:
    n_in: int
    n_out: int
    kind = "fc"


LayerSpec = Union[Conv2D, MaxPool2D, FullyConnected]


@dataclass(frozen=True)
class LayerParams:
    """Weights of one conv/FC layer. A bias, if present, is at accumulator scale."""

    weight: QTensor
    bias: Optional[QTensor] = None


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    params: tuple
    output_classes: int
    act_frac_bits: int = 8

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "params", tuple(self.params))

    def shapes(self) -> list:
        """(input_shape, output_shape) per layer; raises ShapeError on a broken chain."""
        out = []
        shape = self.input_shape
        for layer in self.layers:
            nxt = conv_output_shape(layer, shape)
            out.append((shape, nxt))
            shape = nxt
        return out

    def output_shape(self) -> tuple:
        shapes = self.shapes()
        return shapes[-1][1] if shapes else self.input_shape


def conv_output_shape(layer: LayerSpec, in_shape: Sequence[int]) -> tuple:
    c, h, w = (int(d) for d in in_shape)
    if isinstance(layer, Conv2D):
        k, s, p = layer.kernel, layer.stride, layer.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"kernel {k} larger than padded input {(h + 2 * p, w + 2 * p)}")
        return (layer.c_out, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
    if isinstance(layer, MaxPool2D):
        k, s = layer.window, layer.stride
        if h < k or w < k:
            raise ShapeError(f"pool window {k} larger than input {(h, w)}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)
    if isinstance(layer, FullyConnected):
        if c * h * w != layer.n_in:
            raise ShapeError(f"FC expects {layer.n_in} inputs, got {c}x{h}x{w}")
        return (layer.n_out, 1, 1)
    raise ShapeError(f"unknown layer type {type(layer).__name__}")


def weight_shape(layer: LayerSpec) -> Optional[tuple]:
    if isinstance(layer, Conv2D):
        return (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
    if isinstance(layer, FullyConnected):
        return (layer.n_out, layer.n_in)
    return None


def out_channels(layer: LayerSpec, in_shape) -> int:
    if isinstance(layer, Conv2D):
        return layer.c_out
    if isinstance(layer, FullyConnected):
        return layer.n_out
    return int(in_shape[0])


@dataclass(frozen=True)
class Violation:
    layer: Optional[int]
    message: str

    def __str__(self):
        where = "network" if self.layer is None else f"layer {self.layer}"
        return f"{where}: {self.message}"


def _layer_violations(i, layer):
    found = []
    if isinstance(layer, Conv2D):
        if min(layer.c_in, layer.c_out) < 1:
            found.append(Violation(i, "channel counts must be >= 1"))
        if layer.kernel < 1 or layer.stride < 1:
            found.append(Violation(i, "kernel and stride must be >= 1"))
        if layer.padding < 0:
            found.append(Violation(i, "padding must be >= 0"))
        if layer.kernel % 2 == 0:
            found.append(Violation(i, f"kernel {layer.kernel} must be odd"))
    elif isinstance(layer, MaxPool2D):
        if layer.window < 1 or layer.stride < 1:
            found.append(Violation(i, "pool window and stride must be >= 1"))
    elif isinstance(layer, FullyConnected):
        if min(layer.n_in, layer.n_out) < 1:
            found.append(Violation(i, "n_in and n_out must be >= 1"))
    else:
        found.append(Violation(i, f"unknown layer type {type(layer).__name__}"))
    return found


def validate_network(net: NetworkSpec) -> list:
    """Every invariant violation of ``net``; an empty list means the net is valid."""
    found = []
    if not net.layers:
        found.append(Violation(None, "no layers"))
    if len(net.input_shape) != 3 or min(net.input_shape, default=0) < 1:
        found.append(Violation(None, f"input_shape {net.input_shape} must be three positive dims"))
    if not 0 <= net.act_frac_bits <= 15:
        found.append(Violation(None, "act_frac_bits must be in [0, 15]"))
    if len(net.params) != len(net.layers):
        found.append(Violation(None, f"{len(net.params)} param entries for {len(net.layers)} layers"))
    if found:
        return found

    shape = net.input_shape
    for i, layer in enumerate(net.layers):
        layer_found = _layer_violations(i, layer)
        found += layer_found
        if layer_found:
            return found
        if isinstance(layer, Conv2D) and shape[0] != layer.c_in:
            found.append(Violation(i, f"c_in {layer.c_in} != incoming channels {shape[0]}"))
        try:
            nxt = conv_output_shape(layer, shape)
        except ShapeError as exc:
            found.append(Violation(i, str(exc)))
            return found

        params = net.params[i]
        wshape = weight_shape(layer)
        if wshape is None:
            if params is not None:
                found.append(Violation(i, "pooling layer carries weights"))
        elif params is None:
            found.append(Violation(i, "missing weights"))
        else:
            if params.weight.shape != wshape:
                found.append(Violation(i, f"weight shape {params.weight.shape} != {wshape}"))
            if params.bias is not None:
                if params.bias.shape != (wshape[0],):
                    found.append(Violation(i, f"bias shape {params.bias.shape} != {(wshape[0],)}"))
                acc_frac = params.weight.frac_bits + net.act_frac_bits
                if params.bias.frac_bits != acc_frac:
                    found.append(Violation(i, f"bias frac_bits {params.bias.frac_bits} != accumulator scale {acc_frac}"))
        shape = nxt

    if not found and math.prod(shape) != net.output_classes:
        found.append(Violation(len(net.layers) - 1, f"output size {math.prod(shape)} != output_classes {net.output_classes}"))
    return found


def check_network(net: NetworkSpec) -> None:
    found = validate_network(net)
    if found:
        raise NetworkValidationError(found)


def layer_macs(layer: LayerSpec, in_shape) -> int:
    if isinstance(layer, Conv2D):
        _, h, w = conv_output_shape(layer, in_shape)
        return h * w * layer.c_out * layer.kernel * layer.kernel * layer.c_in
    if isinstance(layer, FullyConnected):
        return layer.n_in * layer.n_out
    return 0


def count_macs(net: NetworkSpec) -> tuple:
    """(per-layer MAC counts, total)."""
    check_network(net)
    per_layer = [layer_macs(layer, shp[0]) for layer, shp in zip(net.layers, net.shapes())]
    return per_layer, sum(per_layer)


def layer_param_count(params: Optional[LayerParams]) -> int:
    if params is None:
        return 0
    n = params.weight.data.size
    if params.bias is not None:
        n += params.bias.data.size
    return n


def count_params(net: NetworkSpec) -> int:
    check_network(net)
    return sum(layer_param_count(p) for p in net.params)
