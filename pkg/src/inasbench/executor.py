"""Reference and tiled executors plus VM footprint accounting.

The tiled executor walks the inter-tile loop nest of every layer in the
design's loop order. One atomic unit computes one complete output tile:
fetch the input halo and the weight block, run the MAC loop, write the
tile to VM. There is no input-channel tiling, so a unit never leaves a
partial sum behind.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DesignError, ShapeError
from .model import (
    Conv2D,
    FullyConnected,
    MaxPool2D,
    NetworkSpec,
    QTensor,
    check_network,
    requantize,
)

BYTES_PER_ELEMENT = 2
SNAPSHOT_BYTES = 16
LOOP_DIMS = ("COUT", "H", "W")
LOOP_ORDERS = tuple(itertools.permutations(LOOP_DIMS))


@dataclass(frozen=True)
class TileConfig:
    t_cout: int
    t_h: int
    t_w: int
    loop_order: tuple = LOOP_DIMS

    def __post_init__(self):
        object.__setattr__(self, "loop_order", tuple(self.loop_order))

    def key(self) -> tuple:
        return (self.t_cout, self.t_h, self.t_w, LOOP_ORDERS.index(self.loop_order))


@dataclass(frozen=True)
class ExecutionDesign:
    tiles: tuple
    batch_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "tiles", tuple(self.tiles))

    def key(self) -> tuple:
        return tuple(t.key() for t in self.tiles) + (self.batch_size,)


@dataclass(frozen=True)
class VMFootprint:
    input_bytes: int
    weight_bytes: int
    output_batch_bytes: int
    scratch_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.input_bytes + self.weight_bytes + self.output_batch_bytes + self.scratch_bytes


@dataclass(frozen=True)
class Geometry:
    """Uniform view of a layer as a (possibly channel-wise) sliding window."""

    in_shape: tuple
    out_shape: tuple
    kernel: int
    stride: int
    padding: int
    reduce_channels: int  # input channels read per output channel; 0 for channel-wise pooling

    @property
    def has_weights(self) -> bool:
        return self.reduce_channels > 0


def geometry(layer, in_shape) -> Geometry:
    c, h, w = (int(d) for d in in_shape)
    if isinstance(layer, Conv2D):
        k, s, p = layer.kernel, layer.stride, layer.padding
        out = (layer.c_out, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        return Geometry((c, h, w), out, k, s, p, layer.c_in)
    if isinstance(layer, MaxPool2D):
        k, s = layer.window, layer.stride
        return Geometry((c, h, w), (c, (h - k) // s + 1, (w - k) // s + 1), k, s, 0, 0)
    if isinstance(layer, FullyConnected):
        return Geometry((layer.n_in, 1, 1), (layer.n_out, 1, 1), 1, 1, 0, layer.n_in)
    raise ShapeError(f"unknown layer type {type(layer).__name__}")


def net_geometry(net: NetworkSpec) -> list:
    return [geometry(layer, shp[0]) for layer, shp in zip(net.layers, net.shapes())]


def validate_design(net: NetworkSpec, design: ExecutionDesign) -> None:
    if len(design.tiles) != len(net.layers):
        raise DesignError(f"design has {len(design.tiles)} tiles for {len(net.layers)} layers")
    if not isinstance(design.batch_size, int) or design.batch_size < 1:
        raise DesignError(f"batch size must be >= 1, got {design.batch_size!r}")
    for i, (geo, tile) in enumerate(zip(net_geometry(net), design.tiles)):
        co, ho, wo = geo.out_shape
        if tile.loop_order not in LOOP_ORDERS:
            raise DesignError(f"layer {i}: loop order {tile.loop_order} is not a permutation of {LOOP_DIMS}")
        for name, t, dim in (("t_cout", tile.t_cout, co), ("t_h", tile.t_h, ho), ("t_w", tile.t_w, wo)):
            if not 1 <= t <= dim:
                raise DesignError(f"layer {i}: {name}={t} outside [1, {dim}]")


@dataclass(frozen=True)
class Unit:
    index: tuple  # inter-tile loop indices, outermost first
    co: tuple  # [start, stop) over output channels
    h: tuple
    w: tuple

    @property
    def out_elements(self) -> int:
        return (self.co[1] - self.co[0]) * (self.h[1] - self.h[0]) * (self.w[1] - self.w[0])


def _blocks(dim: int, t: int) -> int:
    return -(-dim // t)


def unit_grid(geo: Geometry, tile: TileConfig) -> tuple:
    """Number of blocks per loop dimension, outermost first."""
    co, ho, wo = geo.out_shape
    sizes = {"COUT": (co, tile.t_cout), "H": (ho, tile.t_h), "W": (wo, tile.t_w)}
    return tuple(_blocks(*sizes[d]) for d in tile.loop_order)


def iter_units(geo: Geometry, tile: TileConfig) -> Iterator[Unit]:
    co, ho, wo = geo.out_shape
    extent = {"COUT": (co, tile.t_cout), "H": (ho, tile.t_h), "W": (wo, tile.t_w)}
    ranges = [range(_blocks(*extent[d])) for d in tile.loop_order]
    for index in itertools.product(*ranges):
        span = {}
        for d, b in zip(tile.loop_order, index):
            dim, t = extent[d]
            span[d] = (b * t, min(dim, (b + 1) * t))
        yield Unit(tuple(index), span["COUT"], span["H"], span["W"])


def _input_span(start: int, stop: int, geo: Geometry, limit: int) -> tuple:
    lo = start * geo.stride - geo.padding
    hi = (stop - 1) * geo.stride - geo.padding + geo.kernel
    return lo, hi, max(0, min(hi, limit) - max(lo, 0))


def unit_macs(geo: Geometry, unit: Unit) -> int:
    if not geo.has_weights:
        return 0
    return unit.out_elements * geo.reduce_channels * geo.kernel * geo.kernel


def unit_fetch_bytes(geo: Geometry, unit: Unit) -> int:
    """Bytes read from NVM: the in-bounds input halo plus the weight block."""
    _, hin, win = geo.in_shape
    rows = _input_span(*unit.h, geo, hin)[2]
    cols = _input_span(*unit.w, geo, win)[2]
    n_co = unit.co[1] - unit.co[0]
    if geo.has_weights:
        channels = geo.reduce_channels
        weights = n_co * geo.reduce_channels * geo.kernel * geo.kernel
    else:
        channels = n_co
        weights = 0
    return (rows * cols * channels + weights) * BYTES_PER_ELEMENT


def unit_out_bytes(unit: Unit) -> int:
    return unit.out_elements * BYTES_PER_ELEMENT


def _halo(x: np.ndarray, geo: Geometry, unit: Unit, channels: slice) -> np.ndarray:
    """Input window for ``unit`` with out-of-bounds positions zero-filled."""
    _, hin, win = geo.in_shape
    r0, r1, _ = _input_span(*unit.h, geo, hin)
    c0, c1, _ = _input_span(*unit.w, geo, win)
    src = x[channels]
    out = np.zeros((src.shape[0], r1 - r0, c1 - c0), dtype=np.int64)
    rr0, rr1 = max(r0, 0), min(r1, hin)
    cc0, cc1 = max(c0, 0), min(c1, win)
    if rr1 > rr0 and cc1 > cc0:
        out[:, rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0] = src[:, rr0:rr1, cc0:cc1]
    return out


def compute_unit(layer, params, x: np.ndarray, geo: Geometry, unit: Unit, act_frac_bits: int, relu: bool) -> np.ndarray:
    """Output tile (n_co, n_h, n_w) of one atomic unit, as int16."""
    x = x.reshape(geo.in_shape)
    k, s = geo.kernel, geo.stride
    n_h = unit.h[1] - unit.h[0]
    n_w = unit.w[1] - unit.w[0]
    if not geo.has_weights:
        halo = _halo(x, geo, unit, slice(*unit.co))
        windows = sliding_window_view(halo, (k, k), axis=(1, 2))[:, ::s, ::s][:, :n_h, :n_w]
        return windows.max(axis=(3, 4)).astype(np.int16)

    halo = _halo(x, geo, unit, slice(None))
    windows = sliding_window_view(halo, (k, k), axis=(1, 2))[:, ::s, ::s][:, :n_h, :n_w]
    w = params.weight.array().astype(np.int64)
    if w.ndim == 2:
        w = w.reshape(w.shape[0], w.shape[1], 1, 1)
    wblk = w[unit.co[0]:unit.co[1]]
    acc = np.einsum("oikl,ihwkl->ohw", wblk, windows)
    if params.bias is not None:
        acc = acc + params.bias.data[unit.co[0]:unit.co[1]].astype(np.int64)[:, None, None]
    out = requantize(acc, params.weight.frac_bits)
    if relu:
        out = np.maximum(out, 0)
    return out


def _check_input(net: NetworkSpec, x: QTensor) -> None:
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} != network input {net.input_shape}")
    if x.frac_bits != net.act_frac_bits:
        raise ShapeError(f"input frac_bits {x.frac_bits} != network act_frac_bits {net.act_frac_bits}")


def applies_relu(net: NetworkSpec, i: int) -> bool:
    """Hidden conv/FC layers are rectified; the final layer emits raw logits."""
    return not isinstance(net.layers[i], MaxPool2D) and i != len(net.layers) - 1


def _reference_layer(layer, params, x: np.ndarray, relu: bool) -> np.ndarray:
    if isinstance(layer, MaxPool2D):
        c, h, w = x.shape
        k, s = layer.window, layer.stride
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        out = np.full((c, ho, wo), -32768, dtype=np.int16)
        for kh in range(k):
            for kw in range(k):
                out = np.maximum(out, x[:, kh:kh + s * (ho - 1) + 1:s, kw:kw + s * (wo - 1) + 1:s])
        return out

    w = params.weight.array().astype(np.int64)
    if isinstance(layer, FullyConnected):
        acc = w @ x.reshape(-1).astype(np.int64)
        acc = acc.reshape(-1, 1, 1)
    else:
        k, s, p = layer.kernel, layer.stride, layer.padding
        xp = np.pad(x.astype(np.int64), ((0, 0), (p, p), (p, p)))
        ho = (x.shape[1] + 2 * p - k) // s + 1
        wo = (x.shape[2] + 2 * p - k) // s + 1
        acc = np.zeros((layer.c_out, ho, wo), dtype=np.int64)
        for kh in range(k):
            for kw in range(k):
                patch = xp[:, kh:kh + s * (ho - 1) + 1:s, kw:kw + s * (wo - 1) + 1:s]
                acc += np.tensordot(w[:, :, kh, kw], patch, axes=(1, 0))
    if params.bias is not None:
        acc = acc + params.bias.data.astype(np.int64)[:, None, None]
    out = requantize(acc, params.weight.frac_bits)
    return np.maximum(out, 0) if relu else out


def run_reference(net: NetworkSpec, x: QTensor) -> QTensor:
    """Untiled layer-by-layer inference."""
    check_network(net)
    _check_input(net, x)
    act = x.array()
    for i, (layer, params) in enumerate(zip(net.layers, net.params)):
        act = _reference_layer(layer, params, act, applies_relu(net, i))
    return QTensor.from_array(act, net.act_frac_bits)


def classify(logits: QTensor) -> int:
    """Argmax over the flattened logits; the lowest index wins ties."""
    return int(np.argmax(logits.data))


@dataclass
class LayerTileStats:
    units: int = 0
    macs: list = field(default_factory=list)
    fetched_bytes: list = field(default_factory=list)
    out_bytes: list = field(default_factory=list)


@dataclass
class TileStats:
    layers: list

    @property
    def total_units(self) -> int:
        return sum(layer.units for layer in self.layers)

    def to_dict(self) -> dict:
        return {"layers": [asdict(layer) for layer in self.layers], "total_units": self.total_units}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def run_tiled(net: NetworkSpec, x: QTensor, design: ExecutionDesign) -> tuple:
    """Tiled inference; returns (output, TileStats)."""
    check_network(net)
    _check_input(net, x)
    validate_design(net, design)
    act = x.array()
    stats = []
    for i, (layer, params, geo, tile) in enumerate(zip(net.layers, net.params, net_geometry(net), design.tiles)):
        relu = applies_relu(net, i)
        out = np.zeros(geo.out_shape, dtype=np.int16)
        ls = LayerTileStats()
        for unit in iter_units(geo, tile):
            block = compute_unit(layer, params, act, geo, unit, net.act_frac_bits, relu)
            out[unit.co[0]:unit.co[1], unit.h[0]:unit.h[1], unit.w[0]:unit.w[1]] = block
            ls.units += 1
            ls.macs.append(unit_macs(geo, unit))
            ls.fetched_bytes.append(unit_fetch_bytes(geo, unit))
            ls.out_bytes.append(unit_out_bytes(unit))
        stats.append(ls)
        act = out
    return QTensor.from_array(act, net.act_frac_bits), TileStats(stats)


def tile_footprint(layer, tile: TileConfig, batch_size: int) -> VMFootprint:
    """VM bytes needed by one full (unclamped) tile with a batch of ``batch_size`` outputs."""
    if isinstance(layer, FullyConnected):
        k, s, channels = 1, 1, layer.n_in
        weights = tile.t_cout * layer.n_in
    elif isinstance(layer, Conv2D):
        k, s, channels = layer.kernel, layer.stride, layer.c_in
        weights = tile.t_cout * layer.c_in * k * k
    else:
        k, s, channels = layer.window, layer.stride, tile.t_cout
        weights = 0
    halo = (s * (tile.t_h - 1) + k) * (s * (tile.t_w - 1) + k) * channels
    out = batch_size * tile.t_cout * tile.t_h * tile.t_w
    return VMFootprint(
        input_bytes=halo * BYTES_PER_ELEMENT,
        weight_bytes=weights * BYTES_PER_ELEMENT,
        output_batch_bytes=out * BYTES_PER_ELEMENT,
        scratch_bytes=SNAPSHOT_BYTES,
    )
