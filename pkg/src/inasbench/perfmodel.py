"""Per-cycle energy and end-to-end latency prediction.

The prediction is exact for fault-free runs: it replays the proactive
preservation rule on per-unit cost vectors instead of stepping through
data. Units are numbered globally across layers; running units ``[a, b)``
from an empty batch costs

    sum(e_unit + e_nvm_wr * out_bytes) + 16 * e_nvm_wr * ceil((b - a) / S)

which is non-decreasing in ``b``, so the greedy rule "start the next unit
only if it and the flush of its batch still fit" reduces to a binary search
for the largest affordable ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import FeasibilityError
from .executor import (
    BYTES_PER_ELEMENT,
    SNAPSHOT_BYTES,
    ExecutionDesign,
    Geometry,
    TileConfig,
    net_geometry,
    tile_footprint,
    validate_design,
)
from .intermittent import CostParams, PowerParams
from .model import Conv2D, FullyConnected, NetworkSpec, check_network


@dataclass(frozen=True)
class PerfEstimate:
    latency_ticks: int
    cycles: int
    max_cycle_energy: int
    preservation_energy_total: int
    fetch_energy_total: int
    compute_energy_total: int
    vm_peak_bytes: int
    preservations: int
    active_ticks: int  # unit + preservation time, without boot/recovery/recharge


def _full_tile_counts(layer, tile: TileConfig) -> tuple:
    """(fetched bytes, MACs, output bytes) of one full, unclamped tile."""
    fp = tile_footprint(layer, tile, 1)
    if isinstance(layer, Conv2D):
        reduce = layer.c_in * layer.kernel * layer.kernel
    elif isinstance(layer, FullyConnected):
        reduce = layer.n_in
    else:
        reduce = 0
    out = tile.t_cout * tile.t_h * tile.t_w
    return fp.input_bytes + fp.weight_bytes, out * reduce, out * BYTES_PER_ELEMENT


def unit_cost(layer, tile: TileConfig, costs: CostParams) -> tuple:
    """Worst-case (e_unit, t_unit) of one full tile."""
    fetched, macs, _ = _full_tile_counts(layer, tile)
    return (
        costs.e_nvm_rd * fetched + costs.e_mac * macs,
        costs.t_nvm_rd * fetched + costs.t_mac * macs,
    )


def preservation_cost(layer, tile: TileConfig, batch_size: int, costs: CostParams) -> tuple:
    """(e_pres, t_pres) of writing ``batch_size`` full tile outputs plus a snapshot."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    _, _, out = _full_tile_counts(layer, tile)
    nbytes = batch_size * out + SNAPSHOT_BYTES
    return costs.e_nvm_wr * nbytes, costs.t_nvm_wr * nbytes


@dataclass(frozen=True)
class Feasibility:
    ok: bool
    reason: str = ""
    layer: int = -1
    constraint: str = ""

    def __bool__(self):
        return self.ok


def feasible(net: NetworkSpec, design: ExecutionDesign, power: PowerParams, costs: CostParams) -> Feasibility:
    """Whether every layer's worst unit fits one fresh power cycle and its VM footprint fits VM."""
    check_network(net)
    validate_design(net, design)
    e_recovery = SNAPSHOT_BYTES * costs.e_nvm_rd
    for i, (layer, tile) in enumerate(zip(net.layers, design.tiles)):
        e_unit, _ = unit_cost(layer, tile, costs)
        e_pres, _ = preservation_cost(layer, tile, 1, costs)
        need = e_recovery + e_unit + e_pres
        if need > power.e_budget:
            return Feasibility(False, f"energy-infeasible at layer {i}: needs {need} eu per cycle, budget {power.e_budget}", i, "energy")
        vm = tile_footprint(layer, tile, design.batch_size).total_bytes
        if vm > costs.vm_capacity:
            return Feasibility(False, f"VM-infeasible at layer {i}: footprint {vm} B exceeds {costs.vm_capacity} B", i, "vm")
    return Feasibility(True)


def check_feasible(net, design, power, costs) -> None:
    verdict = feasible(net, design, power, costs)
    if not verdict:
        raise FeasibilityError(verdict.reason)


def _blocks(dim: int, t: int):
    starts = np.arange(0, dim, t)
    return starts, np.minimum(starts + t, dim)


def _in_bounds(starts, stops, geo: Geometry, limit: int):
    lo = starts * geo.stride - geo.padding
    hi = (stops - 1) * geo.stride - geo.padding + geo.kernel
    return np.clip(np.minimum(hi, limit) - np.maximum(lo, 0), 0, None)


@lru_cache(maxsize=4096)
def layer_unit_vectors(geo: Geometry, tile: TileConfig) -> tuple:
    """Per-unit (fetched bytes, MACs, output bytes) in execution order, as int64 arrays."""
    co, ho, wo = geo.out_shape
    _, hin, win = geo.in_shape
    c0, c1 = _blocks(co, tile.t_cout)
    h0, h1 = _blocks(ho, tile.t_h)
    w0, w1 = _blocks(wo, tile.t_w)
    n_co = (c1 - c0)[:, None, None]
    n_h = (h1 - h0)[None, :, None]
    n_w = (w1 - w0)[None, None, :]
    rows = _in_bounds(h0, h1, geo, hin)[None, :, None]
    cols = _in_bounds(w0, w1, geo, win)[None, None, :]
    k2 = geo.kernel * geo.kernel
    if geo.has_weights:
        fetched = rows * cols * geo.reduce_channels + n_co * geo.reduce_channels * k2
        macs = n_co * n_h * n_w * geo.reduce_channels * k2
    else:
        fetched = rows * cols * n_co
        macs = np.zeros_like(n_co * n_h * n_w)
    outs = n_co * n_h * n_w
    shape = (len(c0), len(h0), len(w0))
    axes = [("COUT", "H", "W").index(d) for d in tile.loop_order]

    def order(a):
        return np.ascontiguousarray(np.transpose(np.broadcast_to(a, shape), axes)).ravel().astype(np.int64)

    return order(fetched * BYTES_PER_ELEMENT), order(macs), order(outs * BYTES_PER_ELEMENT)


def _unit_costs(net, design, costs) -> tuple:
    """Prefix sums of per-unit (energy incl. output write, time) in global execution order, plus totals."""
    e_parts, t_parts = [], []
    fetched = macs = outs = 0
    for geo, tile in zip(net_geometry(net), design.tiles):
        f, m, o = layer_unit_vectors(geo, tile)
        e_parts.append(costs.e_nvm_rd * f + costs.e_mac * m + costs.e_nvm_wr * o)
        t_parts.append(costs.t_nvm_rd * f + costs.t_mac * m + costs.t_nvm_wr * o)
        fetched, macs, outs = fetched + int(f.sum()), macs + int(m.sum()), outs + int(o.sum())
    zero = np.zeros(1, dtype=np.int64)
    e_pre = np.concatenate([zero, np.cumsum(np.concatenate(e_parts))])
    t_pre = np.concatenate([zero, np.cumsum(np.concatenate(t_parts))])
    return e_pre, t_pre, fetched, macs, outs


def _furthest(e_pre: np.ndarray, a: int, energy: int, snap_e: int, S: int) -> int:
    """Largest b whose segment cost from unit a fits ``energy``."""
    base = int(e_pre[a])
    lo, hi = a, len(e_pre) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if int(e_pre[mid]) - base + snap_e * (-(-(mid - a) // S)) <= energy:
            lo = mid
        else:
            hi = mid - 1
    return lo


def predict(net: NetworkSpec, design: ExecutionDesign, power: PowerParams, costs: CostParams) -> PerfEstimate:
    """Fault-free latency, cycle count and per-cycle energy of ``design``."""
    check_feasible(net, design, power, costs)
    S = design.batch_size
    e_pre, t_pre, total_fetched, total_macs, total_out = _unit_costs(net, design, costs)
    n = len(e_pre) - 1
    snap_e = SNAPSHOT_BYTES * costs.e_nvm_wr
    snap_t = SNAPSHOT_BYTES * costs.t_nvm_wr
    rec_e = SNAPSHOT_BYTES * costs.e_nvm_rd
    rec_t = SNAPSHOT_BYTES * costs.t_nvm_rd

    latency = active = cycles = snapshots = max_energy = 0
    pos = 0
    while pos < n:
        cycles += 1
        energy = power.e_budget - rec_e
        b = _furthest(e_pre, pos, energy, snap_e, S)
        if b == pos:
            raise FeasibilityError(f"unit {pos} does not fit a fresh power cycle")
        batches = -(-(b - pos) // S)
        seg_t = int(t_pre[b] - t_pre[pos]) + snap_t * batches
        max_energy = max(max_energy, rec_e + int(e_pre[b] - e_pre[pos]) + snap_e * batches)
        active += seg_t
        snapshots += batches
        latency += power.t_boot + rec_t + seg_t
        pos = b
        if pos < n:
            latency += power.t_recharge

    vm_peak = max(tile_footprint(l, t, S).total_bytes for l, t in zip(net.layers, design.tiles))
    return PerfEstimate(
        latency_ticks=latency,
        cycles=cycles,
        max_cycle_energy=max_energy,
        preservation_energy_total=costs.e_nvm_wr * (total_out + SNAPSHOT_BYTES * snapshots),
        fetch_energy_total=costs.e_nvm_rd * (total_fetched + SNAPSHOT_BYTES * cycles),
        compute_energy_total=costs.e_mac * total_macs,
        vm_peak_bytes=vm_peak,
        preservations=snapshots,
        active_ticks=active,
    )
