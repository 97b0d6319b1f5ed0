"""Discrete-event simulation of tiled inference on an energy-harvesting device.

Each power cycle boots, reads the progress snapshot from NVM, and runs
atomic units while the buffer can still pay for the next unit plus the
preservation of everything pending in VM. Every ``S`` units the batch of
tile outputs and a new snapshot are written to NVM. Units are numbered
globally across layers, so a batch may straddle a layer boundary; the next
layer then reads its inputs from the VM copy. Abrupt faults drop everything
in VM and the units since the last committed snapshot re-execute.

NVM image layout (little-endian)::

    [0, 16)    snapshot slot A
    [16, 32)   snapshot slot B
    [32, ...)  input tensor, then one output region per layer (int16, c-h-w order)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DesignError, InasError, ParameterError, UnrecoverableStateError
from .executor import (
    SNAPSHOT_BYTES,
    ExecutionDesign,
    _check_input,
    applies_relu,
    compute_unit,
    iter_units,
    net_geometry,
    unit_fetch_bytes,
    unit_macs,
    unit_out_bytes,
    validate_design,
)
from .model import NetworkSpec, QTensor, check_network
from .prng import SplitMix64

SNAPSHOT_MAGIC = 0x5A17
SLOT_OFFSETS = (0, SNAPSHOT_BYTES)
_SNAP = struct.Struct("<8H")
# Body first, version last, high byte before low byte. The low byte always
# differs from the stale slot's (versions two apart), so a record only
# checksums once its final byte lands.
SNAPSHOT_WRITE_ORDER = (0, 1, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 3, 2)


@dataclass(frozen=True)
class PowerParams:
    """Energy buffer per power cycle (eu), recharge time and boot overhead (ticks)."""

    e_budget: int
    t_recharge: int = 0
    t_boot: int = 0

    def __post_init__(self):
        _check_ints(self, ("e_budget", "t_recharge", "t_boot"))
        if self.e_budget <= 0:
            raise ParameterError("e_budget must be > 0")


@dataclass(frozen=True)
class CostParams:
    """Per-MAC and per-byte energy (eu) and time (ticks). Default VM is 2 KB of SRAM."""

    e_mac: int = 1
    t_mac: int = 1
    e_nvm_rd: int = 1
    t_nvm_rd: int = 1
    e_nvm_wr: int = 1
    t_nvm_wr: int = 1
    vm_capacity: int = 2048

    def __post_init__(self):
        _check_ints(self, ("e_mac", "t_mac", "e_nvm_rd", "t_nvm_rd", "e_nvm_wr", "t_nvm_wr", "vm_capacity"))
        if self.vm_capacity <= 0:
            raise ParameterError("vm_capacity must be > 0")


def _check_ints(obj, names):
    for name in names:
        v = getattr(obj, name)
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
            raise ParameterError(f"{name} must be a non-negative integer, got {v!r}")
        object.__setattr__(obj, name, int(v))


@dataclass(frozen=True)
class ProgressSnapshot:
    version: int = 0
    layer_idx: int = 0
    indices: tuple = (0, 0, 0)
    committed_units: int = 0
    magic: int = SNAPSHOT_MAGIC

    def encode(self) -> bytes:
        fields = [self.magic, self.version, self.layer_idx, *self.indices, self.committed_units]
        if any(not 0 <= v <= 0xFFFF for v in fields):
            raise InasError(f"snapshot field out of 16-bit range: {fields}")
        body = struct.pack("<7H", *fields)
        return body + struct.pack("<H", sum(body) & 0xFFFF)

    @classmethod
    def decode(cls, raw: bytes) -> "ProgressSnapshot":
        magic, version, layer, i0, i1, i2, committed, _ = _SNAP.unpack(bytes(raw))
        return cls(version, layer, (i0, i1, i2), committed, magic)


ZERO_SNAPSHOT = ProgressSnapshot()


def snapshot_valid(raw: bytes) -> bool:
    raw = bytes(raw)
    magic, = struct.unpack_from("<H", raw, 0)
    checksum, = struct.unpack_from("<H", raw, 14)
    return magic == SNAPSHOT_MAGIC and (sum(raw[:14]) & 0xFFFF) == checksum


def version_newer(a: int, b: int) -> bool:
    """Serial-number comparison on the 16-bit version counter."""
    return 0 < ((a - b) & 0xFFFF) < 0x8000


def select_slot(slots: bytes) -> tuple:
    """(slot index or None, snapshot) for the 32 bytes of the two snapshot slots."""
    slots = bytes(slots)
    if len(slots) < 2 * SNAPSHOT_BYTES:
        raise ParameterError("snapshot area must hold two 16-byte slots")
    raws = [slots[o:o + SNAPSHOT_BYTES] for o in SLOT_OFFSETS]
    valid = [i for i, r in enumerate(raws) if snapshot_valid(r)]
    if not valid:
        if any(struct.unpack_from("<H", r, 2)[0] != 0 for r in raws):
            raise UnrecoverableStateError("both snapshot slots are corrupt")
        return None, ZERO_SNAPSHOT
    snaps = {i: ProgressSnapshot.decode(raws[i]) for i in valid}
    best = valid[0]
    for i in valid[1:]:
        if version_newer(snaps[i].version, snaps[best].version):
            best = i
    return best, snaps[best]


def recover(nvm_state) -> ProgressSnapshot:
    """Resume point stored in NVM (an ``NVMImage`` or the raw slot bytes)."""
    raw = nvm_state.data if isinstance(nvm_state, NVMImage) else nvm_state
    return select_slot(bytes(raw[:2 * SNAPSHOT_BYTES]))[1]


class NVMImage:
    """Byte-addressable non-volatile memory holding snapshots and activations."""

    def __init__(self, net: NetworkSpec):
        shapes = [net.input_shape] + [out for _, out in net.shapes()]
        self.shapes = shapes
        self.offsets = []
        off = 2 * SNAPSHOT_BYTES
        for shp in shapes:
            self.offsets.append(off)
            off += 2 * math.prod(shp)
        self.data = bytearray(off)

    def region(self, i: int) -> np.ndarray:
        """Activation region ``i`` (0 = network input, i = output of layer i-1), as a view."""
        n = math.prod(self.shapes[i])
        return np.frombuffer(self.data, dtype="<i2", count=n, offset=self.offsets[i]).reshape(self.shapes[i])

    def write_region(self, i: int, arr: np.ndarray) -> None:
        raw = np.ascontiguousarray(arr, dtype="<i2").tobytes()
        self.data[self.offsets[i]:self.offsets[i] + len(raw)] = raw

    def copy(self) -> "NVMImage":
        clone = object.__new__(NVMImage)
        clone.shapes, clone.offsets, clone.data = self.shapes, self.offsets, bytearray(self.data)
        return clone

    def dump(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(bytes(self.data))


@dataclass(frozen=True)
class FaultTrace:
    ticks: tuple = ()

    def __post_init__(self):
        ticks = tuple(int(t) for t in self.ticks)
        if any(t < 0 for t in ticks) or any(b <= a for a, b in zip(ticks, ticks[1:])):
            raise ParameterError("fault ticks must be non-negative and strictly increasing")
        object.__setattr__(self, "ticks", ticks)

    def __len__(self):
        return len(self.ticks)


def make_fault_trace(seed: int, mean_interval_ticks, horizon_ticks: int) -> FaultTrace:
    """Each tick in [1, horizon) fails independently with probability 1/mean.

    Gaps between faults are therefore geometric with the given mean. Draws
    come from SplitMix64(seed): a tick fails when its draw is below
    floor(2**64 / mean).
    """
    if not mean_interval_ticks > 0:
        raise ParameterError("mean_interval_ticks must be > 0")
    threshold = min(1 << 64, math.floor(Fraction(1 << 64) / Fraction(mean_interval_ticks)))
    n = max(0, int(horizon_ticks) - 1)
    draws = SplitMix64(seed).next_block(n)
    if threshold >= 1 << 64:
        hits = np.ones(n, dtype=bool)
    else:
        hits = draws < np.uint64(threshold)
    return FaultTrace(tuple(int(t) + 1 for t in np.flatnonzero(hits)))


@dataclass
class SimResult:
    output: QTensor
    latency_ticks: int
    cycles: int
    per_cycle_energy: list
    preservations: int = 0
    recoveries: int = 0
    lost_units: int = 0
    abrupt_faults: int = 0
    units_executed: int = 0
    resumes: list = field(default_factory=list)  # [layer, unit] read at each recovery
    nvm_image: bytes = field(default=b"", repr=False)

    @property
    def max_cycle_energy(self) -> int:
        return max(self.per_cycle_energy, default=0)


class _Fault(Exception):
    def __init__(self, tick):
        self.tick = tick


class _Device:
    """One simulation run. Time, energy and NVM evolve op by op."""

    def __init__(self, net, x, design, power, costs, faults):
        self.net = net
        self.design = design
        self.power = power
        self.costs = costs
        self.faults = list(faults.ticks)
        self.fault_pos = 0
        self.geos = net_geometry(net)
        self.units = [list(iter_units(g, t)) for g, t in zip(self.geos, design.tiles)]
        if len(net.layers) > 0xFFFF or any(len(u) > 0xFFFF for u in self.units):
            raise DesignError("unit or layer count does not fit the 16-bit snapshot fields")
        self.costs_per_unit = [
            [(unit_fetch_bytes(g, u), unit_macs(g, u), unit_out_bytes(u)) for u in units]
            for g, units in zip(self.geos, self.units)
        ]
        self.nvm = NVMImage(net)
        self.nvm.write_region(0, x.array())
        self._offsets = {}
        self.t = 0
        self.cycle_energy = []
        self.resumes = []
        self.result_counts = dict(preservations=0, recoveries=0, lost_units=0, abrupt_faults=0, units_executed=0)

    # -- time --------------------------------------------------------------

    def _advance(self, duration: int, energy: int) -> None:
        """Run one op of ``duration`` ticks, charging ``energy``; raise _Fault if power is cut."""
        self.cycle_energy[-1] += energy
        start, end = self.t, self.t + duration
        while self.fault_pos < len(self.faults) and self.faults[self.fault_pos] < start:
            self.fault_pos += 1  # fault landed while the device was off
        if self.fault_pos < len(self.faults) and self.faults[self.fault_pos] < end:
            tick = self.faults[self.fault_pos]
            self.fault_pos += 1
            self.t = tick
            raise _Fault(tick)
        self.t = end

    # -- persistence -------------------------------------------------------

    def _unit_offsets(self, layer, unit):
        """NVM byte addresses of a unit's output tile, low byte then high byte per element."""
        key = (layer, unit.index)
        if key not in self._offsets:
            _, h, w = self.geos[layer].out_shape
            cc = np.arange(*unit.co)[:, None, None]
            hh = np.arange(*unit.h)[None, :, None]
            ww = np.arange(*unit.w)[None, None, :]
            elem = self.nvm.offsets[layer + 1] + 2 * ((cc * h + hh) * w + ww).reshape(-1)
            self._offsets[key] = np.stack([elem, elem + 1], axis=1).reshape(-1)
        return self._offsets[key]

    def _commit(self, pending, next_layer, next_pos, slot, version):
        """Write the pending tile outputs then the snapshot; returns the new (slot, version)."""
        c = self.costs
        offsets, values = [], []
        for layer, unit, block in pending:
            offsets.append(self._unit_offsets(layer, unit))
            values.append(np.ascontiguousarray(block, dtype="<i2").reshape(-1).view(np.uint8))

        new_version = (version + 1) & 0xFFFF
        if next_layer < len(self.net.layers):
            indices = self.units[next_layer][next_pos].index
        else:
            indices = (0, 0, 0)
        record = ProgressSnapshot(new_version, next_layer, tuple(indices), next_pos).encode()
        target = 1 - slot if slot is not None else 0
        order = np.array(SNAPSHOT_WRITE_ORDER)
        offsets.append(SLOT_OFFSETS[target] + order)
        values.append(np.frombuffer(record, dtype=np.uint8)[order])

        offsets = np.concatenate(offsets)
        values = np.concatenate(values)
        n = len(offsets)
        start = self.t
        mem = np.frombuffer(self.nvm.data, dtype=np.uint8)
        try:
            self._advance(c.t_nvm_wr * n, c.e_nvm_wr * n)
        except _Fault as fault:
            done = n if c.t_nvm_wr == 0 else (fault.tick - start) // c.t_nvm_wr
            mem[offsets[:done]] = values[:done]
            raise
        mem[offsets] = values
        self.result_counts["preservations"] += 1
        return target, new_version

    # -- power cycle -------------------------------------------------------

    def _cycle(self) -> bool:
        """One power-on interval. Returns True when inference has completed."""
        p, c = self.power, self.costs
        S = self.design.batch_size
        n_layers = len(self.net.layers)
        self.cycle_energy.append(0)
        self._advance(p.t_boot, 0)
        self._advance(SNAPSHOT_BYTES * c.t_nvm_rd, SNAPSHOT_BYTES * c.e_nvm_rd)
        self.result_counts["recoveries"] += 1
        slot, snap = select_slot(self.nvm.data[:2 * SNAPSHOT_BYTES])
        layer, pos, version = snap.layer_idx, snap.committed_units, snap.version
        self.resumes.append([layer, pos])
        if layer >= n_layers:
            return True
        units = self.units[layer]
        if pos >= len(units) or units[pos].index != snap.indices:
            raise UnrecoverableStateError(f"snapshot {snap} does not name a unit of layer {layer}")

        # VM working copy: committed NVM contents plus the outputs still pending.
        vm = self.nvm.copy()
        remaining = p.e_budget - self.cycle_energy[-1]
        pending = []
        pending_bytes = 0
        try:
            while True:
                geo, unit = self.geos[layer], self.units[layer][pos]
                fetched, macs, ob = self.costs_per_unit[layer][pos]
                e_unit = c.e_nvm_rd * fetched + c.e_mac * macs
                if remaining < e_unit + c.e_nvm_wr * (pending_bytes + ob + SNAPSHOT_BYTES):
                    if pending:
                        before = self.cycle_energy[-1]
                        slot, version = self._commit(pending, layer, pos, slot, version)
                        remaining -= self.cycle_energy[-1] - before
                    return False
                try:
                    self._advance(c.t_nvm_rd * fetched + c.t_mac * macs, e_unit)
                except _Fault:
                    self.result_counts["lost_units"] += 1
                    raise
                remaining -= e_unit
                self.result_counts["units_executed"] += 1
                block = compute_unit(
                    self.net.layers[layer], self.net.params[layer], vm.region(layer), geo, unit,
                    self.net.act_frac_bits, applies_relu(self.net, layer),
                )
                vm.region(layer + 1)[unit.co[0]:unit.co[1], unit.h[0]:unit.h[1], unit.w[0]:unit.w[1]] = block
                pending.append((layer, unit, block))
                pending_bytes += ob
                pos += 1
                if pos == len(self.units[layer]):
                    layer, pos = layer + 1, 0
                if len(pending) == S or layer == n_layers:
                    before = self.cycle_energy[-1]
                    slot, version = self._commit(pending, layer, pos, slot, version)
                    remaining -= self.cycle_energy[-1] - before
                    pending, pending_bytes = [], 0
                    if layer == n_layers:
                        return True
        except _Fault:
            self.result_counts["lost_units"] += len(pending)
            raise

    def run(self) -> SimResult:
        while True:
            try:
                done = self._cycle()
            except _Fault:
                self.result_counts["abrupt_faults"] += 1
                done = False
            if done:
                break
            self.t += self.power.t_recharge

        output = QTensor.from_array(self.nvm.region(len(self.net.layers)).astype(np.int16), self.net.act_frac_bits)
        return SimResult(
            output=output,
            latency_ticks=self.t,
            cycles=len(self.cycle_energy),
            per_cycle_energy=list(self.cycle_energy),
            resumes=self.resumes,
            nvm_image=bytes(self.nvm.data),
            **self.result_counts,
        )


def simulate(net: NetworkSpec, x: QTensor, design: ExecutionDesign, power: PowerParams,
             costs: CostParams, faults: FaultTrace = FaultTrace()) -> SimResult:
    """Run one inference across power cycles, injecting the given abrupt faults."""
    from .perfmodel import check_feasible

    check_network(net)
    _check_input(net, x)
    validate_design(net, design)
    check_feasible(net, design, power, costs)
    return _Device(net, x, design, power, costs, faults).run()
