"""EDF schedulability of periodic inference tasks on one intermittent device.

Supply is modelled as a periodic resource: at least ``theta`` useful active
ticks per power cycle, separated by off/boot/recovery gaps, giving

    sbf(D) = floor((D - 2g) / P) * theta + min(theta, (D - 2g) mod P)

with g = P - theta, and 0 for D < 2g. ``sbf`` evaluates this with the
uniform-draw parameters (theta = (E - 16 e_rd) * tau - t_boot). The EDF test
uses ``supply_model``, which derives theta from the cost coefficients so the
bound holds for the heterogeneous simulator as well.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .errors import ParameterError, SupplyError
from .executor import SNAPSHOT_BYTES, ExecutionDesign, net_geometry
from .intermittent import CostParams, PowerParams
from .model import NetworkSpec
from .perfmodel import check_feasible, layer_unit_vectors, predict, preservation_cost, unit_cost


@dataclass(frozen=True)
class TaskSpec:
    id: int
    net: NetworkSpec
    design: ExecutionDesign
    period: int
    deadline: int
    offset: int = 0

    def __post_init__(self):
        if self.period <= 0:
            raise ParameterError(f"task {self.id}: period must be > 0")
        if not 0 < self.deadline <= self.period:
            raise ParameterError(f"task {self.id}: deadline must be in (0, period]")
        if self.offset < 0:
            raise ParameterError(f"task {self.id}: offset must be >= 0")


def task_wcet(task: TaskSpec, power: PowerParams, costs: CostParams) -> int:
    """Fault-free active ticks (units plus preservations) of one job."""
    return predict(task.net, task.design, power, costs).active_ticks


@dataclass(frozen=True)
class SupplyModel:
    theta: int  # useful active ticks guaranteed per power cycle
    period: int

    def __post_init__(self):
        if self.theta <= 0:
            raise SupplyError(f"supply per cycle is {self.theta} ticks; the budget cannot sustain recovery")

    @property
    def gap(self) -> int:
        return self.period - self.theta

    @property
    def rate(self) -> Fraction:
        return Fraction(self.theta, self.period)

    def sbf(self, delta: int) -> int:
        if delta < 0:
            raise ParameterError("delta must be >= 0")
        x = delta - 2 * self.gap
        if x < 0:
            return 0
        return (x // self.period) * self.theta + min(self.theta, x % self.period)


def _uniform_supply(power: PowerParams, costs: CostParams, tau=1) -> SupplyModel:
    theta = (power.e_budget - SNAPSHOT_BYTES * costs.e_nvm_rd) * Fraction(tau) - power.t_boot
    if theta <= 0:
        raise SupplyError(f"theta = {theta}: the budget cannot sustain recovery")
    theta = math.floor(theta)
    return SupplyModel(theta, theta + power.t_boot + power.t_recharge + SNAPSHOT_BYTES * costs.t_nvm_rd)


def sbf(power: PowerParams, costs: CostParams, delta: int, tau=1) -> int:
    """Supply bound under a uniform draw of ``tau`` ticks per eu."""
    return _uniform_supply(power, costs, tau).sbf(delta)


def min_time_per_energy(costs: CostParams) -> Fraction:
    """Smallest ticks-per-eu ratio over the MAC, read and write cost classes."""
    ratios = [Fraction(t, e) for t, e in ((costs.t_mac, costs.e_mac), (costs.t_nvm_rd, costs.e_nvm_rd),
                                          (costs.t_nvm_wr, costs.e_nvm_wr)) if e > 0]
    if not ratios:
        raise SupplyError("every energy coefficient is zero; energy never limits a power cycle")
    return min(ratios)


def supply_model(power: PowerParams, costs: CostParams, tasks=(), tau=None) -> SupplyModel:
    """Per-cycle supply guaranteed by the simulator's packing rule.

    A cycle stops with less than one unit-plus-output-write (and a snapshot)
    of energy left, so at least ``E - 16 e_rd - slack`` eu go into ops taking
    at least ``tau`` ticks per eu. One shutdown snapshot per cycle is not
    part of any job's WCET and is moved into the gap.
    """
    if tau is None:
        tau = min_time_per_energy(costs)
    worst = 0
    for task in tasks:
        for layer, tile in zip(task.net.layers, task.design.tiles):
            e_unit, _ = unit_cost(layer, tile, costs)
            e_pres, _ = preservation_cost(layer, tile, 1, costs)
            worst = max(worst, e_unit + e_pres)
    usable = power.e_budget - SNAPSHOT_BYTES * costs.e_nvm_rd - worst
    snap_t = SNAPSHOT_BYTES * costs.t_nvm_wr
    theta = math.floor(usable * Fraction(tau)) - snap_t
    if theta <= 0:
        raise SupplyError(f"theta = {theta}: the budget cannot sustain recovery plus one unit")
    gap = snap_t + power.t_recharge + power.t_boot + SNAPSHOT_BYTES * costs.t_nvm_rd
    return SupplyModel(theta, theta + gap)


def dbf(tasks, wcets, delta: int) -> int:
    """Demand of jobs with release and deadline inside any window of length ``delta``."""
    return sum(max(0, (delta - t.deadline) // t.period + 1) * c for t, c in zip(tasks, wcets))


def hyperperiod(tasks) -> int:
    return math.lcm(*(t.period for t in tasks)) if tasks else 0


@dataclass(frozen=True)
class SchedVerdict:
    schedulable: bool
    witness: Optional[dict]
    wcets: tuple
    supply: Optional[SupplyModel] = None


def _test_points(tasks, limit: int):
    points = set()
    for t in tasks:
        d = t.deadline
        while d <= limit:
            points.add(d)
            d += t.period
    return sorted(points)


def schedulable_edf(tasks, power: PowerParams, costs: CostParams) -> SchedVerdict:
    """Non-preemptive EDF test: dbf(D) + B(D) <= sbf(D) at every deadline test point.

    The blocking term B(D) is the largest WCET among tasks with a relative
    deadline beyond D. Test points run up to the larger of hyperperiod plus
    the longest deadline and the point past which the linear supply bound
    always dominates demand.
    """
    tasks = list(tasks)
    if len({t.id for t in tasks}) != len(tasks):
        raise ParameterError("task ids must be unique")
    for t in tasks:
        check_feasible(t.net, t.design, power, costs)
    wcets = tuple(task_wcet(t, power, costs) for t in tasks)
    if not tasks:
        return SchedVerdict(True, None, wcets)
    supply = supply_model(power, costs, tasks)
    util = sum(Fraction(c, t.period) for t, c in zip(tasks, wcets))
    if util >= supply.rate:
        return SchedVerdict(False, {"utilization": float(util), "supply_rate": float(supply.rate)}, wcets, supply)

    max_d = max(t.deadline for t in tasks)
    slack = sum(Fraction(c, t.period) * (t.period - t.deadline) for t, c in zip(tasks, wcets))
    # beyond l_star: util*D + slack + max C <= rate * (D - 2 gap) <= sbf(D)
    l_star = (slack + max(wcets) + 2 * supply.rate * supply.gap) / (supply.rate - util)
    limit = max(hyperperiod(tasks) + max_d, math.ceil(l_star))
    for delta in _test_points(tasks, limit):
        blocking = max((c for t, c in zip(tasks, wcets) if t.deadline > delta), default=0)
        demand = dbf(tasks, wcets, delta)
        supplied = supply.sbf(delta)
        if demand + blocking > supplied:
            return SchedVerdict(False, {"delta": delta, "demand": demand, "blocking": blocking,
                                        "supply": supplied}, wcets, supply)
    return SchedVerdict(True, None, wcets, supply)


# ---------------------------------------------------------------------------
# schedule simulation


@dataclass
class JobRecord:
    task: int
    release: int
    deadline: int
    start: Optional[int] = None
    finish: Optional[int] = None
    active: int = 0  # unit and preservation ticks spent on this job
    shutdown_flushes: int = 0  # snapshots forced by power-down, not part of the WCET

    @property
    def missed(self) -> bool:
        return self.finish is None or self.finish > self.deadline


@dataclass
class ScheduleTrace:
    jobs: list = field(default_factory=list)
    cycles: int = 0
    end_tick: int = 0

    @property
    def misses(self) -> list:
        return [(j.task, j.release, j.deadline, j.finish) for j in self.jobs if j.missed]


def _job_costs(task: TaskSpec, costs: CostParams) -> list:
    """Per-unit (energy, ticks, output bytes) in execution order, output writes excluded."""
    out = []
    for geo, tile in zip(net_geometry(task.net), task.design.tiles):
        f, m, o = layer_unit_vectors(geo, tile)
        e = costs.e_nvm_rd * f + costs.e_mac * m
        t = costs.t_nvm_rd * f + costs.t_mac * m
        out += list(zip(e.tolist(), t.tolist(), o.tolist()))
    return out


def simulate_schedule(tasks, power: PowerParams, costs: CostParams, horizon: int) -> ScheduleTrace:
    """Non-preemptive EDF on the intermittent device, fault-free, releases up to ``horizon``.

    Each power cycle boots, reads the snapshot, and runs units of the current
    job under the same proactive preservation rule as ``simulate``. When a
    job completes, the next earliest-deadline ready job (lower id on ties)
    starts in the same cycle; with nothing ready the device idles powered on.
    """
    tasks = sorted(tasks, key=lambda t: t.id)
    for t in tasks:
        check_feasible(t.net, t.design, power, costs)
    trace = ScheduleTrace()
    if not tasks:
        return trace
    unit_costs = {t.id: _job_costs(t, costs) for t in tasks}
    batch = {t.id: t.design.batch_size for t in tasks}
    releases = []
    for t in tasks:
        r = t.offset
        while r < horizon:
            releases.append((r, t.id, t.deadline))
            r += t.period
    releases.sort()
    wr_e, wr_t = costs.e_nvm_wr, costs.t_nvm_wr
    snap = SNAPSHOT_BYTES

    ready: list = []
    nxt = 0
    now = 0
    job: Optional[JobRecord] = None
    pos = pending = pending_bytes = 0

    def admit():
        nonlocal nxt
        while nxt < len(releases) and releases[nxt][0] <= now:
            r, tid, d = releases[nxt]
            rec = JobRecord(tid, r, r + d)
            trace.jobs.append(rec)
            heapq.heappush(ready, (rec.deadline, tid, r, len(trace.jobs) - 1))
            nxt += 1

    while True:
        trace.cycles += 1
        now += power.t_boot + snap * costs.t_nvm_rd
        remaining = power.e_budget - snap * costs.e_nvm_rd
        while True:
            if job is None:
                admit()
                if not ready:
                    if nxt >= len(releases):
                        trace.end_tick = now
                        return trace
                    now = max(now, releases[nxt][0])
                    continue
                job = trace.jobs[heapq.heappop(ready)[3]]
                job.start = now
                pos = pending = pending_bytes = 0
            units = unit_costs[job.task]
            e_u, t_u, ob = units[pos]
            if remaining < e_u + wr_e * (pending_bytes + ob + snap):
                if pending:
                    nbytes = pending_bytes + snap
                    remaining -= wr_e * nbytes
                    now += wr_t * nbytes
                    job.active += wr_t * nbytes
                    job.shutdown_flushes += 1
                    pending = pending_bytes = 0
                break
            remaining -= e_u
            now += t_u
            job.active += t_u
            pos += 1
            pending += 1
            pending_bytes += ob
            if pending == batch[job.task] or pos == len(units):
                nbytes = pending_bytes + snap
                remaining -= wr_e * nbytes
                now += wr_t * nbytes
                job.active += wr_t * nbytes
                pending = pending_bytes = 0
                if pos == len(units):
                    job.finish = now
                    job = None
        now += power.t_recharge
