"""Execution-design search and evolutionary architecture search.

``best_design`` is an exhaustive argmin of predicted latency over a capped
design space. ``evolve`` searches child networks carved out of a seeded
supernet by width, kernel and depth shrinking, scoring each feasible child
with a pluggable accuracy evaluator and a latency-aware reward.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import ParameterError
from .executor import LOOP_ORDERS, ExecutionDesign, TileConfig, net_geometry, tile_footprint
from .intermittent import CostParams, PowerParams
from .model import (
    Conv2D,
    FullyConnected,
    LayerParams,
    MaxPool2D,
    NetworkSpec,
    QTensor,
    check_network,
    count_params,
)
from .perfmodel import PerfEstimate, predict, preservation_cost, unit_cost
from .prng import SplitMix64

# ---------------------------------------------------------------------------
# design space


@dataclass(frozen=True)
class DesignCaps:
    """Candidate values per design knob. ``None`` means 1..min(dim, max_tile).

    Values above a layer's dimension are clamped to it. With ``tied`` every
    layer uses the same (t_cout, t_h, t_w, loop order) choice, clamped per
    layer, which keeps the space small enough for architecture search.
    """

    t_cout: Optional[tuple] = None
    t_h: Optional[tuple] = None
    t_w: Optional[tuple] = None
    loop_orders: tuple = LOOP_ORDERS
    batch_sizes: tuple = tuple(range(1, 17))
    max_tile: int = 8
    tied: bool = False

    def __post_init__(self):
        for name in ("t_cout", "t_h", "t_w"):
            v = getattr(self, name)
            if v is not None:
                v = tuple(sorted(set(int(t) for t in v)))
                if not v or v[0] < 1:
                    raise ParameterError(f"{name} candidates must be non-empty and >= 1")
                object.__setattr__(self, name, v)
        orders = tuple(tuple(o) for o in self.loop_orders)
        if not orders or any(o not in LOOP_ORDERS for o in orders):
            raise ParameterError("loop_orders must be a non-empty subset of the six permutations")
        object.__setattr__(self, "loop_orders", tuple(sorted(set(orders), key=LOOP_ORDERS.index)))
        sizes = tuple(sorted(set(int(s) for s in self.batch_sizes)))
        if not sizes or sizes[0] < 1:
            raise ParameterError("batch_sizes must be non-empty and >= 1")
        object.__setattr__(self, "batch_sizes", sizes)
        if self.max_tile < 1:
            raise ParameterError("max_tile must be >= 1")

    def values(self, name: str, dim: int) -> tuple:
        raw = getattr(self, name)
        if raw is None:
            raw = range(1, self.max_tile + 1)
        return tuple(sorted(set(min(int(t), dim) for t in raw)))


NAS_CAPS = DesignCaps(t_cout=(1, 2, 4, 8), t_h=(1, 2, 4, 8), t_w=(1, 2, 4, 8),
                      loop_orders=(LOOP_ORDERS[0],), batch_sizes=(1, 2, 4, 8, 16), tied=True)


def _layer_options(geo, caps: DesignCaps, tile=None) -> list:
    co, ho, wo = geo.out_shape
    if tile is not None:
        t_cout, t_h, t_w, order = tile
        return [TileConfig(min(t_cout, co), min(t_h, ho), min(t_w, wo), order)]
    opts = [
        TileConfig(a, b, c, o)
        for a in caps.values("t_cout", co)
        for b in caps.values("t_h", ho)
        for c in caps.values("t_w", wo)
        for o in caps.loop_orders
    ]
    return sorted(opts, key=TileConfig.key)


def _tile_choices(net: NetworkSpec, caps: DesignCaps) -> list:
    """Per-layer tile lists (untied) or a list of tied tuples expanded to per-layer tiles."""
    geos = net_geometry(net)
    if not caps.tied:
        return [tuple(p) for p in itertools.product(*(_layer_options(g, caps) for g in geos))]
    big = [max(g.out_shape) for g in geos]
    dim = max(big) if big else 1
    seen, out = set(), []
    for a in caps.values("t_cout", dim):
        for b in caps.values("t_h", dim):
            for c in caps.values("t_w", dim):
                for o in caps.loop_orders:
                    tiles = tuple(_layer_options(g, caps, (a, b, c, o))[0] for g in geos)
                    if tiles not in seen:
                        seen.add(tiles)
                        out.append(tiles)
    return sorted(out, key=lambda ts: tuple(t.key() for t in ts))


def enumerate_designs(net: NetworkSpec, caps: DesignCaps = DesignCaps()) -> Iterator[ExecutionDesign]:
    """Every design within ``caps`` in lexicographic order of (tile keys..., S)."""
    check_network(net)
    for tiles in _tile_choices(net, caps):
        for s in caps.batch_sizes:
            yield ExecutionDesign(tiles, s)


def design_space_size(net: NetworkSpec, caps: DesignCaps = DesignCaps()) -> int:
    check_network(net)
    return len(_tile_choices(net, caps)) * len(caps.batch_sizes)


def design_order_key(design: ExecutionDesign) -> tuple:
    """Tie-break order among equal latencies: smaller S first, then lexicographic tiles."""
    return (design.batch_size, tuple(t.key() for t in design.tiles))


@dataclass(frozen=True)
class DesignChoice:
    feasible: bool
    design: Optional[ExecutionDesign] = None
    estimate: Optional[PerfEstimate] = None
    reason: str = ""
    evaluated: int = 0

    def __bool__(self):
        return self.feasible


def _layer_ok(layer, tile, S, power, costs) -> bool:
    need = 16 * costs.e_nvm_rd + unit_cost(layer, tile, costs)[0] + preservation_cost(layer, tile, 1, costs)[0]
    return need <= power.e_budget and tile_footprint(layer, tile, S).total_bytes <= costs.vm_capacity


def best_design(net: NetworkSpec, power: PowerParams, costs: CostParams, latency_requirement,
                caps: DesignCaps = DesignCaps()) -> DesignChoice:
    """Minimum predicted latency over the feasible designs within ``caps``.

    Ties go to the smaller S, then to the lexicographically smaller tiles.
    Designs failing a per-layer check are skipped without calling predict.
    """
    check_network(net)
    best, best_key, evaluated = None, None, 0
    for tiles in _tile_choices(net, caps):
        for s in caps.batch_sizes:
            if not all(_layer_ok(l, t, s, power, costs) for l, t in zip(net.layers, tiles)):
                continue
            design = ExecutionDesign(tiles, s)
            est = predict(net, design, power, costs)
            evaluated += 1
            key = (est.latency_ticks, design_order_key(design))
            if best_key is None or key < best_key:
                best, best_key = (design, est), key
    if best is None:
        return DesignChoice(False, reason="no design within caps is feasible", evaluated=evaluated)
    if best[1].latency_ticks > latency_requirement:
        return DesignChoice(False, reason=f"best latency {best[1].latency_ticks} exceeds requirement {latency_requirement}",
                            evaluated=evaluated)
    return DesignChoice(True, best[0], best[1], evaluated=evaluated)


# ---------------------------------------------------------------------------
# architecture space and supernet

DEPTHS = (1, 2)
CHANNELS = (4, 8, 12, 16)
KERNELS = (1, 3, 5)
STAGE_COUNTS = (2, 3, 4)


@dataclass(frozen=True)
class StageConfig:
    depth: int
    channels: int
    kernel: int


@dataclass(frozen=True)
class ArchConfig:
    stages: tuple

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageConfig) else StageConfig(*s) for s in self.stages))

    def key(self) -> tuple:
        return (len(self.stages),) + tuple((s.depth, s.channels, s.kernel) for s in self.stages)


@dataclass(frozen=True)
class SearchSpace:
    """Architecture choices plus the supernet they are carved from."""

    input_shape: tuple = (3, 32, 32)
    output_classes: int = 10
    stage_counts: tuple = STAGE_COUNTS
    depths: tuple = DEPTHS
    channels: tuple = CHANNELS
    kernels: tuple = KERNELS
    act_frac_bits: int = 8
    weight_frac_bits: int = 8
    weight_seed: int = 0

    def __post_init__(self):
        for name in ("input_shape", "stage_counts", "depths", "channels", "kernels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("stage_counts", "depths", "channels", "kernels"):
            if not getattr(self, name):
                raise ParameterError(f"{name} must be non-empty")
        if any(d not in DEPTHS for d in self.depths) or any(k not in KERNELS for k in self.kernels):
            raise ParameterError("depths must be within (1, 2) and kernels within (1, 3, 5)")
        if any(c < 1 or c > max(CHANNELS) for c in self.channels):
            raise ParameterError("channels must be within 1..16")
        _, h, w = self.input_shape
        if any(n < 1 or min(h, w) >> n < 1 for n in self.stage_counts):
            raise ParameterError(f"input {self.input_shape} cannot take {max(self.stage_counts)} 2x2 pools")

    def archs(self) -> Iterator[ArchConfig]:
        """Every architecture in lexicographic key order."""
        stage_opts = [StageConfig(d, c, k) for d in sorted(self.depths) for c in sorted(self.channels)
                      for k in sorted(self.kernels)]
        for n in sorted(self.stage_counts):
            for stages in itertools.product(stage_opts, repeat=n):
                yield ArchConfig(stages)

    def size(self) -> int:
        per = len(self.depths) * len(self.channels) * len(self.kernels)
        return sum(per ** n for n in self.stage_counts)

    def contains(self, arch: ArchConfig) -> bool:
        return len(arch.stages) in self.stage_counts and all(
            s.depth in self.depths and s.channels in self.channels and s.kernel in self.kernels
            for s in arch.stages)


SUPER_DEPTH, SUPER_CHANNELS, SUPER_KERNEL = 2, 16, 5


def _seeded_weights(rng: SplitMix64, shape, fan_in: int) -> np.ndarray:
    r = max(1, int(256 / math.sqrt(fan_in)))
    draws = rng.next_block(math.prod(shape)) % np.uint64(2 * r + 1)
    return (draws.astype(np.int64) - r).reshape(shape)


def build_supernet(space: SearchSpace, n_stages: int) -> NetworkSpec:
    """Maximal net (two 5x5 convs of 16 channels per stage) with SplitMix64 weights."""
    c, h, w = space.input_shape
    rng = SplitMix64(space.weight_seed * 8 + n_stages)
    layers, params = [], []
    for _ in range(n_stages):
        for _ in range(SUPER_DEPTH):
            conv = Conv2D(c, SUPER_CHANNELS, SUPER_KERNEL, 1, SUPER_KERNEL // 2)
            wt = _seeded_weights(rng, (SUPER_CHANNELS, c, SUPER_KERNEL, SUPER_KERNEL), c * SUPER_KERNEL ** 2)
            layers.append(conv)
            params.append(LayerParams(QTensor.from_array(wt, space.weight_frac_bits)))
            c = SUPER_CHANNELS
        layers.append(MaxPool2D(2, 2))
        params.append(None)
        h, w = h // 2, w // 2
    n_in = c * h * w
    layers.append(FullyConnected(n_in, space.output_classes))
    params.append(LayerParams(QTensor.from_array(
        _seeded_weights(rng, (space.output_classes, n_in), n_in), space.weight_frac_bits)))
    return NetworkSpec(space.input_shape, tuple(layers), tuple(params), space.output_classes, space.act_frac_bits)


def rank_channels(weight: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the ``keep`` output channels with the largest L1 norm, in ascending index order."""
    l1 = np.abs(weight.astype(np.int64)).reshape(weight.shape[0], -1).sum(axis=1)
    order = sorted(range(len(l1)), key=lambda i: (-int(l1[i]), i))
    return np.array(sorted(order[:keep]), dtype=np.int64)


def extract_subnet(supernet: NetworkSpec, arch: ArchConfig) -> NetworkSpec:
    """Child net by width (top-L1 channels), kernel (centre crop) and depth (drop last conv) shrinking."""
    check_network(supernet)
    convs_per_stage = SUPER_DEPTH
    n_stages = sum(isinstance(l, MaxPool2D) for l in supernet.layers)
    if len(arch.stages) != n_stages:
        raise ParameterError(f"arch has {len(arch.stages)} stages, supernet has {n_stages}")
    for i, s in enumerate(arch.stages):
        if not (1 <= s.depth <= SUPER_DEPTH and 1 <= s.channels <= SUPER_CHANNELS
                and s.kernel in KERNELS and s.kernel <= SUPER_KERNEL):
            raise ParameterError(f"stage {i} {s} exceeds the supernet (d<=2, c<=16, k in 1/3/5)")

    layers, params = [], []
    kept_in = np.arange(supernet.input_shape[0])
    idx = 0
    for stage in arch.stages:
        stage_layers = list(range(idx, idx + convs_per_stage))
        for j, li in enumerate(stage_layers):
            if j >= stage.depth:
                continue
            w = supernet.params[li].weight.array()
            keep = rank_channels(w, stage.channels)
            off = (SUPER_KERNEL - stage.kernel) // 2
            sub = w[keep][:, kept_in][:, :, off:off + stage.kernel, off:off + stage.kernel]
            layers.append(Conv2D(len(kept_in), len(keep), stage.kernel, 1, stage.kernel // 2))
            params.append(LayerParams(QTensor.from_array(sub, supernet.params[li].weight.frac_bits)))
            kept_in = keep
        layers.append(supernet.layers[idx + convs_per_stage])
        params.append(None)
        idx += convs_per_stage + 1

    fc = supernet.layers[idx]
    fw = supernet.params[idx].weight.array()
    c_full = SUPER_CHANNELS
    hw = fc.n_in // c_full
    cols = (kept_in[:, None] * hw + np.arange(hw)[None, :]).reshape(-1)
    layers.append(FullyConnected(len(cols), fc.n_out))
    params.append(LayerParams(QTensor.from_array(fw[:, cols], supernet.params[idx].weight.frac_bits)))
    net = NetworkSpec(supernet.input_shape, tuple(layers), tuple(params), supernet.output_classes,
                      supernet.act_frac_bits)
    check_network(net)
    return net


# ---------------------------------------------------------------------------
# accuracy surrogate and reward


def surrogate_accuracy(net: NetworkSpec) -> float:
    """Placeholder for a trained model's accuracy: grows with log parameter count, capped at 0.95."""
    return min(0.95, 0.30 + 0.08 * math.log2(1 + count_params(net) / 1000))


@dataclass(frozen=True)
class RewardParams:
    latency_requirement: float
    ema_decay: float = 0.9
    latency_sign: int = -1

    def __post_init__(self):
        if not self.latency_requirement > 0:
            raise ParameterError("latency_requirement must be > 0")
        if not 0 < self.ema_decay < 1:
            raise ParameterError("ema_decay must be in (0, 1)")
        if self.latency_sign not in (1, -1):
            raise ParameterError("latency_sign must be +1 or -1")


def reward(acc: float, ema: float, latency, params: RewardParams) -> float:
    return acc - ema + params.latency_sign * (latency / params.latency_requirement)


def update_ema(ema: Optional[float], acc: float, params: RewardParams) -> float:
    if ema is None:
        return acc
    return params.ema_decay * ema + (1 - params.ema_decay) * acc


# ---------------------------------------------------------------------------
# evolutionary search


@dataclass(frozen=True)
class Candidate:
    arch: ArchConfig
    feasible: bool
    fitness: float  # acc + sign * latency / L_req; -inf when infeasible
    accuracy: Optional[float] = None
    latency: Optional[int] = None
    design: Optional[ExecutionDesign] = None
    estimate: Optional[PerfEstimate] = None
    reason: str = ""


@dataclass
class SearchResult:
    feasible: bool
    arch: Optional[ArchConfig] = None
    net: Optional[NetworkSpec] = None
    design: Optional[ExecutionDesign] = None
    estimate: Optional[PerfEstimate] = None
    accuracy: Optional[float] = None
    reward: Optional[float] = None
    history: list = field(default_factory=list)
    reason: str = ""


class _Evaluator:
    def __init__(self, space, power, costs, params, caps, accuracy_fn):
        self.space, self.power, self.costs, self.params = space, power, costs, params
        self.caps, self.accuracy_fn = caps, accuracy_fn
        self.supernets = {}
        self.cache = {}

    def net(self, arch: ArchConfig) -> NetworkSpec:
        n = len(arch.stages)
        if n not in self.supernets:
            self.supernets[n] = build_supernet(self.space, n)
        return extract_subnet(self.supernets[n], arch)

    def __call__(self, arch: ArchConfig) -> Candidate:
        key = arch.key()
        if key not in self.cache:
            net = self.net(arch)
            choice = best_design(net, self.power, self.costs, self.params.latency_requirement, self.caps)
            if not choice.feasible:
                self.cache[key] = Candidate(arch, False, -math.inf, reason=choice.reason)
            else:
                acc = float(self.accuracy_fn(net))
                lat = choice.estimate.latency_ticks
                fit = acc + self.params.latency_sign * lat / self.params.latency_requirement
                self.cache[key] = Candidate(arch, True, fit, acc, lat, choice.design, choice.estimate)
        return self.cache[key]


def _random_stage(space: SearchSpace, rng: SplitMix64) -> StageConfig:
    return StageConfig(rng.choice(space.depths), rng.choice(space.channels), rng.choice(space.kernels))


def _random_arch(space: SearchSpace, rng: SplitMix64) -> ArchConfig:
    n = rng.choice(space.stage_counts)
    return ArchConfig(tuple(_random_stage(space, rng) for _ in range(n)))


def _mutate(arch: ArchConfig, space: SearchSpace, rng: SplitMix64, rate: float) -> ArchConfig:
    stages = list(arch.stages)
    if rng.random() < rate:
        n = rng.choice(space.stage_counts)
        stages = stages[:n] + [_random_stage(space, rng) for _ in range(n - len(stages))]
    out = []
    for s in stages:
        d = rng.choice(space.depths) if rng.random() < rate else s.depth
        c = rng.choice(space.channels) if rng.random() < rate else s.channels
        k = rng.choice(space.kernels) if rng.random() < rate else s.kernel
        out.append(StageConfig(d, c, k))
    return ArchConfig(tuple(out))


def _rank_key(c: Candidate) -> tuple:
    return (-c.fitness, c.arch.key())


def _unseen_fallback(space: SearchSpace, seen: set) -> Optional[ArchConfig]:
    for arch in space.archs():
        if arch.key() not in seen:
            return arch
    return None


def evolve(space: SearchSpace, power: PowerParams, costs: CostParams, reward_params: RewardParams,
           seed: int, population: int = 16, generations: int = 10, mutation_rate: float = 0.1,
           tournament: int = 3, elitism: int = 2, caps: DesignCaps = NAS_CAPS,
           accuracy_fn: Callable[[NetworkSpec], float] = surrogate_accuracy,
           max_rerolls: int = 20) -> SearchResult:
    """Seeded evolutionary search for the best accuracy/latency trade-off under ``L_req``.

    Every generation produces ``population`` architectures not evaluated
    before; the ``elitism`` best survivors join them as selection parents.
    Rewards within a generation share one EMA baseline, so ranking by reward
    and by ``acc + sign * latency / L_req`` agree inside a generation; the
    latter is used to compare across generations.
    """
    if generations < 1 or population < 1:
        raise ParameterError("generations and population must be >= 1")
    if tournament < 1 or elitism < 0:
        raise ParameterError("tournament must be >= 1 and elitism >= 0")
    if not 0 <= mutation_rate <= 1:
        raise ParameterError("mutation_rate must be in [0, 1]")

    rng = SplitMix64(seed)
    evaluate = _Evaluator(space, power, costs, reward_params, caps, accuracy_fn)
    seen: set = set()
    history = []
    ema: Optional[float] = None
    best: Optional[Candidate] = None
    best_reward = None
    pool: list = []

    for gen in range(generations):
        # all random draws for this generation happen before any evaluation
        children = []
        for _ in range(population):
            arch = None
            for _ in range(max_rerolls):
                if gen == 0 or not pool:
                    cand = _random_arch(space, rng)
                else:
                    entrants = [pool[rng.randbelow(len(pool))] for _ in range(tournament)]
                    parent = min(entrants, key=_rank_key)
                    cand = _mutate(parent.arch, space, rng, mutation_rate)
                if cand.key() not in seen:
                    arch = cand
                    break
            if arch is None:
                arch = _unseen_fallback(space, seen)
                if arch is None:
                    break
            seen.add(arch.key())
            children.append(arch)
        if not children:
            break

        evaluated = [evaluate(a) for a in children]
        feasible_now = [c for c in evaluated if c.feasible]
        if ema is None and feasible_now:
            ema = feasible_now[0].accuracy
        rewards = {}
        for c in feasible_now:
            rewards[c.arch.key()] = reward(c.accuracy, ema, c.latency, reward_params)
            if best is None or _rank_key(c) < _rank_key(best):
                best, best_reward = c, rewards[c.arch.key()]
        history.append({
            "generation": gen,
            "ema": ema,
            "evaluated": [list(a.key()) for a in children],
            "feasible": len(feasible_now),
            "best_fitness": max((c.fitness for c in feasible_now), default=None),
            "rewards": [rewards.get(c.arch.key()) for c in evaluated],
        })
        for c in feasible_now:
            ema = update_ema(ema, c.accuracy, reward_params)
        elites = sorted(pool, key=_rank_key)[:elitism]
        pool = sorted(elites + evaluated, key=_rank_key)

    if best is None:
        return SearchResult(False, history=history, reason="no feasible architecture found")
    return SearchResult(True, best.arch, evaluate.net(best.arch), best.design, best.estimate,
                        best.accuracy, best_reward, history)
