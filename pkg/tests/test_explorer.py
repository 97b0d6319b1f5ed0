import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import random_costs, random_net, min_budget
from inasbench.errors import FeasibilityError, ParameterError
from inasbench.executor import LOOP_ORDERS, ExecutionDesign, TileConfig, net_geometry
from inasbench.explorer import (
    NAS_CAPS,
    ArchConfig,
    DesignCaps,
    RewardParams,
    SearchSpace,
    StageConfig,
    best_design,
    build_supernet,
    design_space_size,
    enumerate_designs,
    evolve,
    extract_subnet,
    rank_channels,
    reward,
    surrogate_accuracy,
    update_ema,
)
from inasbench.intermittent import CostParams, PowerParams
from inasbench.model import Conv2D, LayerParams, NetworkSpec, QTensor, count_params, validate_network
from inasbench.perfmodel import feasible, predict
from inasbench.toy import worked_example

seeds = st.integers(0, 2**32 - 1)
TOY_SPACE = SearchSpace(input_shape=(1, 8, 8), output_classes=4, stage_counts=(1,), depths=(1, 2),
                        channels=(4, 8), kernels=(1, 3), weight_seed=3)
TOY_POWER = PowerParams(3000, 200, 5)


def _random_caps(rng):
    def pick(pool):
        k = int(rng.integers(1, len(pool) + 1))
        return tuple(int(v) for v in rng.choice(pool, size=k, replace=False))

    orders = tuple(LOOP_ORDERS[i] for i in rng.choice(6, size=int(rng.integers(1, 4)), replace=False))
    return DesignCaps(t_cout=pick([1, 2, 3, 4, 8]), t_h=pick([1, 2, 3, 5, 8]), t_w=pick([1, 2, 4, 6]),
                      loop_orders=orders, batch_sizes=pick([1, 2, 3, 4, 8]))


def _brute_force(net, power, costs, caps):
    per_layer = []
    for geo in net_geometry(net):
        co, ho, wo = geo.out_shape
        opts = [range(1, caps.max_tile + 1) if v is None else v for v in (caps.t_cout, caps.t_h, caps.t_w)]
        per_layer.append({TileConfig(min(a, co), min(b, ho), min(c, wo), o)
                          for a in opts[0] for b in opts[1] for c in opts[2] for o in caps.loop_orders})
    best = None
    for tiles in itertools.product(*per_layer):
        for s in caps.batch_sizes:
            design = ExecutionDesign(tiles, s)
            try:
                est = predict(net, design, power, costs)
            except FeasibilityError:
                continue
            key = (est.latency_ticks, s, tuple(t.key() for t in tiles))
            if best is None or key < best[0]:
                best = (key, design)
    return best


def test_design_count_example():
    net, _, _, _, _ = worked_example()
    caps = DesignCaps(t_cout=(1,), t_h=(1, 2), t_w=(1, 2), batch_sizes=(1, 2))
    designs = list(enumerate_designs(net, caps))
    assert len(designs) == 48 == design_space_size(net, caps)
    assert len(set(designs)) == 48
    one = DesignCaps(t_cout=(1,), t_h=(1,), t_w=(1,), loop_orders=(LOOP_ORDERS[0],), batch_sizes=(1,))
    assert len(list(enumerate_designs(net, one))) == 1


@given(seeds)
def test_design_count_closed_form(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, max_layers=2, max_dim=8)
    caps = _random_caps(rng)
    expected = len(caps.batch_sizes)
    for geo in net_geometry(net):
        co, ho, wo = geo.out_shape
        expected *= (len({min(t, co) for t in caps.t_cout}) * len({min(t, ho) for t in caps.t_h})
                     * len({min(t, wo) for t in caps.t_w}) * len(caps.loop_orders))
    designs = list(enumerate_designs(net, caps))
    assert len(designs) == expected == design_space_size(net, caps)
    keys = [(tuple(t.key() for t in d.tiles), d.batch_size) for d in designs]
    assert keys == sorted(keys)


def test_best_design_worked_example():
    net, _, _, power, costs = worked_example()
    caps = DesignCaps()
    choice = best_design(net, power, costs, 10**9, caps)
    oracle = _brute_force(net, power, costs, caps)
    assert choice.design == oracle[1]
    assert choice.estimate.latency_ticks == oracle[0][0]
    too_low = best_design(net, power, costs, choice.estimate.latency_ticks - 1, caps)
    assert not too_low and "exceeds requirement" in too_low.reason
    assert best_design(net, power, costs, choice.estimate.latency_ticks, caps)


@given(seeds)
def test_best_design_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, max_layers=2, max_dim=6, max_channels=3)
    costs = random_costs(rng, vm_capacity=int(rng.integers(200, 4000)))
    caps = _random_caps(rng)
    some = next(enumerate_designs(net, caps))
    power = PowerParams(int(min_budget(net, some, costs) * rng.uniform(0.8, 3)) + 1,
                        int(rng.integers(0, 40)), int(rng.integers(0, 4)))
    choice = best_design(net, power, costs, 10**12, caps)
    oracle = _brute_force(net, power, costs, caps)
    if oracle is None:
        assert not choice.feasible
    else:
        assert choice.design == oracle[1]
        assert feasible(net, choice.design, power, costs)


@given(seeds)
def test_larger_caps_never_worse(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, max_layers=2, max_dim=6, max_channels=3)
    costs = random_costs(rng)
    small = _random_caps(rng)
    big = DesignCaps(t_cout=small.t_cout + (1, 2), t_h=small.t_h + (2,), t_w=small.t_w + (1,),
                     loop_orders=LOOP_ORDERS, batch_sizes=small.batch_sizes + (5,))
    power = PowerParams(min_budget(net, ExecutionDesign(tuple(TileConfig(1, 1, 1) for _ in net.layers), 1), costs) * 2)
    a = best_design(net, power, costs, 10**12, small)
    b = best_design(net, power, costs, 10**12, big)
    if a:
        assert b and b.estimate.latency_ticks <= a.estimate.latency_ticks


def test_caps_validation():
    with pytest.raises(ParameterError):
        DesignCaps(t_h=(0, 1))
    with pytest.raises(ParameterError):
        DesignCaps(loop_orders=(("H", "W", "W"),))
    with pytest.raises(ParameterError):
        DesignCaps(batch_sizes=())


def test_search_space_counts():
    space = SearchSpace()
    assert space.size() == 24 ** 2 + 24 ** 3 + 24 ** 4
    assert TOY_SPACE.size() == 8 == len(list(TOY_SPACE.archs()))
    with pytest.raises(ParameterError):
        SearchSpace(input_shape=(1, 4, 4), stage_counts=(3,))


def test_extract_identity():
    space = SearchSpace(input_shape=(2, 8, 8), stage_counts=(2,))
    supernet = build_supernet(space, 2)
    full = ArchConfig((StageConfig(2, 16, 5),) * 2)
    net = extract_subnet(supernet, full)
    assert net.layers == supernet.layers
    assert net.params == supernet.params


def test_kernel_crop_is_centre():
    supernet = build_supernet(TOY_SPACE, 1)
    net = extract_subnet(supernet, ArchConfig((StageConfig(1, 16, 3),)))
    w5 = supernet.params[0].weight.array()
    w3 = net.params[0].weight.array()
    assert np.array_equal(w3, w5[:, :, 1:4, 1:4])
    w1 = extract_subnet(supernet, ArchConfig((StageConfig(1, 16, 1),))).params[0].weight.array()
    assert np.array_equal(w1, w5[:, :, 2:3, 2:3])


def _l1_oracle(weight, keep):
    norms = [(sum(abs(int(v)) for v in weight[i].ravel()), i) for i in range(weight.shape[0])]
    chosen = sorted(norms, key=lambda p: (-p[0], p[1]))[:keep]
    return sorted(i for _, i in chosen)


@given(seeds, st.integers(1, 8))
def test_rank_channels_matches_oracle(seed, keep):
    rng = np.random.default_rng(seed)
    weight = rng.integers(-3, 4, size=(8, 2, 3, 3))
    assert rank_channels(weight, keep).tolist() == _l1_oracle(weight, keep)


def test_channel_shrink_8_to_4():
    space = SearchSpace(input_shape=(1, 8, 8), stage_counts=(1,), weight_seed=11)
    supernet = build_supernet(space, 1)
    net = extract_subnet(supernet, ArchConfig((StageConfig(2, 4, 5),)))
    w0 = supernet.params[0].weight.array()
    keep0 = _l1_oracle(w0, 4)
    assert np.array_equal(net.params[0].weight.array(), w0[keep0])
    w1 = supernet.params[1].weight.array()
    keep1 = _l1_oracle(w1, 4)
    assert np.array_equal(net.params[1].weight.array(), w1[keep1][:, keep0])
    fc = supernet.params[3].weight.array().reshape(10, 16, 16)
    assert np.array_equal(net.params[3].weight.array(), fc[:, keep1].reshape(10, -1))


@given(st.data())
def test_extracted_nets_are_valid(data):
    space = SearchSpace(input_shape=(2, 8, 8), stage_counts=(1, 2, 3))
    n = data.draw(st.sampled_from(space.stage_counts))
    stages = [StageConfig(data.draw(st.sampled_from(space.depths)), data.draw(st.sampled_from(space.channels)),
                          data.draw(st.sampled_from(space.kernels))) for _ in range(n)]
    net = extract_subnet(build_supernet(space, n), ArchConfig(tuple(stages)))
    assert validate_network(net) == []
    assert 0.30 <= surrogate_accuracy(net) <= 0.95


def test_extract_rejects_oversized_arch():
    supernet = build_supernet(TOY_SPACE, 1)
    with pytest.raises(ParameterError):
        extract_subnet(supernet, ArchConfig((StageConfig(1, 17, 3),)))
    with pytest.raises(ParameterError):
        extract_subnet(supernet, ArchConfig((StageConfig(1, 4, 3),) * 2))


def test_supernet_is_seeded():
    a, b = build_supernet(TOY_SPACE, 1), build_supernet(TOY_SPACE, 1)
    assert a.params == b.params
    other = SearchSpace(input_shape=(1, 8, 8), stage_counts=(1,), weight_seed=4)
    assert build_supernet(other, 1).params != a.params


def _net_with_params(n):
    weight = QTensor.from_array(np.ones((n, 1, 1, 1), dtype=np.int64), 8)
    return NetworkSpec((1, 2, 2), (Conv2D(1, n, 1, 1, 0),), (LayerParams(weight),), 4 * n, 8)


def test_surrogate_accuracy_values():
    assert count_params(_net_with_params(1000)) == 1000
    assert surrogate_accuracy(_net_with_params(1000)) == pytest.approx(0.38)
    assert surrogate_accuracy(_net_with_params(1)) == pytest.approx(0.30 + 0.08 * math.log2(1.001))
    assert surrogate_accuracy(_net_with_params(300000)) == 0.95


def test_reward_examples():
    plus = RewardParams(1000, latency_sign=1)
    minus = RewardParams(1000)
    assert reward(0.8, 0.75, 500, plus) == pytest.approx(0.55)
    assert reward(0.6, 0.6, 1000, plus) == pytest.approx(1.0)
    assert reward(0.8, 0.75, 500, minus) == pytest.approx(-0.45)
    assert update_ema(None, 0.7, minus) == 0.7
    assert update_ema(0.5, 0.7, minus) == pytest.approx(0.52)
    with pytest.raises(ParameterError):
        RewardParams(1000, latency_sign=0)
    with pytest.raises(ParameterError):
        RewardParams(0)


def _search(seed=5, **kw):
    params = kw.pop("params", RewardParams(200000))
    return evolve(TOY_SPACE, TOY_POWER, CostParams(), params, seed, **kw)


def test_evolve_deterministic():
    a = _search(population=4, generations=3)
    b = _search(population=4, generations=3)
    assert a == b
    assert a.feasible
    assert predict(a.net, a.design, TOY_POWER, CostParams()).latency_ticks <= 200000


def test_evolve_single_arch_space():
    space = SearchSpace(input_shape=(1, 8, 8), output_classes=4, stage_counts=(1,), depths=(2,),
                        channels=(8,), kernels=(3,), weight_seed=3)
    params = RewardParams(200000)
    res = evolve(space, TOY_POWER, CostParams(), params, seed=1, population=3, generations=2)
    assert res.arch == ArchConfig((StageConfig(2, 8, 3),))
    net = extract_subnet(build_supernet(space, 1), res.arch)
    choice = best_design(net, TOY_POWER, CostParams(), params.latency_requirement, NAS_CAPS)
    assert (res.design, res.estimate) == (choice.design, choice.estimate)


def _exhaustive_best(space, power, costs, params):
    best = None
    for arch in space.archs():
        net = extract_subnet(build_supernet(space, len(arch.stages)), arch)
        choice = best_design(net, power, costs, params.latency_requirement, NAS_CAPS)
        if not choice:
            continue
        fit = surrogate_accuracy(net) + params.latency_sign * choice.estimate.latency_ticks / params.latency_requirement
        if best is None or (-fit, arch.key()) < (-best[0], best[1].key()):
            best = (fit, arch)
    return best


@pytest.mark.parametrize("sign", [-1, 1])
def test_evolve_matches_exhaustive_oracle(sign):
    params = RewardParams(200000, latency_sign=sign)
    oracle = _exhaustive_best(TOY_SPACE, TOY_POWER, CostParams(), params)
    res = _search(seed=9, params=params, population=3, generations=3)
    assert res.arch == oracle[1]
    seen = {repr(a) for h in res.history for a in h["evaluated"]}
    assert len(seen) == TOY_SPACE.size()


def test_constant_accuracy_shift_keeps_choices():
    base = _search(population=4, generations=2)
    shifted = _search(population=4, generations=2, accuracy_fn=lambda n: surrogate_accuracy(n) + 0.01)
    assert shifted.arch == base.arch
    for h0, h1 in zip(base.history, shifted.history):
        assert h0["evaluated"] == h1["evaluated"]
        assert h1["rewards"] == pytest.approx(h0["rewards"])


def test_evolve_infeasible():
    res = _search(population=2, generations=1, params=RewardParams(1))
    assert not res.feasible and res.history and "no feasible" in res.reason
    with pytest.raises(ParameterError):
        _search(generations=0)
