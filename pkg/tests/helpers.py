"""Seeded random instances shared by the test modules."""

import numpy as np

from inasbench.executor import LOOP_ORDERS, ExecutionDesign, TileConfig, net_geometry
from inasbench.intermittent import CostParams, PowerParams
from inasbench.model import (
    Conv2D,
    FullyConnected,
    LayerParams,
    MaxPool2D,
    NetworkSpec,
    QTensor,
)
from inasbench.perfmodel import feasible, preservation_cost, unit_cost


def random_net(rng, max_layers=4, max_dim=16, max_channels=4, act_frac=8, biases=True, fc_head=None):
    """Chain-consistent random net; kernels odd, weights small enough to avoid constant saturation."""
    c = int(rng.integers(1, max_channels + 1))
    h = int(rng.integers(2, max_dim + 1))
    w = int(rng.integers(2, max_dim + 1))
    input_shape = (c, h, w)
    n_layers = int(rng.integers(1, max_layers + 1))
    layers, params = [], []
    shape = input_shape
    for i in range(n_layers):
        c, h, w = shape
        last = i == n_layers - 1
        kind = rng.choice(["conv", "conv", "pool", "fc"]) if not last else rng.choice(["conv", "fc"])
        if fc_head is not None and last:
            kind = "fc" if fc_head else "conv"
        if kind == "pool" and min(h, w) >= 2:
            win = int(rng.integers(1, min(3, h, w) + 1))
            layer = MaxPool2D(win, int(rng.integers(1, win + 1)))
            p = None
        elif kind == "fc":
            layer = FullyConnected(c * h * w, int(rng.integers(1, 6)))
            p = _params(rng, (layer.n_out, layer.n_in), act_frac, biases)
        else:
            ks = [k for k in (1, 3, 5) if k <= min(h, w) + 2]
            k = int(rng.choice(ks))
            pad = int(rng.integers(0, k // 2 + 1))
            if h + 2 * pad < k or w + 2 * pad < k:
                pad = k // 2
            s = int(rng.integers(1, 3))
            layer = Conv2D(c, int(rng.integers(1, max_channels + 1)), k, s, pad)
            p = _params(rng, (layer.c_out, c, k, k), act_frac, biases)
        layers.append(layer)
        params.append(p)
        from inasbench.model import conv_output_shape

        shape = conv_output_shape(layer, shape)
    classes = int(np.prod(shape))
    return NetworkSpec(input_shape, tuple(layers), tuple(params), classes, act_frac)


def _params(rng, shape, act_frac, biases):
    wfrac = int(rng.integers(4, 9))
    weight = QTensor.from_array(rng.integers(-200, 201, size=shape), wfrac)
    bias = None
    if biases and rng.random() < 0.5 and wfrac + act_frac <= 15:
        bias = QTensor.from_array(rng.integers(-3000, 3001, size=(shape[0],)), wfrac + act_frac)
    return LayerParams(weight, bias)


def random_input(rng, net):
    return QTensor.from_array(rng.integers(-300, 301, size=net.input_shape), net.act_frac_bits)


def random_design(rng, net, max_s=6):
    tiles = []
    for geo in net_geometry(net):
        co, ho, wo = geo.out_shape
        tiles.append(TileConfig(
            int(rng.integers(1, co + 1)),
            int(rng.integers(1, ho + 1)),
            int(rng.integers(1, wo + 1)),
            LOOP_ORDERS[int(rng.integers(0, 6))],
        ))
    return ExecutionDesign(tuple(tiles), int(rng.integers(1, max_s + 1)))


def random_costs(rng, vm_capacity=1 << 20):
    vals = rng.integers(0, 4, size=6)
    return CostParams(*(int(v) for v in vals), vm_capacity=vm_capacity)


def min_budget(net, design, costs):
    """Smallest e_budget for which ``design`` is energy-feasible."""
    need = 0
    for layer, tile in zip(net.layers, design.tiles):
        need = max(need, 16 * costs.e_nvm_rd + unit_cost(layer, tile, costs)[0]
                   + preservation_cost(layer, tile, 1, costs)[0])
    return max(need, 1)


def random_feasible_instance(rng, max_layers=3, max_dim=10, max_channels=4):
    """(net, design, power, costs) that passes ``feasible``; budget within a few units of the minimum."""
    while True:
        net = random_net(rng, max_layers=max_layers, max_dim=max_dim, max_channels=max_channels)
        design = random_design(rng, net)
        costs = random_costs(rng)
        lo = min_budget(net, design, costs)
        budget = int(lo + rng.integers(0, 3 * lo + 2))
        power = PowerParams(budget, int(rng.integers(0, 50)), int(rng.integers(0, 5)))
        if feasible(net, design, power, costs):
            return net, design, power, costs


def random_taskset(rng, max_tasks=4):
    """(tasks, power, costs) with 2..max_tasks small feasible tasks and a utilisation near the supply rate."""
    from inasbench.errors import SupplyError
    from inasbench.scheduler import TaskSpec, supply_model, task_wcet

    while True:
        costs = random_costs(rng)
        n = int(rng.integers(2, max_tasks + 1))
        pairs = []
        for _ in range(n):
            net = random_net(rng, max_layers=2, max_dim=5, max_channels=2)
            pairs.append((net, random_design(rng, net, max_s=4)))
        lo = max(min_budget(net, d, costs) for net, d in pairs)
        power = PowerParams(int(lo * rng.uniform(1.5, 4)) + 20, int(rng.integers(0, 60)), int(rng.integers(0, 6)))
        if not all(feasible(net, d, power, costs) for net, d in pairs):
            continue
        stub = [TaskSpec(i, net, d, 1, 1) for i, (net, d) in enumerate(pairs)]
        try:
            supply = supply_model(power, costs, stub)
        except SupplyError:
            continue
        wcets = [task_wcet(t, power, costs) for t in stub]
        mult = [int(rng.choice([1, 2, 3, 4, 6])) for _ in pairs]
        target = rng.uniform(0.2, 1.2)
        demand = sum(c / m for c, m in zip(wcets, mult))
        base = max(1, int(np.ceil(demand / (float(supply.rate) * target))))
        tasks = []
        for i, ((net, d), m) in enumerate(zip(pairs, mult)):
            period = base * m
            deadline = int(rng.integers(max(1, period // 2), period + 1))
            tasks.append(TaskSpec(i, net, d, period, deadline, int(rng.integers(0, period))))
        return tasks, power, costs
