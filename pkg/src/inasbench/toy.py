"""Small hand-checkable instances used by the CLI configs, scripts and tests."""

from __future__ import annotations

import numpy as np

from .executor import ExecutionDesign, TileConfig
from .intermittent import CostParams, PowerParams
from .model import Conv2D, FullyConnected, LayerParams, NetworkSpec, QTensor


def worked_example(e_budget: int = 60):
    """1x1 conv on a 2x2 single-channel input: four units of one MAC, S=4, unit costs.

    Returns (net, input, design, power, costs). With e_budget=60 the run fits
    one power cycle: 16 recovery + 4 * 5 unit + (8 + 16) preservation = 60.
    """
    w = QTensor.from_array(np.array([[[[256]]]]), 8)
    net = NetworkSpec((1, 2, 2), (Conv2D(1, 1, 1),), (LayerParams(w),), 4, 8)
    x = QTensor.from_array(np.full((1, 2, 2), 256), 8)
    design = ExecutionDesign((TileConfig(1, 1, 1),), 4)
    return net, x, design, PowerParams(e_budget), CostParams()


def toy_two_layer():
    """Worked-example conv followed by a 4->2 FC head with a bias. Returns (net, input, design)."""
    conv = LayerParams(QTensor.from_array(np.array([[[[256]]]]), 8))
    fc = LayerParams(
        QTensor.from_array(np.array([[64, -32, 16, 0], [-64, 128, 1, -1]]), 6),
        QTensor.from_array(np.array([1000, -1000]), 14),
    )
    net = NetworkSpec((1, 2, 2), (Conv2D(1, 1, 1), FullyConnected(4, 2)), (conv, fc), 2, 8)
    x = QTensor.from_array(np.array([[[256, -512], [128, 384]]]), 8)
    design = ExecutionDesign((TileConfig(1, 1, 2, ("H", "W", "COUT")), TileConfig(1, 1, 1)), 2)
    return net, x, design
