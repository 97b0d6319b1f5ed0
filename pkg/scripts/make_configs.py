"""Regenerate the example configs under configs/ from the toy instances."""

import argparse
from pathlib import Path

from inasbench import artifacts
from inasbench.explorer import SearchSpace
from inasbench.intermittent import CostParams, FaultTrace, PowerParams
from inasbench.scheduler import TaskSpec
from inasbench.toy import toy_two_layer, worked_example


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=Path(__file__).resolve().parent.parent / "configs", type=Path)
    args = ap.parse_args()

    d = args.out / "worked_example"
    d.mkdir(parents=True, exist_ok=True)
    net, x, design, power, costs = worked_example()
    for name, obj in (("net", net), ("input", x), ("design", design), ("power", power), ("costs", costs),
                      ("faults", FaultTrace((30,)))):
        artifacts.save_json(obj, d / f"{name}.json")
    artifacts.save_json(PowerParams(20), d / "power_infeasible.json")

    d = args.out / "toy"
    d.mkdir(parents=True, exist_ok=True)
    net2, x2, design2 = toy_two_layer()
    for name, obj in (("net", net2), ("input", x2), ("design", design2)):
        artifacts.save_json(obj, d / f"{name}.json")
    tasks = [TaskSpec(0, net, design, 400, 400), TaskSpec(1, net2, design2, 600, 500, 50)]
    artifacts.save_json(tasks, d / "taskset.json")
    artifacts.save_json(PowerParams(200, 50, 2), d / "power.json")

    d = args.out / "nas"
    d.mkdir(parents=True, exist_ok=True)
    space = SearchSpace(input_shape=(1, 16, 16), output_classes=4, stage_counts=(2,), depths=(1, 2),
                        channels=(4, 8), kernels=(1, 3), weight_seed=1)
    artifacts.save_json(space, d / "space.json")
    artifacts.save_json(PowerParams(3000, 200, 5), d / "power.json")
    artifacts.save_json(CostParams(), d / "costs.json")


if __name__ == "__main__":
    main()
