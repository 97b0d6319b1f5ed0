"""Command-line entry point.

Every subcommand reads schema-checked JSON configs and writes one JSON
document to ``--out`` (or stdout). Relative config paths resolve against
``$INASBENCH_CONFIG_DIR`` when it is set. Exit status: 0 success, 2 bad
config, 3 infeasible design or supply, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .errors import (
    DesignError,
    FeasibilityError,
    InasError,
    NetworkValidationError,
    ParameterError,
    ParseError,
    SchemaError,
    ShapeError,
    SupplyError,
)
from .executor import classify, run_reference, run_tiled
from .explorer import NAS_CAPS, DesignCaps, RewardParams, SearchSpace, best_design, evolve
from .intermittent import FaultTrace, make_fault_trace, simulate
from .model import QTensor, check_network
from .perfmodel import feasible, predict
from .prng import SplitMix64
from .scheduler import hyperperiod, schedulable_edf, simulate_schedule

CONFIG_DIR_ENV = "INASBENCH_CONFIG_DIR"
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code, kind, message, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


def _path(p) -> Path:
    path = Path(p)
    base = os.environ.get(CONFIG_DIR_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    if not path.exists():
        raise CliError(EXIT_CONFIG, "missing_file", f"{path}: no such file")
    return path


def _load(p, kind):
    return artifacts.load_json(_path(p), kind)


def _input(args, net) -> QTensor:
    if getattr(args, "input", None):
        x = _load(args.input, "tensor")
        return x
    rng = SplitMix64(args.seed)
    n = int(np.prod(net.input_shape))
    data = (rng.next_block(n) % np.uint64(513)).astype(np.int64) - 256
    return QTensor.from_array(data.reshape(net.input_shape), net.act_frac_bits)


def _net_design(args):
    if getattr(args, "solution", None):
        sol = _load(args.solution, "solution")
        return sol["net"], sol["design"]
    if not args.net or not args.design:
        raise CliError(EXIT_CONFIG, "usage", "--net and --design (or --solution) are required")
    return _load(args.net, "network"), _load(args.design, "design")


def _emit(args, doc) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_infer(args):
    net, design = _net_design(args)
    x = _input(args, net)
    ref = run_reference(net, x)
    tiled, stats = run_tiled(net, x, design)
    return {
        "match": ref == tiled,
        "reference": [int(v) for v in ref.data],
        "tiled": [int(v) for v in tiled.data],
        "class": classify(ref),
        "total_units": stats.total_units,
    }


def _faults(args, horizon_hint) -> FaultTrace:
    if args.faults:
        return _load(args.faults, "faults")
    if args.fault_mean is not None:
        horizon = args.fault_horizon if args.fault_horizon is not None else horizon_hint
        return make_fault_trace(args.fault_seed if args.fault_seed is not None else args.seed,
                                args.fault_mean, horizon)
    return FaultTrace()


def cmd_simulate(args):
    net, design = _net_design(args)
    power, costs = _load(args.power, "power"), _load(args.costs, "costs")
    x = _input(args, net)
    hint = 4 * predict(net, design, power, costs).latency_ticks + 1
    faults = _faults(args, hint)
    result = simulate(net, x, design, power, costs, faults)
    if args.nvm_dump:
        Path(args.nvm_dump).write_bytes(result.nvm_image)
    doc = artifacts.sim_result_to_doc(result)
    if not args.with_nvm:
        doc.pop("nvm_image")
    return {
        "result": doc,
        "faults": list(faults.ticks),
        "output_matches_reference": result.output == run_reference(net, x),
    }


def cmd_predict(args):
    net, design = _net_design(args)
    power, costs = _load(args.power, "power"), _load(args.costs, "costs")
    verdict = feasible(net, design, power, costs)
    if not verdict:
        raise CliError(EXIT_INFEASIBLE, "infeasible", verdict.reason, layer=verdict.layer,
                       constraint=verdict.constraint)
    return artifacts.to_doc(predict(net, design, power, costs))[1]


def _caps(args) -> DesignCaps:
    kw = {"tied": args.tied, "max_tile": args.max_tile}
    if args.batch_sizes:
        kw["batch_sizes"] = tuple(args.batch_sizes)
    return DesignCaps(**kw)


def cmd_explore(args):
    net = _load(args.net, "network")
    power, costs = _load(args.power, "power"), _load(args.costs, "costs")
    choice = best_design(net, power, costs, args.latency_req, _caps(args))
    if not choice.feasible:
        raise CliError(EXIT_INFEASIBLE, "infeasible", choice.reason, evaluated=choice.evaluated)
    return {
        "design": artifacts.design_to_doc(choice.design),
        "estimate": artifacts.to_doc(choice.estimate)[1],
        "evaluated": choice.evaluated,
    }


def cmd_nas(args):
    space = _load(args.space, "space") if args.space else SearchSpace()
    power, costs = _load(args.power, "power"), _load(args.costs, "costs")
    params = RewardParams(args.latency_req, args.ema_decay, args.latency_sign)
    result = evolve(space, power, costs, params, seed=args.seed, population=args.population,
                    generations=args.generations, mutation_rate=args.mutation_rate,
                    tournament=args.tournament, elitism=args.elitism, caps=NAS_CAPS)
    if not result.feasible:
        raise CliError(EXIT_INFEASIBLE, "infeasible", result.reason, history=result.history)
    return artifacts.to_doc(result)[1]


def cmd_sched(args):
    tasks = _load(args.taskset, "taskset")
    power, costs = _load(args.power, "power"), _load(args.costs, "costs")
    verdict = schedulable_edf(tasks, power, costs)
    doc = {
        "schedulable": verdict.schedulable,
        "witness": verdict.witness,
        "wcets": {str(t.id): c for t, c in zip(tasks, verdict.wcets)},
    }
    if verdict.supply is not None:
        doc["supply"] = {"theta": verdict.supply.theta, "period": verdict.supply.period}
    if args.simulate:
        horizon = args.horizon or (hyperperiod(tasks) + max((t.offset for t in tasks), default=0))
        trace = simulate_schedule(tasks, power, costs, horizon)
        doc["simulation"] = {
            "horizon": horizon,
            "cycles": trace.cycles,
            "end_tick": trace.end_tick,
            "misses": [list(m) for m in trace.misses],
            "jobs": [{"task": j.task, "release": j.release, "deadline": j.deadline, "start": j.start,
                      "finish": j.finish} for j in trace.jobs],
        }
    return doc


def cmd_dump(args):
    net, design = _net_design(args)
    check_network(net)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.format in ("header", "all"):
        path = out / "weights.h"
        path.write_text(artifacts.dump_header(net, design), encoding="utf-8")
        written.append(path)
    if args.format in ("csv", "all"):
        written += artifacts.dump_csv(net, out / "csv")
    if args.format in ("json", "all"):
        for name, obj in (("net.json", net), ("design.json", design)):
            artifacts.save_json(obj, out / name)
            written.append(out / name)
    return {"written": [str(p) for p in written]}


# ---------------------------------------------------------------------------
# parser


def _common(p, net=True, power=True):
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--out", help="write the result JSON here instead of stdout")
    if net:
        p.add_argument("--net", help="network JSON")
        p.add_argument("--design", help="execution design JSON")
        p.add_argument("--solution", help="solution JSON from `nas` (replaces --net/--design)")
    if power:
        p.add_argument("--power", required=True, help="power parameters JSON")
        p.add_argument("--costs", required=True, help="cost parameters JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inasbench", description="Intermittent DNN inference workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="compare tiled and reference inference")
    _common(p, power=False)
    p.add_argument("--input", help="input tensor JSON (default: seeded random)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="run inference across power cycles")
    _common(p)
    p.add_argument("--input", help="input tensor JSON (default: seeded random)")
    p.add_argument("--faults", help="fault trace JSON")
    p.add_argument("--fault-seed", type=int, help="seed for a generated fault trace (default --seed)")
    p.add_argument("--fault-mean", type=float, help="mean ticks between generated faults")
    p.add_argument("--fault-horizon", type=int, help="last tick of the generated trace")
    p.add_argument("--nvm-dump", help="write the final NVM image to this file")
    p.add_argument("--with-nvm", action="store_true", help="include the NVM image (hex) in the JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict", help="fault-free latency and energy estimate")
    _common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explore", help="lowest-latency execution design")
    _common(p, net=False)
    p.add_argument("--net", required=True, help="network JSON")
    p.add_argument("--latency-req", type=int, required=True, help="latency requirement in ticks")
    p.add_argument("--batch-sizes", type=int, nargs="+", help="candidate S values (default 1..16)")
    p.add_argument("--max-tile", type=int, default=8)
    p.add_argument("--tied", action="store_true", help="same tile choice for every layer")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("nas", help="evolutionary architecture search")
    _common(p, net=False)
    p.add_argument("--space", help="search space JSON (default: 3x32x32 input, 10 classes)")
    p.add_argument("--latency-req", type=int, required=True)
    p.add_argument("--population", type=int, default=16)
    p.add_argument("--generations", type=int, default=10)
    p.add_argument("--mutation-rate", type=float, default=0.1)
    p.add_argument("--tournament", type=int, default=3)
    p.add_argument("--elitism", type=int, default=2)
    p.add_argument("--ema-decay", type=float, default=0.9)
    p.add_argument("--latency-sign", type=int, choices=(-1, 1), default=-1)
    p.set_defaults(func=cmd_nas)

    p = sub.add_parser("sched", help="EDF schedulability of a task set")
    _common(p, net=False)
    p.add_argument("--taskset", required=True)
    p.add_argument("--simulate", action="store_true", help="also simulate the schedule")
    p.add_argument("--horizon", type=int, help="release horizon (default hyperperiod + max offset)")
    p.set_defaults(func=cmd_sched)

    p = sub.add_parser("dump", help="write header, CSV and/or JSON artifacts")
    _common(p, power=False)
    p.add_argument("--format", choices=("header", "csv", "json", "all"), default="all")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_dump)
    return parser


_CONFIG_ERRORS = (SchemaError, ParseError, NetworkValidationError, DesignError, ParameterError, ShapeError)
_INFEASIBLE = (FeasibilityError, SupplyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _emit(args, args.func(args))
        return EXIT_OK
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc), **exc.extra}
        code = exc.code
    except _CONFIG_ERRORS as exc:
        err = {"error": "config", "type": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, SchemaError):
            err["path"] = exc.path
        code = EXIT_CONFIG
    except _INFEASIBLE as exc:
        err = {"error": "infeasible", "type": type(exc).__name__, "message": str(exc)}
        code = EXIT_INFEASIBLE
    except InasError as exc:
        err = {"error": "internal", "type": type(exc).__name__, "message": str(exc)}
        code = EXIT_ERROR
    sys.stdout.write(json.dumps(err, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
