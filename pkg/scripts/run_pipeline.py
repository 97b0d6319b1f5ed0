"""nas -> dump -> simulate on the dumped solution, checked against the reference executor.

Exits 0 when the simulated latency meets the requirement and the simulated
output equals run_reference on the same input; prints a JSON summary.
"""

import argparse
import json
import subprocess
import sys
import tempfile
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs" / "nas"


def run(*args):
    cmd = [sys.executable, "-m", "inasbench", *map(str, args)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise SystemExit(f"{' '.join(cmd[2:])} failed ({proc.returncode}): {proc.stdout}{proc.stderr}")
    return proc.stdout


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--latency-req", type=int, default=300_000)
    ap.add_argument("--population", type=int, default=8)
    ap.add_argument("--generations", type=int, default=4)
    ap.add_argument("--fault-mean", type=float, help="also inject faults with this mean interval")
    ap.add_argument("--work-dir", type=Path)
    args = ap.parse_args(argv)

    work = args.work_dir or Path(tempfile.mkdtemp(prefix="pipeline-"))
    work.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    solution = work / "solution.json"
    run("nas", "--space", CONFIGS / "space.json", "--power", CONFIGS / "power.json",
        "--costs", CONFIGS / "costs.json", "--latency-req", args.latency_req, "--seed", args.seed,
        "--population", args.population, "--generations", args.generations, "--out", solution)
    dumped = work / "dump"
    run("dump", "--solution", solution, "--format", "all", "--out-dir", dumped)
    sim_args = ["simulate", "--net", dumped / "net.json", "--design", dumped / "design.json",
                "--power", CONFIGS / "power.json", "--costs", CONFIGS / "costs.json", "--seed", args.seed]
    if args.fault_mean:
        sim_args += ["--fault-mean", args.fault_mean]
    sim = json.loads(run(*sim_args))
    predicted = json.loads(solution.read_text())["estimate"]["latency_ticks"]

    latency = sim["result"]["latency_ticks"]
    summary = {
        "work_dir": str(work),
        "latency_ticks": latency,
        "predicted_latency_ticks": predicted,
        "latency_requirement": args.latency_req,
        "cycles": sim["result"]["cycles"],
        "output_matches_reference": sim["output_matches_reference"],
        "artifacts": sorted(p.name for p in dumped.iterdir()),
        "seconds": round(time.perf_counter() - start, 1),
    }
    summary["ok"] = bool(summary["output_matches_reference"]) and (bool(args.fault_mean) or latency <= args.latency_req)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if summary["ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
