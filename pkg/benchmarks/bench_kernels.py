"""Compare chain throughput of the compiled kernels against the pure-Python fallback.

Each backend runs in its own interpreter because the choice is fixed at import.

    python3 benchmarks/bench_kernels.py [--steps N] [--fallback-steps N] [--repeats R]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

WORKER = r"""
import json, sys, time
from markedwalk import ChainConfig, EnergySpec, BalanceSpec, backend, load_dual_graph, run_chain

graph, energy, steps, repeats = sys.argv[1], sys.argv[2], int(sys.argv[3]), int(sys.argv[4])
g = load_dual_graph(graph)
with open(energy) as fh:
    spec = EnergySpec.from_json(fh.read())
cfg = ChainConfig(steps=steps, d=2, seed=1, energy=spec, balance=BalanceSpec("population", 0.125),
                  record_every=max(1, steps // 100))
warm = time.perf_counter()
run_chain(g, ChainConfig(steps=100, d=2, seed=0, energy=spec, balance=cfg.balance))
warm = time.perf_counter() - warm
best = float("inf")
for _ in range(repeats):
    t0 = time.perf_counter()
    run_chain(g, cfg)
    best = min(best, time.perf_counter() - t0)
print(json.dumps({"backend": backend(), "steps": steps, "seconds": best, "warmup_seconds": warm,
                  "steps_per_second": steps / best}))
"""


def measure(no_numba: bool, steps: int, repeats: int, graph: Path, energy: Path) -> dict:
    env = dict(os.environ)
    env.pop("MARKEDWALK_NO_NUMBA", None)
    if no_numba:
        env["MARKEDWALK_NO_NUMBA"] = "1"
    proc = subprocess.run([sys.executable, "-c", WORKER, str(graph), str(energy), str(steps), str(repeats)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--fallback-steps", type=int, default=5_000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--graph", type=Path, default=FIXTURES / "grid4x4_votes.json")
    ap.add_argument("--energy", type=Path, default=FIXTURES / "energy_competitive.json")
    args = ap.parse_args()

    fast = measure(False, args.steps, args.repeats, args.graph, args.energy)
    slow = measure(True, args.fallback_steps, args.repeats, args.graph, args.energy)
    for r in (fast, slow):
        print(f"{r['backend']:>6}: {r['steps_per_second']:>12,.0f} steps/s "
              f"({r['steps']} steps in {r['seconds']:.3f} s, warm-up {r['warmup_seconds']:.2f} s)")
    print(f"speedup: {fast['steps_per_second'] / slow['steps_per_second']:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
