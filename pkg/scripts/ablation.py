"""Loss-drop ablation on the toy task: all losses vs. each single loss removed.

Wraps ``hrp ablate`` and checks that the all-losses row is no worse than any
single-drop row minus one pooled standard error. Needs a mined dataset, e.g.
the one written by ``scripts/downstream.py``.

    python scripts/ablation.py --data runs/downstream/mined --out runs/ablation
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from hrp.cli import main as hrp

RESULTS = Path(__file__).resolve().parents[1] / "results"


def check(rows: dict) -> dict:
    """Compare the all-losses row against every single-drop row."""
    full = rows["full"]
    margins = {k: full["mean"] - (r["mean"] - r["stderr"]) for k, r in rows.items() if k != "full"}
    return {"margins": margins, "pass": all(m >= 0 for m in margins.values())}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--mode", choices=("full", "layernorm"), default="full")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--bc-seeds", type=int, default=2)
    ap.add_argument("--bc-iterations", type=int, default=1000)
    ap.add_argument("--bc-batch-size", type=int, default=16)
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    out = Path(args.out)
    cached = (out / "ablation.json").exists()
    if not cached:
        argv = ["ablate", "--data", args.data, "--mode", args.mode, "--steps", args.steps,
                "--bc-seeds", args.bc_seeds, "--bc-iterations", args.bc_iterations,
                "--bc-batch-size", args.bc_batch_size, "--episodes", args.episodes, "--out", out]
        if args.threads:
            argv += ["--threads", args.threads]
        code = hrp([str(a) for a in argv])
        if code != 0:
            raise SystemExit(f"hrp ablate exited with {code}")
    rows = json.loads((out / "ablation.json").read_text())
    result = {"rows": {k: {kk: v for kk, v in r.items() if kk != "scores"} for k, r in rows.items()},
              **check(rows), "settings": {k: v for k, v in vars(args).items() if k != "out"}}
    text = json.dumps(result, indent=2) + "\n"
    (out / "ablation_check.json").write_text(text)
    RESULTS.mkdir(exist_ok=True)
    (RESULTS / "ablation_check.json").write_text(text)
    if cached:
        print((out / "ablation.txt").read_text(), end="")
    print(f"all-losses >= each drop - 1 pooled s.e.: {'PASS' if result['pass'] else 'FAIL'}")


if __name__ == "__main__":
    main()
