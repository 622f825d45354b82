"""Downstream A/B experiment: BC from an affordance-pretrained encoder vs. a random-init encoder.

Runs synth -> mine -> pretrain once, then for each training seed trains two BC
policies on the same scripted-expert demos and evaluates both on one shared
episode-seed list. Stages whose outputs already exist are skipped, so an
interrupted run can be resumed with the same command.

    python scripts/downstream.py --out runs/downstream
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from hrp.cli import main as hrp

PASS_GAP, DEGRADED_GAP = 0.15, 0.05
RESULTS = Path(__file__).resolve().parents[1] / "results"


def verdict(gap: float) -> str:
    if gap >= PASS_GAP:
        return "PASS"
    if gap >= DEGRADED_GAP:
        return "DEGRADED-PASS"
    return "FAIL"


def _run(*argv) -> None:
    code = hrp([str(a) for a in argv])
    if code != 0:
        raise SystemExit(f"hrp {argv[0]} exited with {code}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/downstream")
    ap.add_argument("--clips", type=int, default=500)
    ap.add_argument("--hrp-steps", type=int, default=2000)
    ap.add_argument("--hrp-mode", choices=("full", "layernorm"), default="full")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--n-demos", type=int, default=50)
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--bc-iterations", type=int, default=2000)
    ap.add_argument("--bc-batch-size", type=int, default=16)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    common = ["--threads", args.threads] if args.threads else []
    t0 = time.monotonic()
    timings = {}

    def stage(name, done: Path, *argv):
        t = time.monotonic()
        if not done.exists():
            _run(*argv, *common)
        timings[name] = time.monotonic() - t

    stage("synth", root / "corpus" / "manifest.json", "synth", "--clips", args.clips, "--seed", 0,
          "--out", root / "corpus")
    stage("mine", root / "mined" / "manifest.json", "mine", "--detections", root / "corpus", "--out", root / "mined")
    ckpt = root / f"hrp_{args.hrp_mode}" / "encoder.hrpt"
    stage("pretrain", ckpt, "pretrain", "--data", root / "mined", "--mode", args.hrp_mode,
          "--steps", args.hrp_steps, "--seed", 0, "--out", ckpt.parent)

    bc_flags = ["--iterations", args.bc_iterations, "--batch-size", args.bc_batch_size,
                "--n-demos", args.n_demos, "--demo-seed", 1]
    per_seed = []
    for s in range(args.seeds):
        arms = {}
        for arm, init in (("hrp", ckpt), ("random", "random")):
            pdir = root / f"bc_{arm}_{args.hrp_mode if arm == 'hrp' else 'init'}_s{s}"
            stage(f"bc_{arm}_s{s}", pdir / "policy.hrpt", "bc", "--init", init, "--seed", s, *bc_flags,
                  "--out", pdir)
            arms[arm] = pdir / "policy.hrpt"
        edir = root / f"eval_{args.hrp_mode}_s{s}"
        stage(f"eval_s{s}", edir / "report.json", "eval", "--policy", arms["hrp"], "--policy", arms["random"],
              "--episodes", args.episodes, "--seed", 1000 + s, "--out", edir)
        report = json.loads((edir / "report.json").read_text())
        pols = report["policies"]
        per_seed.append({
            "seed": s,
            "hrp": pols[str(arms["hrp"])]["mean"],
            "random": pols[str(arms["random"])]["mean"],
            "hrp_scores": pols[str(arms["hrp"])]["scores"],
            "random_scores": pols[str(arms["random"])]["scores"],
        })

    hrp_mean = float(np.mean([r["hrp"] for r in per_seed]))
    rnd_mean = float(np.mean([r["random"] for r in per_seed]))
    gap = hrp_mean - rnd_mean
    diffs = np.array([r["hrp"] - r["random"] for r in per_seed])
    result = {
        "hrp_mode": args.hrp_mode,
        "hrp_mean": hrp_mean,
        "random_mean": rnd_mean,
        "gap": gap,
        "gap_stderr_over_seeds": float(diffs.std(ddof=1) / np.sqrt(len(diffs))) if len(diffs) > 1 else 0.0,
        "verdict": verdict(gap),
        "per_seed": per_seed,
        "settings": {k: v for k, v in vars(args).items() if k != "out"},
        "stage_seconds": timings,
        "wall_clock_s": time.monotonic() - t0,
    }
    out = root / f"downstream_{args.hrp_mode}.json"
    out.write_text(json.dumps(result, indent=2) + "\n")
    RESULTS.mkdir(exist_ok=True)
    (RESULTS / out.name).write_text(out.read_text())
    print(f"HRP({args.hrp_mode}) {hrp_mean:.3f}  random-init {rnd_mean:.3f}  gap {gap:+.3f}  -> {result['verdict']}")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
