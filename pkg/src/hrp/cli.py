"""Command-line front end: ``hrp <command> [flags]``.

Commands: synth, mine, pretrain, bc, eval, ablate, gradcheck. Every command
accepts ``--config FILE.json`` whose keys are flag names (dashes or
underscores); explicit flags override the file. Exit codes: 0 success, 1
runtime or data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import encoder as enc
from . import policy as pol
from .container import ContainerError
from .container import load as load_container
from .hrp_train import (ABLATION_LABELS, ABLATIONS, Batch, HrpData, HrpLossConfig, HrpTrainConfig, loss_and_grads,
                        train_hrp)
from .mining import MiningConfig, label_clip, read_dataset, read_detections, write_dataset
from .numerics import grad_check_tensors, make_rng
from .simenv import EnvConfig, collect_demos, evaluate_ab, expert_policy, random_policy, report_json
from .synthdata import MOTIONS, CorpusSpec, make_corpus

log = logging.getLogger("hrp")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"
HAND_CHOICES = {"right_then_left": "right_then_left", "both": "both_hands"}


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    wall_clock_s: float = 0.0


def write_manifest(out_dir: Path, run: RunManifest, existing: dict | None = None) -> Path:
    """Write the single manifest of ``out_dir``; dataset manifests get a ``run`` section."""
    body = dict(existing or {})
    body["run"] = asdict(run)
    path = out_dir / MANIFEST
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0.0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {text}")
    return v


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _encoder_config(args) -> enc.EncoderConfig:
    if args.encoder == "tiny":
        return enc.TINY_CONFIG
    return enc.EncoderConfig()


def _fresh_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_encoder_init(spec: str, cfg: enc.EncoderConfig, seed: int) -> tuple[dict, enc.EncoderConfig]:
    if spec == "random":
        return enc.init_encoder(cfg, seed), cfg
    params, ckpt_cfg, _ = enc.load_checkpoint(spec)
    return params, ckpt_cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    _require(args, "out")
    motions = MOTIONS if args.motion == "mixed" else (args.motion,)
    dist = CorpusSpec(image_size=args.size, clip_length=args.clip_length, motions=motions,
                      correspondence_jitter=args.noise, score_jitter=args.noise, outlier_fraction=args.outliers)
    out = _fresh_out(args.out)
    manifest = make_corpus(out, args.clips, dist, args.seed)
    run = RunManifest("synth", _snapshot(args), {"seed": args.seed}, {}, {"corpus": str(out)})
    run.wall_clock_s = time.monotonic() - args._t0
    write_manifest(out, run, manifest)
    print(f"wrote {args.clips} clips to {out}")
    return EXIT_OK


def cmd_mine(args) -> int:
    _require(args, "detections", "out")
    src = Path(args.detections)
    try:
        corpus = json.loads((src / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        log.error("cannot read corpus manifest under %s: %s", src, exc)
        return EXIT_FAIL
    entries = corpus.get("clips", [])
    if not entries:
        log.error("corpus %s has no clips", src)
        return EXIT_FAIL
    cfg = MiningConfig(wrist_horizon_k=args.wrist_horizon, gmm_modes=args.gmm_modes,
                       hand_preference=HAND_CHOICES[args.hand])
    clips, frames, failures = {}, {}, []
    for entry in entries:
        cid = entry["clip_id"]
        try:
            dets = read_detections(src / entry["detections"])
            labels = label_clip(dets, cfg, seed=args.seed, clip_id=cid)
            images = None
            if entry.get("frames"):
                images = load_container(src / entry["frames"])[0]["frames"]
            keep = [r for r in labels.records if r.frame_index % args.frame_stride == 0]
            if images is not None:
                slots = sorted({r.frame_index for r in keep})
                pos = {f: n for n, f in enumerate(slots)}
                for r in keep:
                    r.image = {"file": f"{cid}.frames.hrpt", "tensor": "frames", "index": pos[r.frame_index]}
                frames[cid] = images[slots]
            clips[cid] = keep
        except (ValueError, OSError, ContainerError, KeyError) as exc:
            failures.append({"clip_id": cid, "error": str(exc)})
            log.warning("clip %s failed: %s", cid, exc)
    if not clips:
        log.error("every clip failed")
        return EXIT_FAIL
    out = _fresh_out(args.out)
    manifest = write_dataset(out, clips, cfg.to_dict(), frames or None)
    manifest["failures"] = failures
    run = RunManifest("mine", _snapshot(args), {"seed": args.seed}, {"detections": str(src)}, {"dataset": str(out)})
    run.wall_clock_s = time.monotonic() - args._t0
    write_manifest(out, run, manifest)
    c = manifest["counts"]
    print(f"mined {len(clips)} clips ({len(failures)} failed): records={c['records']} "
          f"contact={c['contact']} hand={c['hand']} object={c['object']}")
    return EXIT_OK


def _pretrain_config(args, loss: HrpLossConfig) -> HrpTrainConfig:
    mode = "layernorm_only" if args.mode == "layernorm" else "full"
    return HrpTrainConfig(loss=loss, steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                          weight_decay=args.weight_decay, seed=args.seed, partition_mode=mode)


def _pretrain_init(args, data_cfg_size: int, gmm_modes: int):
    cfg = _encoder_config(args)
    params, cfg = _load_encoder_init(args.init, cfg, args.seed)
    if cfg.image_size != data_cfg_size:
        raise ValueError(f"encoder expects {cfg.image_size}px images but the dataset has {data_cfg_size}px")
    params = {k: v for k, v in params.items() if not enc.is_head(k)}
    params.update(enc.init_heads(cfg, args.seed + 1, gmm_modes))
    return params, cfg


def _load_training_data(path) -> tuple[HrpData, dict]:
    ds = read_dataset(path)
    data = HrpData.from_dataset(ds)
    modes = ds.manifest.get("config", {}).get("gmm_modes", 5)
    return data, {"gmm_modes": int(modes)}


def cmd_pretrain(args) -> int:
    _require(args, "data", "out")
    data, info = _load_training_data(args.data)
    params, cfg = _pretrain_init(args, data.images.shape[1], info["gmm_modes"])
    loss = HrpLossConfig(args.lambda_ct, args.lambda_hand, args.lambda_obj)
    tcfg = _pretrain_config(args, loss)
    print(f"lambda_ct={loss.lambda_ct} lambda_hand={loss.lambda_hand} lambda_obj={loss.lambda_obj} "
          f"mode={tcfg.partition_mode} steps={tcfg.steps}")
    out = _fresh_out(args.out)
    result = train_hrp(data, params, cfg, tcfg, out)
    trainable, total = enc.count_trainable(tcfg.partition_mode, cfg)
    enc.save_checkpoint(out / "encoder.hrpt", result.params, cfg,
                        {"loss": asdict(loss), "partition": tcfg.partition_mode, "steps": tcfg.steps})
    run = RunManifest("pretrain", _snapshot(args), {"seed": args.seed},
                      {"data": str(args.data), "init": args.init},
                      {"checkpoint": str(out / "encoder.hrpt"), "loss_trace": str(out / "loss_trace.jsonl")})
    run.config["train"] = tcfg.to_dict()
    run.config["partition"] = {"mode": tcfg.partition_mode, "trainable_encoder_params": trainable,
                               "total_encoder_params": total}
    run.wall_clock_s = time.monotonic() - args._t0
    write_manifest(out, run)
    last = result.trace[-1]["total"]
    print(f"final loss {last:.6f}; checkpoint {out / 'encoder.hrpt'}")
    return EXIT_OK


def _bc_config(args) -> pol.BcConfig:
    return pol.BcConfig(lr=args.lr, weight_decay=args.weight_decay, iterations=args.iterations,
                        batch_size=args.batch_size, seed=args.seed)


def _env_config(args, image_size: int = 64) -> EnvConfig:
    return EnvConfig(max_steps=args.max_steps, render_size=image_size)


def _demos(args, image_size: int) -> pol.DemoSet:
    if args.demos:
        demos = pol.read_demos(args.demos)
        if demos.images.shape[1] != image_size:
            raise ValueError(f"demos are {demos.images.shape[1]}px but the encoder expects {image_size}px")
        return demos
    return pol.DemoSet.from_episodes(collect_demos(_env_config(args, image_size), args.n_demos, args.demo_seed))


def _bc_encoder(encoder_spec: str, encoder_choice: str = "default"):
    """Encoder tensors (None for a fresh init) and config for BC."""
    if encoder_spec == "random":
        return None, enc.TINY_CONFIG if encoder_choice == "tiny" else enc.EncoderConfig()
    eparams, ecfg, _ = enc.load_checkpoint(encoder_spec)
    return eparams, ecfg


def train_policy(encoder_spec: str, demos: pol.DemoSet, bc: pol.BcConfig, encoder_choice: str = "default",
                 out_dir=None) -> tuple[dict, pol.PolicyConfig]:
    """BC from a random-init encoder (``encoder_spec == 'random'``) or a checkpoint."""
    eparams, ecfg = _bc_encoder(encoder_spec, encoder_choice)
    pcfg = pol.PolicyConfig(encoder=ecfg)
    init = pol.init_policy(pcfg, bc.seed, eparams)
    result = pol.bc_train(demos, init, pcfg, bc, out_dir)
    return result.params, pcfg


def cmd_bc(args) -> int:
    _require(args, "out")
    _, ecfg = _bc_encoder(args.init, args.encoder)
    demos = _demos(args, ecfg.image_size)
    bc = _bc_config(args)
    out = _fresh_out(args.out)
    params, pcfg = train_policy(args.init, demos, bc, args.encoder, out)
    pol.save_policy(out / "policy.hrpt", params, pcfg, {"bc": bc.to_dict(), "init": args.init})
    run = RunManifest("bc", _snapshot(args), {"seed": args.seed, "demo_seed": args.demo_seed},
                      {"init": args.init, "demos": args.demos or f"expert:{args.n_demos}"},
                      {"policy": str(out / "policy.hrpt"), "nll_trace": str(out / "nll_trace.jsonl")})
    run.config["bc"] = bc.to_dict()
    run.config["policy"] = pcfg.to_dict()
    run.wall_clock_s = time.monotonic() - args._t0
    write_manifest(out, run)
    print(f"trained {bc.iterations} iterations on {len(demos)} steps; policy {out / 'policy.hrpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "policy")
    loaded, sizes = {}, set()
    for spec in args.policy:
        if spec not in ("expert", "random"):
            params, pcfg, _ = pol.load_policy(spec)
            loaded[spec] = pol.as_policy_fn(params, pcfg)
            sizes.add(pcfg.encoder.image_size)
    if len(sizes) > 1:
        raise ValueError(f"policies expect different image sizes {sorted(sizes)}")
    env = _env_config(args, sizes.pop() if sizes else 64)
    policies = {}
    for spec in args.policy:
        policies[spec] = {"expert": expert_policy(env), "random": random_policy}.get(spec) or loaded[spec]
    report = evaluate_ab(policies, env, args.episodes, args.seed)
    for name, r in report["policies"].items():
        print(f"{name}: {r['mean']:.3f} +/- {r['stderr']:.3f}")
    if args.out:
        out = _fresh_out(args.out)
        (out / "report.json").write_text(report_json(report) + "\n")
        run = RunManifest("eval", _snapshot(args), {"seed": args.seed, "episodes": report["seeds"]},
                          {"policies": list(args.policy)}, {"report": str(out / "report.json")})
        run.wall_clock_s = time.monotonic() - args._t0
        write_manifest(out, run)
    return EXIT_OK


def pooled_stderr(scores: list) -> float:
    arr = np.asarray(scores, dtype=np.float64)
    return float(arr.std() / np.sqrt(arr.size)) if arr.size else 0.0


def ablation_table(rows: dict) -> str:
    lines = [f"{'setting':<11} {'l_ct':>6} {'l_hand':>6} {'l_obj':>6} {'score':>7} {'stderr':>7}"]
    for key, row in rows.items():
        lc = ABLATIONS[key]
        lines.append(f"{ABLATION_LABELS[key]:<11} {lc.lambda_ct:>6g} {lc.lambda_hand:>6g} {lc.lambda_obj:>6g} "
                     f"{row['mean']:>7.3f} {row['stderr']:>7.3f}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    """Pretrain once per loss-drop setting, then BC and evaluate each on shared seeds."""
    _require(args, "data", "out")
    data, info = _load_training_data(args.data)
    init, cfg = _pretrain_init(args, data.images.shape[1], info["gmm_modes"])
    out = _fresh_out(args.out)
    env = _env_config(args, cfg.image_size)
    demos = _demos(args, cfg.image_size)
    rows = {}
    for key, loss in ABLATIONS.items():
        sub = out / key
        tcfg = _pretrain_config(args, loss)
        result = train_hrp(data, init, cfg, tcfg, sub)
        ckpt = sub / "encoder.hrpt"
        enc.save_checkpoint(ckpt, result.params, cfg, {"loss": asdict(loss), "partition": tcfg.partition_mode})
        scores = []
        for s in range(args.bc_seeds):
            bc = pol.BcConfig(iterations=args.bc_iterations, batch_size=args.bc_batch_size, seed=args.seed + s)
            params, pcfg = train_policy(str(ckpt), demos, bc)
            rep = evaluate_ab({key: pol.as_policy_fn(params, pcfg)}, env, args.episodes, args.seed + s)
            scores.extend(rep["policies"][key]["scores"])
        rows[key] = {"label": ABLATION_LABELS[key], "loss": asdict(loss), "mean": float(np.mean(scores)),
                     "stderr": pooled_stderr(scores), "scores": scores}
    table = ablation_table(rows)
    print(table)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text(table + "\n")
    run = RunManifest("ablate", _snapshot(args), {"seed": args.seed, "bc_seeds": args.bc_seeds},
                      {"data": str(args.data), "init": args.init}, {"table": str(out / "ablation.json")})
    run.wall_clock_s = time.monotonic() - args._t0
    write_manifest(out, run)
    return EXIT_OK


def gradcheck_report(seed: int = 0, h: float = 1e-5) -> dict:
    """Finite-difference check of encoder + masked HRP loss and policy + NLL on the tiny config."""
    cfg = enc.TINY_CONFIG
    rng = make_rng(seed)
    bsz = 3
    params = {**enc.init_encoder(cfg, seed), **enc.init_heads(cfg, seed + 1)}
    # perturb so LN affine params and head biases are not at their symmetric init values
    params = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in params.items()}
    batch = Batch(rng.random((bsz, cfg.image_size, cfg.image_size, 3)), rng.random((bsz, 10)),
                  rng.random((bsz, 2)), rng.random((bsz, 4)), np.array([[1, 1, 1], [0, 1, 1], [1, 0, 1]], float))
    lcfg = HrpLossConfig()
    _, _, grads = loss_and_grads(params, batch, cfg, lcfg)
    hrp = grad_check_tensors(lambda p: loss_and_grads(p, batch, cfg, lcfg)[0], params, grads, h=h, seed=seed)

    pcfg = pol.PolicyConfig(encoder=cfg, hidden=(16, 16))
    pparams = pol.init_policy(pcfg, seed)
    pparams = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in pparams.items()}
    images = rng.random((bsz, cfg.image_size, cfg.image_size, 3))
    states = rng.random((bsz, 3))
    actions = rng.uniform(pcfg.action_low, pcfg.action_high, size=(bsz, 3))
    _, pgrads = pol.nll_and_grads(pparams, images, states, actions, pcfg, train_mode=True, seed=seed)
    bcr = grad_check_tensors(lambda p: pol.nll_and_grads(p, images, states, actions, pcfg, True, seed)[0],
                             pparams, pgrads, h=h, seed=seed)
    worst = max(max(hrp.values()), max(bcr.values()))
    return {"hrp": hrp, "bc": bcr, "max_rel_err": worst}


def cmd_gradcheck(args) -> int:
    rep = gradcheck_report(args.seed)
    for part in ("hrp", "bc"):
        for name, err in sorted(rep[part].items()):
            if args.verbose:
                print(f"{part:>3} {name:<40} {err:.3e}")
        print(f"{part}: max rel err {max(rep[part].values()):.3e} over {len(rep[part])} tensors")
    ok = rep["max_rel_err"] < 1e-4
    print(f"max rel err < 1e-4: {'PASS' if ok else 'FAIL'}")
    if args.out:
        out = _fresh_out(args.out)
        (out / "gradcheck.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        run = RunManifest("gradcheck", _snapshot(args), {"seed": args.seed}, {}, {"report": str(out / "gradcheck.json")})
        run.wall_clock_s = time.monotonic() - args._t0
        write_manifest(out, run)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flag values; explicit flags win")
    p.add_argument("--threads", type=_positive_int, help="cap on BLAS threads (fallback: HRP_THREADS)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_pretrain_flags(p: argparse.ArgumentParser, steps_default: int) -> None:
    p.add_argument("--data", help="mined affordance dataset directory")
    p.add_argument("--init", default="random", help="'random' or an encoder checkpoint path")
    p.add_argument("--mode", choices=("layernorm", "full"), default="layernorm")
    p.add_argument("--encoder", choices=("default", "tiny"), default="default")
    p.add_argument("--lambda-ct", type=_nonneg_float, default=HrpLossConfig.lambda_ct)
    p.add_argument("--lambda-hand", type=_nonneg_float, default=HrpLossConfig.lambda_hand)
    p.add_argument("--lambda-obj", type=_nonneg_float, default=HrpLossConfig.lambda_obj)
    p.add_argument("--steps", type=_positive_int, default=steps_default)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=_nonneg_float, default=0.0)
    p.add_argument("--out")


def _add_demo_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--demos", help="demo directory (demos.jsonl); default collects scripted-expert demos")
    p.add_argument("--n-demos", type=_positive_int, default=50)
    p.add_argument("--demo-seed", type=int, default=1)
    p.add_argument("--max-steps", type=_positive_int, default=EnvConfig.max_steps)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hrp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic egocentric corpus")
    _add_common(p)
    p.add_argument("--clips", type=_positive_int, default=10)
    p.add_argument("--size", type=_positive_int, default=64, help="image side in pixels")
    p.add_argument("--clip-length", type=_positive_int, default=48)
    p.add_argument("--motion", choices=(*MOTIONS, "mixed"), default="mixed")
    p.add_argument("--noise", type=_nonneg_float, default=0.0, help="correspondence and contact-score jitter")
    p.add_argument("--outliers", type=_fraction, default=0.0, help="fraction of corrupted correspondences")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mine", help="mine affordance labels from a detection corpus")
    _add_common(p)
    p.add_argument("--detections", help="corpus directory written by 'synth'")
    p.add_argument("--out")
    p.add_argument("--gmm-modes", type=_positive_int, default=5)
    p.add_argument("--wrist-horizon", type=_positive_int, default=30)
    p.add_argument("--hand", choices=tuple(HAND_CHOICES), default="right_then_left")
    p.add_argument("--frame-stride", type=_positive_int, default=1, help="keep every n-th frame")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("pretrain", help="affordance pretraining of the encoder")
    _add_common(p)
    _add_pretrain_flags(p, 2000)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("bc", help="behavior cloning on scripted-expert demos")
    _add_common(p)
    p.add_argument("--init", default="random", help="'random' or an encoder checkpoint path")
    p.add_argument("--encoder", choices=("default", "tiny"), default="default")
    p.add_argument("--iterations", type=_positive_int, default=pol.BcConfig.iterations)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=_nonneg_float, default=1e-4)
    p.add_argument("--out")
    _add_demo_flags(p)
    p.set_defaults(func=cmd_bc)

    p = sub.add_parser("eval", help="A/B evaluation on a shared seed list")
    _add_common(p)
    p.add_argument("--policy", action="append", default=[],
                   help="policy checkpoint, 'expert' or 'random'; repeat for A/B")
    p.add_argument("--episodes", type=_positive_int, default=50)
    p.add_argument("--max-steps", type=_positive_int, default=EnvConfig.max_steps)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss-drop ablation table")
    _add_common(p)
    _add_pretrain_flags(p, 2000)
    _add_demo_flags(p)
    p.add_argument("--bc-seeds", type=_positive_int, default=1)
    p.add_argument("--bc-iterations", type=_positive_int, default=1000)
    p.add_argument("--bc-batch-size", type=_positive_int, default=32)
    p.add_argument("--episodes", type=_positive_int, default=50)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on the tiny config")
    _add_common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def _apply_config_file(parser, argv, args):
    """Reparse with the file's values as defaults so explicit flags still win."""
    sub = _subparser(parser, args.command)
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help", "func"):
            raise UsageError(f"unknown config key {key!r}")
        action = known[dest]
        if action.type is not None and not isinstance(value, list):
            try:
                value = action.type(str(value))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _snapshot(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if not k.startswith("_") and k not in ("func", "verbose")}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _apply_config_file(parser, argv, args)
        threads = args.threads
        if threads is None and os.environ.get("HRP_THREADS"):
            try:
                threads = _positive_int(os.environ["HRP_THREADS"])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"HRP_THREADS: {exc}") from exc
        args.threads = threads
        args._t0 = time.monotonic()
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        _subparser(parser, args.command).print_usage(sys.stderr)
        print(f"hrp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, ContainerError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"hrp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
