"""Command-line entry point: ``zigzag-lab {train,sample,analyze,sweep,verify}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .analysis import accumulation_inequality, decompose_gains, quality_report
from .config import OUTPUT_DIR_ENV, ConfigError, RunConfig, read_config_dict
from .experiment import IdentityCheckFailed, load_model, run_experiment
from .sampler import SAMPLERS, TrajectoryRecord, initial_latents, trajectory_rngs
from .schedule import build_schedule

log = logging.getLogger("zigzag_lab")

# flag name -> (section, key) inside the config mapping
SAMPLER_FLAGS = {
    "gamma1": ("sampler", "gamma1"),
    "gamma2": ("sampler", "gamma2"),
    "lam": ("sampler", "lambda"),
    "k": ("sampler", "k"),
    "eta": ("sampler", "eta"),
    "s": ("sampler", "s"),
    "exact_inversion": ("sampler", "exact_inversion"),
    "seed": (None, "seed"),
    "cond": (None, "cond"),
    "n": (None, "trajectories"),
    "repeats": (None, "repeats"),
    "method": (None, "method"),
}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n")


def _build_config(args, flags: dict) -> RunConfig:
    data = read_config_dict(args.config) if args.config else {}
    for attr, (section, key) in flags.items():
        val = getattr(args, attr, None)
        if val is None:
            continue
        if section:
            data.setdefault(section, {})[key] = val
        else:
            data[key] = val
    if getattr(args, "checkpoint", None):
        data["model"] = {"kind": "checkpoint", "path": args.checkpoint}
    if getattr(args, "out_dir", None):
        data["output_dir"] = args.out_dir
        env = {k: v for k, v in os.environ.items() if k != OUTPUT_DIR_ENV}
        return RunConfig.from_dict(data, env=env)
    return RunConfig.from_dict(data)


def cmd_train(args) -> int:
    from .scorenet import TrainSettings, train_score_net

    cfg = _build_config(args, {"seed": (None, "seed")})
    sched = cfg.build_schedule()
    rng = np.random.default_rng(cfg.seed)
    points, labels = cfg.mixture.sample(args.samples, rng)
    settings = TrainSettings(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                             hidden=args.hidden, depth=args.depth, seed=cfg.seed)
    model = train_score_net(points, labels, sched, settings, num_classes=cfg.mixture.num_classes)
    out = Path(args.out) if args.out else cfg.output_dir / "model.npz"
    model.save(out)
    print(f"checkpoint: {out}  loss {model.losses[0]:.4f} -> {model.losses[-1]:.4f}")
    return 0


def cmd_sample(args) -> int:
    cfg = _build_config(args, SAMPLER_FLAGS)
    sched = cfg.build_schedule()
    model = load_model(cfg, sched)
    rngs = trajectory_rngs(cfg.seed, cfg.trajectories)
    x_T = initial_latents(rngs, cfg.mixture.dim)
    kwargs = {"repeats": cfg.repeats} if cfg.method == "resample" else {}
    _, rec = SAMPLERS[cfg.method](model, cfg.cond, cfg.sampler, x_T, sched, rngs=rngs, **kwargs)
    out = cfg.output_dir
    record = {
        "trajectory": rec.to_dict(),
        "schedule": {**cfg.schedule_params, "alpha_bars": sched.alpha_bars.tolist()},
        "mixture": cfg.mixture.to_dict(),
    }
    if rec.blocks:
        g = decompose_gains(rec, sched)
        record["gains"] = g.summary()
        record["gains_per_trajectory"] = {
            "measured": g.measured.tolist(), "delta_zigzag": g.delta_zigzag.tolist(),
            "identity_rel_err": g.identity_rel_err.tolist(),
        }
    if cfg.trajectories >= 2:
        record["quality"] = quality_report(rec.x_0, cfg.mixture, cfg.cond, cfg.ref_seed).__dict__
    _write_json(out / "latents.json", rec.latents())
    _write_json(out / "record.json", record)
    print(f"wrote {out / 'latents.json'} and {out / 'record.json'}")
    return 0


def cmd_analyze(args) -> int:
    try:
        data = json.loads(Path(args.record).read_text())
        rec = TrajectoryRecord.from_dict(data["trajectory"])
        sp = data["schedule"]
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read record {args.record}: {exc}", file=sys.stderr)
        return 2
    sched = build_schedule(sp["kind"], int(sp["T"]), float(sp["beta_min"]), float(sp["beta_max"]))
    if not np.allclose(sched.alpha_bars, sp["alpha_bars"], rtol=0, atol=1e-15):
        print("error: stored schedule does not match its parameters", file=sys.stderr)
        return 2
    report = {"method": rec.method, "zigzag_steps": rec.zigzag_steps, "inversions": rec.num_inversions}
    status = 0
    if rec.blocks:
        g = decompose_gains(rec, sched)
        acc = accumulation_inequality(rec, sched, g)
        report["gains"] = g.summary()
        report["accumulation_inequality_holds"] = bool(acc.all_hold)
        if rec.config.eta == 0 and float(g.identity_rel_err.max()) > 1e-8:
            status = 1
        if not acc.all_hold:
            status = 1
    print(json.dumps(report, indent=1))
    return status


def cmd_sweep(args) -> int:
    cfg = _build_config(args, {"n": (None, "trajectories"), "seed": (None, "seed")})
    res = run_experiment(cfg)
    print(res.csv_text(), end="")
    print(f"wrote {res.csv_path}", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zigzag-lab", description="Zigzag diffusion sampling on analytic mixtures.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{train,sample,analyze,sweep,verify}")

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML run config (defaults to the reference setup)")
        if out:
            sp.add_argument("--out-dir", help=f"output directory (overrides config and ${OUTPUT_DIR_ENV})")

    t = sub.add_parser("train", help="fit a score network on mixture samples")
    common(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--samples", type=int, default=1024)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--hidden", type=int, default=128)
    t.add_argument("--depth", type=int, default=3)
    t.add_argument("--out", help="checkpoint path (default OUT_DIR/model.npz)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw trajectories and record them")
    common(s)
    s.add_argument("--method", choices=sorted(SAMPLERS))
    s.add_argument("--lambda", dest="lam", type=int)
    s.add_argument("--gamma1", type=float)
    s.add_argument("--gamma2", type=float)
    s.add_argument("--k", type=int)
    s.add_argument("--eta", type=float)
    s.add_argument("--s", type=float)
    s.add_argument("--exact-inversion", action="store_const", const=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--cond", type=int)
    s.add_argument("--n", type=int, help="number of trajectories (default from config)")
    s.add_argument("--repeats", type=int)
    s.add_argument("--checkpoint", help="use a trained score net instead of the analytic model")
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("analyze", help="decompose the gains of a saved record")
    a.add_argument("record")
    a.set_defaults(func=cmd_analyze)

    w = sub.add_parser("sweep", help="run a sweep and write results.csv")
    common(w)
    w.add_argument("--n", type=int)
    w.add_argument("--seed", type=int)
    w.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run the invariant suite")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, IdentityCheckFailed, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
