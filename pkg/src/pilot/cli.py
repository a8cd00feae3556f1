"""Command-line entry points: train, eval, ablate, serve, replay."""

from __future__ import annotations

import os

# small-matrix workloads run fastest single-threaded; set before numpy loads
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse
import json
import sys
from pathlib import Path


def _add_common_train_args(p):
    p.add_argument("--preset", default="locomotion",
                   help="named preset (stand_track, locomotion, stairs, full)")
    p.add_argument("--config", default=None, help="YAML config file (flat keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory")


def cmd_train(args):
    from . import config as cfgmod
    from .trainer import Trainer

    cfg = cfgmod.merge(args.preset, args.config, args.overrides)
    out_dir = args.out or f"runs/{args.preset}_s{args.seed}"
    trainer = Trainer(cfgmod.build_model(cfg),
                      cfgmod.build_env_config(cfg, seed=args.seed),
                      cfgmod.build_policy_config(cfg),
                      cfgmod.build_train_config(cfg, seed=args.seed,
                                                out_dir=out_dir))
    if args.max_hours is not None:
        trainer.train_cfg.max_hours = args.max_hours
    if args.resume:
        trainer.load_checkpoint(args.resume)
        print(f"resumed from {args.resume} at iteration {trainer.iteration}")

    def report(tr, row):
        if tr.iteration % args.log_every == 0:
            ret = row["mean_return"]
            print(f"it={row['iteration']:5d} reward/step={row['mean_step_reward']:+8.3f} "
                  f"return={ret and round(ret, 1)} stage={row['stage']} "
                  f"E_v={row['E_v'] and round(row['E_v'], 3)} "
                  f"E_h={row['E_h'] and round(row['E_h'], 3)}", flush=True)

    trainer.train(on_iteration=report)
    final = Path(out_dir) / f"ckpt_{trainer.iteration:06d}.pt"
    print(f"done: {final}")
    return 0


def cmd_eval(args):
    from . import config as cfgmod
    from .metrics import run_eval

    suite = cfgmod.EVAL_SUITES[args.suite]
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = run_eval(args.ckpt, suite, episodes=args.episodes, seeds=seeds,
                    out_dir=args.out)
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_ablate(args):
    from . import config as cfgmod
    from .metrics import run_ablation
    from .trainer import Trainer

    cfg = cfgmod.merge(args.preset, args.config, args.overrides)
    if args.budget is not None:
        cfg["train.iterations"] = args.budget
    out_root = Path(args.out or "runs/ablation")
    seeds = tuple(int(s) for s in args.seeds.split(","))

    def train_variant(name, overrides, seed):
        run_dir = out_root / f"{name}_s{seed}"
        final = run_dir / "final.ckpt"
        if final.exists():
            print(f"[ablate] reusing {final}")
            return final
        policy_cfg = cfgmod.build_policy_config(cfg)
        for key, val in overrides.items():
            setattr(policy_cfg, key, val)
        trainer = Trainer(cfgmod.build_model(cfg),
                          cfgmod.build_env_config(cfg, seed=seed),
                          policy_cfg,
                          cfgmod.build_train_config(cfg, seed=seed,
                                                    out_dir=str(run_dir)))
        print(f"[ablate] training {name} seed={seed} "
              f"({trainer.train_cfg.iterations} iterations)")
        trainer.train()
        from .policy import save_policy
        save_policy(final, trainer.policy, meta={"variant": name, "seed": seed})
        return final

    suite = cfgmod.EVAL_SUITES[args.suite]
    rows = run_ablation(train_variant, suite, seeds=seeds,
                        out_dir=str(out_root), episodes=args.episodes)
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_serve(args):
    from . import config as cfgmod
    from .teleopd import serve

    terrain = cfgmod.parse_terrain_spec(args.terrain)
    print(f"serving {args.ckpt} on ws://{args.host}:{args.port} "
          f"terrain={terrain} timescale={args.timescale}")
    serve(args.ckpt, terrain, args.port, host=args.host,
          timescale=args.timescale, seed=args.seed)
    return 0


def cmd_replay(args):
    from . import config as cfgmod
    from .teleopd import replay

    script = args.script
    if script == "bundled:stairs":
        script = Path(__file__).parent / "assets" / "stairs.csv"
    terrain = cfgmod.parse_terrain_spec(args.terrain) if args.terrain else None
    result = replay(args.ckpt, script, seed=args.seed, terrain_cfg=terrain)
    print(json.dumps({"success": result.success,
                      "duration_s": result.duration_s,
                      "resets": result.resets,
                      **result.report.as_row()}))
    return 0 if result.success else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="pilot",
                                     description="perceptive loco-manipulation "
                                                 "controller")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy")
    _add_common_train_args(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--max-hours", type=float, default=None)
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over terrain suites")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--suite", default="full", choices=("flat", "stairs", "full"))
    p.add_argument("--episodes", type=int, default=8)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare policy variants")
    _add_common_train_args(p)
    p.set_defaults(preset="stairs")
    p.add_argument("--budget", type=int, default=None,
                   help="iterations per variant (identical across variants)")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--suite", default="stairs", choices=("flat", "stairs", "full"))
    p.add_argument("--episodes", type=int, default=6)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("serve", help="run the live teleoperation service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--terrain", default="flat", help="kind[:difficulty[:seed]]")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--timescale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("replay", help="run a command script headlessly")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--script", default="bundled:stairs",
                   help="CSV path or bundled:stairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--terrain", default=None)
    p.set_defaults(fn=cmd_replay)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
