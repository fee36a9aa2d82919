"""Command line entry point: ``whirl run``, ``whirl compare`` and ``whirl demo-gen``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .demo import GenerationError, save_demo, scripted_expert
from .sim import ConfigurationError

EXIT_USAGE = 2


def _run(args) -> int:
    exp = harness.load_experiment(args.config, variant=args.variant, seeds=args.seed, output_dir=None)
    out = Path(args.out) if args.out else harness.default_output_dir(exp)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    manifest = harness.run_experiment(exp, out, resume=args.resume, log=log)
    if not args.quiet:
        print(f"wrote {manifest['path']}")
    return 0


def _compare(args) -> int:
    manifests = [harness.load_manifest(p) for p in args.manifests]
    rows = harness.compare(manifests)
    print(f"task: {rows[0]['task']}")
    print(harness.render_table(rows), end="")
    if args.out:
        out = Path(args.out)
        harness.atomic_write(out / "comparison.csv", harness.comparison_csv(rows))
        harness.atomic_write(out / "comparison.json", json.dumps(rows, indent=2) + "\n")
        print(f"wrote {out / 'comparison.csv'}")
    return 0


def _demo_gen(args) -> int:
    exp = harness.load_experiment(args.task)
    names = [args.scene] if args.scene else list(exp.train_demos) + list(exp.test_demos)
    out = Path(args.out)
    for name in dict.fromkeys(names):
        if name not in exp.scenes:
            raise ConfigurationError(f"task {exp.task!r} has no scene {name!r}")
        scene, settings = exp.scenes[name]
        if args.clean:
            demo, _ = scripted_expert(scene, args.seed, settings)
        else:
            demo = harness.generate_demo(scene, settings, exp.noise, args.seed, exp.extraction)
        path = out / f"{name}_seed{args.seed}.demo"
        out.mkdir(parents=True, exist_ok=True)
        save_demo(demo, path)
        print(f"{path}  T={demo.T}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="whirl", description="Residual policy learning from simulated human demos.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one variant on a task config and write learning curves")
    r.add_argument("--config", required=True, help="config file, or a builtin task name such as drawer.cfg")
    r.add_argument("--seed", type=int, action="append", help="seed to run (repeatable; default: the config's seeds)")
    r.add_argument("--variant", choices=harness.VARIANTS, help="override the config's variant")
    r.add_argument("--out", help=f"output directory (default: ${harness.OUTPUT_ROOT_ENV}/<task>_<variant>)")
    r.add_argument("--resume", action="store_true", help="continue from checkpoints in the output directory")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=_run)

    c = sub.add_parser("compare", help="tabulate final success across run manifests")
    c.add_argument("manifests", nargs="+", help="manifest.json files or run directories")
    c.add_argument("--out", help="directory for comparison.csv and comparison.json")
    c.set_defaults(func=_compare)

    d = sub.add_parser("demo-gen", help="write synthetic demonstrations for a task")
    d.add_argument("--task", required=True, help="builtin task name or config file")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--scene", help="only this scene (default: every demo scene of the task)")
    d.add_argument("--out", default="demos")
    d.add_argument("--clean", action="store_true", help="skip the detector noise")
    d.set_defaults(func=_demo_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, harness.UsageError, GenerationError) as exc:
        print(f"whirl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"whirl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"whirl: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
