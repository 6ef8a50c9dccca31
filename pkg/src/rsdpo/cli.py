"""Command-line entry point: one subcommand per pipeline stage plus ``experiment``.

Single-stage commands work inside one run directory (``--out``) for one
seed; ``experiment`` lays out ``seed_<n>/`` subdirectories and result tables.
Configuration comes from ``--config`` (JSON, merged over the preset), else
``<out>/config.json`` if present, else the preset. ``RSDPO_SEED`` and
``RSDPO_OUT`` override the seed and output directory; flags override both.

Exit codes: 0 success, 2 invalid configuration or input, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiment as ex
from . import io
from .toylm import ToyLMParams

log = logging.getLogger("rsdpo")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(ValueError):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON experiment config, merged over the preset")
    p.add_argument("--seed", type=int, help="global seed (overrides RSDPO_SEED)")
    p.add_argument("--out", type=Path, help="output directory (overrides RSDPO_OUT)")
    p.add_argument("--preset", default="default", help=f"one of: {', '.join(ex.PRESETS)}")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsdpo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    def cmd(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    cmd("synth", "write the task, SFT, preference and evaluation-prompt files")
    cmd("sft", "train the SFT model")
    for name in ("rm", "generate"):
        c = cmd(name, "train a reward model" if name == "rm" else "sample k responses per prompt and score them")
        c.add_argument("--variant", choices=ex.RM_VARIANTS, default="rich")
    for name, help_ in (("pdgrs", "build pairs by rejection sampling"), ("histogram", "bin reward gaps")):
        c = cmd(name, help_)
        c.add_argument("--variant", choices=ex.RM_VARIANTS, default="rich")
        c.add_argument("--eta", type=float, help="threshold (default: first in config)")
        c.add_argument("--tau", type=float, help="temperature (default: first in config)")
    c = cmd("select", "apply a single-pair selection policy")
    c.add_argument("--policy", choices=("best-vs-worst", "best-vs-random", "rejection-sampling"), required=True)
    c.add_argument("--variant", choices=ex.RM_VARIANTS, default="rich")
    for name in ("dpo", "rs-sft"):
        c = cmd(name, "DPO on a preference file" if name == "dpo" else "one-step SFT on best-of-k records")
        c.add_argument("--data", type=Path, required=True)
        c.add_argument("--tag", help="artifact name (default: data file stem)")
    c = cmd("eval", "oracle win rate of one checkpoint against another")
    c.add_argument("--candidate", type=Path, required=True)
    c.add_argument("--baseline", type=Path, help="default: <out>/sft.ckpt")
    c.add_argument("--streams", choices=("independent", "shared"), default="independent")
    c.add_argument("--tag", default="cli")
    cmd("experiment", "run a preset grid over seeds and write result tables")
    cmd("verify", "check manifest checksums")
    return parser


def resolve_config(args) -> ex.ExperimentConfig:
    base = ex.preset(args.preset).to_dict()
    out = args.out or (Path(os.environ["RSDPO_OUT"]) if os.environ.get("RSDPO_OUT") else None)
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        try:
            base = ex._merge(base, json.loads(args.config.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc.msg})") from None
    elif out is not None and (out / "config.json").exists() and args.command != "experiment":
        base = json.loads((out / "config.json").read_text(encoding="utf-8"))
    cfg = ex.ExperimentConfig.from_dict(base)
    seed = args.seed
    if seed is None and os.environ.get("RSDPO_SEED"):
        try:
            seed = int(os.environ["RSDPO_SEED"])
        except ValueError:
            raise UsageError(f"RSDPO_SEED must be an integer, got {os.environ['RSDPO_SEED']!r}") from None
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    if out is not None:
        cfg = cfg.replace(out_dir=str(out))
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=str))


def run(args) -> None:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    if args.command == "experiment":
        table, _ = ex.run_experiment(cfg, out)
        _emit({"results": str(out / "results.csv"), "rows": len(table)})
        return
    if args.command == "verify":
        problems = ex.verify_manifest(out)
        _emit({"ok": not problems, "problems": problems})
        if problems:
            raise RuntimeError(f"{len(problems)} manifest problem(s)")
        return

    runp = ex.RunDir(out, cfg, cfg.seed)
    eta = getattr(args, "eta", None) or cfg.etas[0]
    tau = getattr(args, "tau", None) or cfg.taus[0]
    if args.command == "synth":
        (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        ex.stage_synth(runp)
        _emit({"out": str(out)})
    elif args.command == "sft":
        ex.stage_sft(runp)
        _emit({"checkpoint": str(out / "sft.ckpt")})
    elif args.command == "rm":
        ex.stage_rm(runp, args.variant)
        _emit({"checkpoint": str(out / f"rm_{args.variant}.ckpt")})
    elif args.command == "generate":
        cands = ex.stage_generate(runp, args.variant)
        _emit({"generations": str(out / f"gen_{args.variant}.jsonl"), "prompts": len(cands)})
    elif args.command == "pdgrs":
        path, n = ex.stage_pdgrs(runp, args.variant, eta, tau)
        _emit({"data": str(path), "pairs": n})
    elif args.command == "histogram":
        _emit(ex.stage_histogram(runp, args.variant, eta, tau))
    elif args.command == "select":
        path, n = ex.stage_select(runp, args.policy, args.variant)
        _emit({"data": str(path), "rows": n})
    elif args.command == "dpo":
        _, m = ex.stage_dpo(runp, _existing(args.data), args.tag or args.data.stem)
        _emit(m)
    elif args.command == "rs-sft":
        ex.stage_rs_sft(runp, _existing(args.data), args.tag or args.data.stem)
        _emit({"checkpoint": str(out / f"models/{args.tag or args.data.stem}.ckpt")})
    elif args.command == "eval":
        cand = io.load_checkpoint(_existing(args.candidate), ToyLMParams)
        base = io.load_checkpoint(_existing(args.baseline), ToyLMParams) if args.baseline else None
        _emit(ex.stage_eval(runp, cand, args.tag, base, args.streams == "shared"))


def _existing(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input artifact {path}")
    return path


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level report
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
