"""Command-line entry point: ``softpivot <command> [flags]``.

Exit status: 0 on success, 2 on a usage error, 1 when the command fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiments as ex
from .data import EOS
from .decoding import BeamConfig, cascade_decode_batch, write_decode_output
from .pipeline import PipelineConfig, RunDir, merge_overrides, run_pipeline

log = logging.getLogger("softpivot")

COMMANDS = ("gen-data", "pretrain", "pseudo-pivot", "finetune", "decode", "evaluate", "ablate", "report")
CORRECTIONS = ("none", "eq1", "add1", "add05", "exc")

# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "correction": "bridge.correction",
    "n_pivot": "decode.n_pivot",
    "m_target": "decode.m_target",
    "beam": "decode.beam",
    "alpha_train": "bridge.alpha_train",
    "alpha_decode": "bridge.alpha_decode",
    "beta": "loss.beta",
    "gamma": "loss.gamma",
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="JSON config (pipeline config, or experiment spec for ablate)")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--out", metavar="DIR", help="run directory (default runs/default)")
    p.add_argument("--correction", choices=CORRECTIONS)
    p.add_argument("--n-pivot", type=int, metavar="N")
    p.add_argument("--m-target", type=int, metavar="N")
    p.add_argument("--beam", type=int, metavar="N")
    p.add_argument("--alpha-train", type=float, metavar="F")
    p.add_argument("--alpha-decode", type=float, metavar="F")
    p.add_argument("--beta", type=float, metavar="F")
    p.add_argument("--gamma", type=float, metavar="F")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="softpivot", description="Differentiable pivot cascade toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "gen-data": "write synthetic corpora and vocabularies",
        "pretrain": "train the source-pivot and pivot-target models",
        "pseudo-pivot": "translate the (source, target) data into pivot",
        "finetune": "connect the halves and fine-tune end to end",
        "decode": "translate a file with the cascade",
        "evaluate": "BLEU of the direct, pivot and cascade systems",
        "ablate": "run an experiment grid over seeds",
        "report": "collate a run directory into report.md",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=helps[name]) for name in COMMANDS}
    subs["decode"].add_argument("--input", metavar="PATH", help="source sentences, one per line (default: test split)")
    subs["decode"].add_argument("--output", metavar="PATH", help="JSON-lines output (default OUT/decode.jsonl)")
    subs["decode"].add_argument("--candidates", action="store_true", help="also write all n*m candidates")
    subs["evaluate"].add_argument("--systems", default=",".join(ex.SYSTEMS), help="comma-separated subset of %(default)s")
    subs["evaluate"].add_argument("--split", default="test", choices=("dev", "test"))
    subs["ablate"].add_argument("--train", action="store_true", help="run missing pipeline steps for each seed")
    subs["ablate"].add_argument("--workers", type=int, metavar="N")
    parser.set_defaults(_subparsers=subs)
    return parser


def _overrides(args) -> dict:
    return {FLAG_KEYS[k]: getattr(args, k) for k in FLAG_KEYS if getattr(args, k) is not None}


def resolve_config(args) -> tuple[PipelineConfig, Path]:
    """--config, else the run directory's saved config, else defaults; then flag overrides."""
    out = Path(args.out or "runs/default")
    if args.config:
        cfg = PipelineConfig.load(args.config)
    elif (out / "config.json").exists():
        cfg = PipelineConfig.load(out / "config.json")
    else:
        cfg = PipelineConfig()
    over = _overrides(args)
    return (merge_overrides(cfg, over) if over else cfg), out


def cmd_finetune(cfg: PipelineConfig, out: Path, args) -> None:
    saved = out / "config.json"
    base = PipelineConfig.load(saved) if saved.exists() else cfg
    if saved.exists() and ex._training_key(base) != ex._training_key(cfg):
        # different training settings: keep the base cascade, fine-tune a variant next to it
        run_pipeline(base, out, ("connect",))
        ex.ensure_cascade(cfg, RunDir(out))
        log.info("variant written to %s", ex.variant_dir(cfg, RunDir(out)).root)
        return
    run_pipeline(cfg, out, ("connect", "finetune"))


def cmd_decode(cfg: PipelineConfig, out: Path, args) -> None:
    run = RunDir(out)
    sv, pv, tv = run.vocabs()
    if args.input:
        sources = [line.rstrip("\n") for line in open(args.input, encoding="utf-8") if line.strip()]
    else:
        sources = run.read("test").src
    cm = ex.ensure_cascade(cfg, run).eval()
    d = cfg.decode
    beam = BeamConfig(d.beam, d.beam, cfg.model.max_len - 1, d.length_penalty)
    results = []
    for part in ex._chunks([ex._content(sv.encode(s)) + [EOS] for s in sources], 100):
        results += cascade_decode_batch(cm, part, beam, d.n_pivot, beam, d.m_target, cfg.bridge, d.rule)
    path = Path(args.output) if args.output else out / "decode.jsonl"
    write_decode_output(path, results, (pv, tv), with_candidates=args.candidates)
    log.info("wrote %d translations to %s", len(results), path)


def cmd_evaluate(cfg: PipelineConfig, out: Path, args) -> None:
    systems = [s for s in args.systems.split(",") if s]
    bad = [s for s in systems if s not in ex.SYSTEMS]
    if bad:
        raise ValueError(f"unknown systems {bad}; choose from {list(ex.SYSTEMS)}")
    res = ex.evaluate(cfg, RunDir(out), systems, args.split)
    for name, r in res["systems"].items():
        print(f"{name:8s} BLEU {r['bleu']:6.2f}  exact {r['exact']:.3f}  inconsistency {r['inconsistency_rate']:.4f}")


def cmd_ablate(args) -> None:
    if not args.config:
        raise ValueError("ablate needs --config pointing to an experiment spec")
    spec = ex.ExperimentSpec.load(args.config)
    over = _overrides(args)
    seed = over.pop("seed", None)
    changes = {"overrides": {**spec.overrides, **over}}
    if seed is not None:
        changes["seeds"] = [seed]
    if args.out:
        changes["out"] = args.out
    if args.train:
        changes["train"] = True
    if args.workers:
        changes["workers"] = args.workers
    spec = dataclasses.replace(spec, **changes)
    log.info("ablation %s seeds %s", spec.name, spec.seeds)
    rows = ex.ablate(spec)
    sys.stdout.write(ex.format_table(rows, spec))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            # the subcommand's usage line lists every valid flag
            args._subparsers[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
    except SystemExit as e:  # argparse reports usage errors with status 2
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "ablate":
            cmd_ablate(args)
            return 0
        if args.command == "report":
            path = ex.report(args.out or "runs/default")
            print(path)
            return 0
        cfg, out = resolve_config(args)
        log.info("%s: config %s seed %d out %s", args.command, cfg.hash(), cfg.seed, out)
        if args.command in ("gen-data", "pretrain", "pseudo-pivot"):
            run_pipeline(cfg, out, ("data" if args.command == "gen-data" else args.command,))
        elif args.command == "finetune":
            cmd_finetune(cfg, out, args)
        elif args.command == "decode":
            cmd_decode(cfg, out, args)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out, args)
        return 0
    except Exception as e:  # noqa: BLE001 - every failure maps to exit status 1
        log.error("%s failed: %s", args.command, e)
        if args.verbose:
            log.exception("traceback")
        return 1


if __name__ == "__main__":
    sys.exit(main())
