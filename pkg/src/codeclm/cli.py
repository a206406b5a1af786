"""Command-line entry point: data generation, training, synthesis, evaluation, sweeps.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import torch

from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    RAS_OFF,
    build_prompts,
    five_time_summary,
    parse_grid,
    run_specs,
    stability_report,
    sweep_top_p,
    write_gnuplot,
)
from .pipeline import PromptMode, check_compatible, sort_candidates
from .sampling import SamplingConfig
from .training import train_ar, train_nar
from .world import make_corpus, make_eval_set, read_corpus, write_corpus

log = logging.getLogger("codeclm")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--group-size", type=int, help="expected AR group size (checked against the checkpoint)")
    p.add_argument("--top-p", type=float, help="nucleus threshold v")
    p.add_argument("--ras-window", type=int, help="repetition window K")
    p.add_argument("--ras-threshold", type=float, help="repetition threshold; 'inf' disables the fallback")
    p.add_argument("--samples", type=int, default=1, help="candidates per utterance (5 for five-time sampling)")
    p.add_argument("--mode", choices=[m.value for m in PromptMode], default=PromptMode.CONTINUATION.value)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="codeclm", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="JSON run config (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic corpus as JSON lines")
    p.add_argument("--split", choices=["train", "eval"], default="train")
    p.add_argument("--out", type=Path, required=True)

    for name, what in (("train-ar", "AR"), ("train-nar", "NAR")):
        p = sub.add_parser(name, help=f"train the {what} model")
        p.add_argument("--data", type=Path, required=True, help="training corpus (JSON lines)")
        p.add_argument("--val", type=Path, help="validation utterances; a held-out slice is generated if omitted")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--log", type=Path, help="training CSV (default: <out>.log.csv)")
        if name == "train-ar":
            p.add_argument("--group-size", type=int, default=1)

    p = sub.add_parser("synth", help="synthesize one utterance and report every candidate")
    p.add_argument("--ar", type=Path, required=True)
    p.add_argument("--nar", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="utterances to draw text and prompts from")
    p.add_argument("--index", type=int, default=0, help="which utterance to synthesize")
    p.add_argument("--out", type=Path, required=True, help="JSON report with the selected candidate")
    _sampling_flags(p)

    p = sub.add_parser("eval", help="mean surrogate metrics over an evaluation set")
    p.add_argument("--ar", type=Path, required=True)
    p.add_argument("--nar", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _sampling_flags(p)

    p = sub.add_parser("sweep", help="top-p sweep with and without the repetition fallback")
    p.add_argument("--ar", type=Path, action="append", required=True, help="one AR checkpoint per group size")
    p.add_argument("--nar", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--top-p", default="0.0:0.8:0.1", help="lo:hi:step or a comma list")
    p.add_argument("--mode", choices=[m.value for m in PromptMode], default=PromptMode.CONTINUATION.value)
    p.add_argument("--no-timing", action="store_true", help="write wall_ms as 0 for byte-stable output")
    p.add_argument("--out", type=Path, required=True, help="CSV path; a gnuplot script is written beside it")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _sampling(cfg: RunConfig, args) -> SamplingConfig:
    s = cfg.sampler
    return SamplingConfig(
        top_p=s.top_p if args.top_p is None else args.top_p,
        window=s.window if args.ras_window is None else args.ras_window,
        threshold=s.threshold if args.ras_threshold is None else args.ras_threshold,
        seed=cfg.seed,
    )


def _validation(cfg: RunConfig, path: Optional[Path]):
    if path is not None:
        return read_corpus(path, cfg.world)
    per_speaker = -(-cfg.data.val_size // len(cfg.world.held_out_speakers))
    return make_eval_set(cfg.world, per_speaker, cfg.data.eval_len, cfg.seed + 1)[: cfg.data.val_size]


def _models(cfg: RunConfig, args):
    ar, _ = load_model(args.ar, kind="ar")
    nar, _ = load_model(args.nar, kind="nar")
    check_compatible(ar, nar, args.group_size)
    if ar.world != cfg.world:
        raise ValueError("checkpoint world config differs from the run config")
    return ar, nar


def _candidate_json(c) -> dict:
    return {"sim": c.sim, "ter": c.ter, "hit_cutoff": c.hit_cutoff, "ar_steps": c.ar_steps}


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_data(cfg: RunConfig, args) -> None:
    if args.split == "train":
        utts = make_corpus(cfg.world, cfg.data.n_train, cfg.data.train_len, cfg.seed)
    else:
        utts = make_eval_set(cfg.world, cfg.data.eval_per_speaker, cfg.data.eval_len, cfg.seed)
    write_corpus(utts, args.out)
    log.info("wrote %d utterances to %s", len(utts), args.out)


def cmd_train(cfg: RunConfig, args, kind: str) -> None:
    corpus = read_corpus(args.data, cfg.world)
    if not corpus:
        raise ValueError(f"{args.data}: empty corpus")
    val = _validation(cfg, args.val)
    log_path = args.log or Path(str(args.out) + ".log.csv")
    if kind == "ar":
        model, step = train_ar(corpus, cfg, args.group_size, cfg.seed, val, log_path)
    else:
        model, step = train_nar(corpus, cfg, cfg.seed, val, log_path)
    save_model(model, args.out, step)
    log.info("saved %s checkpoint at step %d to %s", kind, step, args.out)


def cmd_synth(cfg: RunConfig, args) -> None:
    ar, nar = _models(cfg, args)
    utts = read_corpus(args.data, cfg.world)
    if not 0 <= args.index < len(utts):
        raise ValueError(f"--index {args.index} outside [0, {len(utts)})")
    specs = build_prompts(utts, PromptMode(args.mode), cfg.world, cfg.data.prompt_frames)
    sampling = _sampling(cfg, args)
    cands = run_specs([specs[args.index]], ar, nar, sampling, [cfg.seed], args.samples)[0]
    best = sort_candidates(cands)
    _write_json(args.out, {
        "index": args.index,
        "mode": args.mode,
        "group_size": ar.group_size,
        "sampling": {"top_p": sampling.top_p, "window": sampling.window,
                     "threshold": None if sampling.threshold == RAS_OFF else sampling.threshold},
        "selected": cands.index(best),
        "codes": best.codes.tolist(),
        "candidates": [_candidate_json(c) for c in cands],
    })
    log.info("candidate %d selected: ter %.4f sim %.4f", cands.index(best), best.ter, best.sim)


def cmd_eval(cfg: RunConfig, args) -> None:
    ar, nar = _models(cfg, args)
    utts = read_corpus(args.data, cfg.world)
    specs = build_prompts(utts, PromptMode(args.mode), cfg.world, cfg.data.prompt_frames)
    groups = run_specs(specs, ar, nar, _sampling(cfg, args), [cfg.seed], args.samples)
    summary = five_time_summary(groups)
    stab = stability_report([c for g in groups for c in g])
    summary.update(n_utterances=len(specs), samples=args.samples, group_size=ar.group_size,
                   cutoff_rate=stab.cutoff_rate, worst_run=stab.worst_run)
    _write_json(args.out, summary)
    log.info("single-sample ter %.4f sim %.4f", summary["single_ter"], summary["single_sim"])


def cmd_sweep(cfg: RunConfig, args) -> None:
    models = {}
    nar, _ = load_model(args.nar, kind="nar")
    for path in args.ar:
        ar, _ = load_model(path, kind="ar")
        check_compatible(ar, nar)
        if ar.group_size in models:
            raise ValueError(f"two AR checkpoints with group size {ar.group_size}")
        models[ar.group_size] = (ar, nar)
    utts = read_corpus(args.data, cfg.world)
    specs = build_prompts(utts, PromptMode(args.mode), cfg.world, cfg.data.prompt_frames)
    grid = parse_grid(args.top_p)
    result = sweep_top_p(specs, models, sorted(models), grid, seeds=[cfg.seed], timing=not args.no_timing)
    result.write(args.out)
    write_gnuplot(args.out, Path(args.out).with_suffix(".gp"), sorted(models))
    log.info("wrote %d sweep rows to %s", len(result.rows), args.out)


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    threads = os.environ.get("CODEC_LM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = resolve_config(args)
        log.info("command %s seed %d config %s", args.command, cfg.seed,
                 json.dumps(cfg.to_dict(), sort_keys=True, default=str))
        if args.command == "gen-data":
            cmd_gen_data(cfg, args)
        elif args.command in ("train-ar", "train-nar"):
            cmd_train(cfg, args, args.command.split("-")[1])
        elif args.command == "synth":
            cmd_synth(cfg, args)
        elif args.command == "eval":
            cmd_eval(cfg, args)
        elif args.command == "sweep":
            cmd_sweep(cfg, args)
    except (ConfigError, CheckpointError, OSError, ValueError, KeyError, IndexError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())
