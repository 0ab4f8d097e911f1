"""Command-line entry point: ``scsot <subcommand> [flags]``.

Subcommands: gen-data, train, decode, score, dump-attention, ablate. Log
verbosity comes from ``SCSOT_LOG_LEVEL`` (default INFO). Exit codes: 0 ok,
2 usage error, 3 config error, 4 missing file, 5 invalid data, 6 ablation
precondition failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import experiment as ex
from .metrics import write_score_report
from .mixture_sim import read_split, write_corpus

log = logging.getLogger("scsot")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_ABLATION = 0, 2, 3, 4, 5, 6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"scsot: usage error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p, out_required=True):
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--seed", type=int, help="overrides train.seed (gen-data: the corpus seed)")
    p.add_argument("--out", required=out_required, help="output directory")


def _decode_flags(p):
    p.add_argument("--beam", type=int)
    p.add_argument("--termination", choices=["eos", "count"])
    p.add_argument("--conditioning", choices=["none", "predicted", "oracle"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scsot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic train/dev/test corpus")
    _common(p)

    p = sub.add_parser("train", help="train a model pair and evaluate it")
    _common(p)
    p.add_argument("--corpus", required=True)
    _decode_flags(p)

    p = sub.add_parser("decode", help="decode a split with a trained checkpoint")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    _decode_flags(p)

    p = sub.add_parser("score", help="score a hypothesis file against a reference split")
    p.add_argument("--ref", required=True, help="reference split directory, e.g. corpus/test")
    p.add_argument("--hyp", required=True, help="hypothesis file written by decode")
    p.add_argument("--diar", help="directory of per-utterance diarization CSVs (enables DER)")
    p.add_argument("--out", help="score CSV path (default: stdout)")
    p.add_argument("--threshold", type=float, default=0.5, help="existence threshold for DER columns")

    p = sub.add_parser("dump-attention", help="write per-utterance attention maps")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0, help="number of utterances (0: all)")
    _decode_flags(p)

    p = sub.add_parser("ablate", help="run the conditioning ablation matrix")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--rows", default="2,3,4,5,6,7,8")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    _decode_flags(p)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("SCSOT_LOG_LEVEL", "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ex.ConfigError(f"SCSOT_LOG_LEVEL={level!r} is not a logging level")
    console = [h for h in log.handlers if getattr(h, "_scsot_console", False)]
    if not console:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        h._scsot_console = True
        log.addHandler(h)
        console = [h]
    console[0].setLevel(level)
    log.setLevel(level)
    log.propagate = False


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if getattr(args, "config", None) else ex.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "beam", None) is not None:
        cfg.decode.beam = args.beam
    if getattr(args, "termination", None) is not None:
        cfg.decode.termination = {"eos": "eos", "count": "speaker_count"}[args.termination]
    if getattr(args, "conditioning", None) is not None:
        cfg.decode.conditioning = args.conditioning
    return cfg


def _checkpoint_config(args) -> ex.ExperimentConfig:
    """Decode-side commands default to the ``resolved.cfg`` saved beside the checkpoint."""
    if not args.config:
        sibling = Path(args.checkpoint).parent / "resolved.cfg"
        if sibling.is_file():
            args.config = str(sibling)
    return _config(args)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    seed = 0 if args.seed is None else args.seed
    cfg.corpus.validate()
    log.info("resolved config:\n%s", ex.format_config(cfg))
    splits = write_corpus(args.out, cfg.corpus, seed)
    log.info("wrote %s", ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    ex.run_experiment(args.corpus, _config(args), args.out)
    return EXIT_OK


def _decode_setup(args):
    corpus = ex.load_corpus(args.corpus)
    cfg = ex.resolve(ex.with_corpus(_checkpoint_config(args), corpus), corpus.split("train"))
    log.info("resolved config:\n%s", ex.format_config(cfg))
    log.info("conditioning source = %s", ex.conditioning_source(cfg))
    return corpus, cfg, ex.load_models(cfg, args.checkpoint)


def cmd_decode(args) -> int:
    corpus, cfg, models = _decode_setup(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(ex.format_config(cfg))
    res = ex.evaluate(models, cfg, corpus.split(args.split), corpus.vocab, args.split, out)
    hyp = out / f"hyp_{args.split}.txt"
    (out / "hyp.txt").write_text(hyp.read_text())
    log.info("%s: wer=%.4f sca=%.4f -> %s", args.split, res.report.wer, res.report.sca, hyp)
    return EXIT_OK


def cmd_score(args) -> int:
    mixtures = read_split(args.ref)
    diar_dir = args.diar
    if diar_dir is None:
        guess = Path(args.hyp).parent / "diar" / Path(args.ref).name
        diar_dir = guess if guess.is_dir() else None
    elif not Path(diar_dir).is_dir():
        raise FileNotFoundError(f"diarization directory not found: {diar_dir}")
    if not Path(args.hyp).is_file():
        raise FileNotFoundError(f"hypothesis file not found: {args.hyp}")
    hyps, diar = ex.read_scored_outputs(args.hyp, diar_dir)
    report = ex.score_split(mixtures, hyps, diar, args.threshold)
    rows = ex.score_rows(Path(args.ref).name, report)
    if args.out:
        write_score_report(args.out, rows)
    else:
        from .metrics import DER_CONVENTION, WER_CONVENTION

        print(f"# {WER_CONVENTION}; {DER_CONVENTION}")
        print("metric,split,value,components")
        for m, s, v, c in rows:
            print(f"{m},{s},{v:.6f},{c}")
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    corpus, cfg, models = _decode_setup(args)
    mixtures = corpus.split(args.split)
    if args.limit:
        mixtures = mixtures[: args.limit]
    ex.decode_split(models, cfg, mixtures, corpus.vocab, record_dir=args.out)
    log.info("wrote %d attention dumps to %s", len(mixtures), args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ex.ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if args.seed is not None:
        seeds = [args.seed]
    base = _config(args)
    summary = ex.ablate(ex.parse_rows(args.rows), args.corpus, args.out, base, seeds)
    print(",".join(ex.ABLATION_COLUMNS))
    for rec in summary:
        print(",".join(str(rec[c]) if c in ex.ABLATION_COLUMNS[:6] else ex._fmt(rec[c]) for c in ex.ABLATION_COLUMNS))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "decode": cmd_decode, "score": cmd_score,
            "dump-attention": cmd_dump_attention, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        return COMMANDS[args.command](args)
    except ex.ConfigError as exc:
        print(f"scsot: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"scsot: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ex.AblationError as exc:
        print(f"scsot: ablation error: {exc}", file=sys.stderr)
        return EXIT_ABLATION
    except (ValueError, KeyError) as exc:
        print(f"scsot: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
