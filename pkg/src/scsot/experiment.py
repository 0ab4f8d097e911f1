"""Experiment plumbing: sectioned key=value configs, train/evaluate runs, the ablation matrix.

A run directory holds ``resolved.cfg`` (every setting after defaults and
derived values are filled in), ``model.ckpt``, ``metrics.csv``, one
``hyp_<split>.txt`` per evaluated split, per-utterance diarization CSVs under
``diar/<split>/`` and ``scores.csv``. Passing ``resolved.cfg`` back in with
the same corpus reproduces the run bit for bit (apart from ``wall_time``).
"""

from __future__ import annotations

import configparser
import copy
import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .asr_model import DecoderConfig, EncoderConfig, subsampled_length, write_attention_dump
from .decoding import DecodeConfig, decode, read_hypotheses, write_hypotheses
from .diar_model import DiarConfig, count_speakers, read_diar_output, write_diar_output
from .metrics import ScoreReport, corpus_der, multi_talker_errors, sca, write_score_report
from .mixture_sim import CorpusConfig, activity_labels, downsample_labels, read_corpus_config, read_split
from .serialization import TokenVocab, serialize_fifo
from .training import TrainConfig, Trainer, build_models, write_metrics_log

log = logging.getLogger("scsot")


class ConfigError(ValueError):
    """Bad config file content: unknown section or key, or an unparsable value."""


class AblationError(RuntimeError):
    pass


@dataclass
class RunConfig:
    use_diar: bool = True
    eval_every: int = 0  # steps between dev evaluations; 0 disables
    eval_limit: int = 20  # mixtures decoded per periodic evaluation
    splits: str = "dev,test"  # evaluated after training
    row: int = 0  # ablation row this config was derived from, 0 if none


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    diar: DiarConfig = field(default_factory=DiarConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # max_len 0: twice the longest training target, filled in by resolve()
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(max_len=0))
    run: RunConfig = field(default_factory=RunConfig)

    def section_names(self) -> list:
        return [f.name for f in fields(self)]


# --- config files --------------------------------------------------------------

_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


def _coerce(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in _TRUE:
                return True
            if raw.lower() in _FALSE:
                return False
            raise ValueError("expected a boolean")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"invalid value for {section}.{key}: {raw!r} ({exc})") from None
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay the sections in ``text`` on ``base`` (defaults if omitted)."""
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in cfg.section_names():
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _coerce(section, key, raw, getattr(target, key)))
    return cfg


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), base)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in cfg.section_names():
        lines.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in fields(sec):
            v = getattr(sec, f.name)
            lines.append(f"{f.name} = {repr(v) if isinstance(v, float) else v}")
        lines.append("")
    return "\n".join(lines)


def validate(cfg: ExperimentConfig) -> None:
    for name in cfg.section_names():
        sec = getattr(cfg, name)
        if hasattr(sec, "validate"):
            try:
                sec.validate()
            except ValueError as exc:
                raise ConfigError(f"[{name}] {exc}") from None
    unknown = set(split_names(cfg)) - {"train", "dev", "test"}
    if unknown:
        raise ConfigError(f"[run] unknown splits {sorted(unknown)}")
    if cfg.decode.termination == "speaker_count" and not cfg.run.use_diar and cfg.decode.count_source != "oracle":
        raise ConfigError("speaker-count termination needs the diarization branch or count_source = oracle")


def split_names(cfg: ExperimentConfig) -> list:
    return [s.strip() for s in cfg.run.splits.split(",") if s.strip()]


def max_target_length(mixtures, vocab: TokenVocab, mode: str) -> int:
    return max(len(serialize_fifo(m.transcripts, m.start_frames, vocab, mode).tokens) for m in mixtures)


def resolve(cfg: ExperimentConfig, train_mixtures=None) -> ExperimentConfig:
    """Fill derived fields so the returned config fully determines a run.

    Dimensions follow the corpus and the diarization width, the label mode
    follows the termination policy, and ``decode.max_len = 0`` becomes twice
    the longest training target.
    """
    cfg = copy.deepcopy(cfg)
    cfg.encoder.input_dim = cfg.corpus.feature_dim
    cfg.decoder.vocab_size = TokenVocab(cfg.corpus.vocab_size).size
    cfg.decoder.attractor_dim = cfg.diar.hidden
    cfg.diar.max_attractors = max(cfg.diar.max_attractors, cfg.corpus.max_speakers + 1)
    cfg.train.label_mode = cfg.decode.label_mode
    if cfg.decode.max_len == 0:
        if train_mixtures is None:
            raise ConfigError("decode.max_len = 0 needs the training split to derive a length cap")
        cfg.decode.max_len = 2 * max_target_length(train_mixtures, TokenVocab(cfg.corpus.vocab_size),
                                                   cfg.train.label_mode)
    validate(cfg)
    return cfg


# --- corpus -------------------------------------------------------------------

@dataclass
class Corpus:
    root: Path
    config: CorpusConfig
    seed: int
    vocab: TokenVocab
    splits: dict

    def split(self, name: str) -> list:
        if name not in self.splits:
            self.splits[name] = read_split(self.root / name)
        return self.splits[name]


def load_corpus(root) -> Corpus:
    root = Path(root)
    for need in ("corpus.json", "vocab.txt"):
        if not (root / need).is_file():
            raise FileNotFoundError(f"corpus directory {root} is missing {need}")
    config, seed = read_corpus_config(root)
    return Corpus(root, config, seed, TokenVocab.read(root / "vocab.txt"), {})


def with_corpus(cfg: ExperimentConfig, corpus: Corpus) -> ExperimentConfig:
    """The corpus on disk is authoritative for its own generation settings."""
    cfg = copy.deepcopy(cfg)
    cfg.corpus = copy.deepcopy(corpus.config)
    return cfg


def build(cfg: ExperimentConfig):
    return build_models(cfg.encoder, cfg.decoder, cfg.diar if cfg.run.use_diar else None, seed=cfg.train.seed)


# --- evaluation -----------------------------------------------------------------

@dataclass
class SplitOutput:
    results: list
    report: ScoreReport


def infer_subsample(num_frames: int, out_frames: int) -> int:
    for r in range(1, num_frames + 1):
        if subsampled_length(num_frames, r) == out_frames:
            return r
    raise ValueError(f"no subsampling factor maps {num_frames} frames to {out_frames}")


def score_split(mixtures, hyps: dict, diar: dict | None = None, threshold: float = 0.5) -> ScoreReport:
    """Score hypothesis records (as read by ``read_hypotheses``) against reference mixtures.

    ``diar`` maps mixture id to ``(posterior (T', K), existence (K,))``; DER
    uses the first ``count_speakers(existence)`` posterior columns and needs
    oracle segments.
    """
    errors = total = 0
    per = []
    for m in mixtures:
        if m.mixture_id not in hyps:
            raise ValueError(f"no hypothesis for {m.mixture_id}")
        h = hyps[m.mixture_id]
        e, n = multi_talker_errors(m.fifo_transcripts(), h["transcripts"])
        errors += e
        total += n
        per.append({"id": m.mixture_id, "errors": e, "ref_tokens": n, "true_count": m.num_speakers,
                    "predicted_count": h["count"], "reason": h["reason"]})
    if total == 0:
        raise ValueError("reference contains no tokens")
    acc = sca([p["true_count"] for p in per], [p["predicted_count"] for p in per])
    der = None
    if diar is not None and all(m.has_labels for m in mixtures):
        refs, posts = [], []
        for m in mixtures:
            post, ex = diar[m.mixture_id]
            k = count_speakers(ex, threshold)
            refs.append(downsample_labels(activity_labels(m).matrix, infer_subsample(m.num_frames, post.shape[0])))
            posts.append(post[:, :k])
        der = corpus_der(refs, posts)
    return ScoreReport(errors / total, acc, None if der is None else der.der, der, per)


def decode_split(models, cfg: ExperimentConfig, mixtures, vocab: TokenVocab, record_dir=None) -> list:
    needs_labels = cfg.decode.conditioning == "oracle" or cfg.decode.count_source == "oracle"
    out = []
    for m in mixtures:
        labels = None
        if needs_labels:
            if not m.has_labels:
                raise AblationError(f"{m.mixture_id}: oracle activity requested but the mixture has no labels")
            labels = activity_labels(m).matrix
        record = [] if record_dir is not None else None
        out.append(decode(models, m.features, cfg.decode, vocab, oracle_labels=labels, record=record))
        if record is not None:
            Path(record_dir).mkdir(parents=True, exist_ok=True)
            write_attention_dump(Path(record_dir) / f"{m.mixture_id}.txt", record)
    return out


def result_records(results) -> dict:
    return {i: {"reason": r.reason, "count": r.predicted_count, "transcripts": [list(s) for s in r.transcripts]}
            for i, r in results.items()}


def evaluate(models, cfg: ExperimentConfig, mixtures, vocab: TokenVocab, split: str, out_dir=None) -> SplitOutput:
    results = decode_split(models, cfg, mixtures, vocab)
    by_id = {m.mixture_id: r for m, r in zip(mixtures, results)}
    diar = None
    if results and results[0].posterior is not None:
        diar = {i: (r.posterior, r.existence) for i, r in by_id.items()}
    report = score_split(mixtures, result_records(by_id), diar, cfg.decode.existence_threshold)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_hypotheses(out_dir / f"hyp_{split}.txt", list(by_id), results)
        if diar is not None:
            ddir = out_dir / "diar" / split
            ddir.mkdir(parents=True, exist_ok=True)
            for i, (post, ex) in diar.items():
                write_diar_output(ddir / f"{i}.csv", post, ex)
    return SplitOutput(results, report)


def score_rows(split: str, report: ScoreReport) -> list:
    errors = sum(p["errors"] for p in report.per_utterance)
    ref = sum(p["ref_tokens"] for p in report.per_utterance)
    correct = sum(p["true_count"] == p["predicted_count"] for p in report.per_utterance)
    rows = [("wer", split, report.wer, f"errors={errors};ref_tokens={ref}"),
            ("sca", split, report.sca, f"correct={correct};utterances={len(report.per_utterance)}")]
    if report.der_components is not None:
        c = report.der_components
        rows.append(("der", split, c.der, f"miss={c.miss:.6f};false_alarm={c.false_alarm:.6f};"
                                          f"confusion={c.confusion:.6f};ref_frames={c.reference_frames}"))
    return rows


def read_scored_outputs(hyp_path, diar_dir=None) -> tuple:
    hyps = read_hypotheses(hyp_path)
    diar = None
    if diar_dir is not None and Path(diar_dir).is_dir():
        diar = {p.stem: read_diar_output(p) for p in sorted(Path(diar_dir).glob("*.csv"))}
    return hyps, diar


# --- runs -------------------------------------------------------------------------

@dataclass
class RunResult:
    out_dir: Path
    config: ExperimentConfig
    history: list
    reports: dict
    models: object = None


def _periodic_eval(models, cfg, corpus: Corpus, out_dir: Path):
    if cfg.run.eval_every <= 0:
        return None
    dev = corpus.split("dev")[: cfg.run.eval_limit or None]
    path = out_dir / "dev_log.csv"
    path.write_text("step,wer,sca\n")

    def callback(rec):
        if rec["step"] % cfg.run.eval_every == 0:
            rep = evaluate(models, cfg, dev, corpus.vocab, "dev").report
            with open(path, "a") as fh:
                fh.write(f"{rec['step']},{rep.wer!r},{rep.sca!r}\n")
            log.info("step %d dev wer=%.4f sca=%.4f", rec["step"], rep.wer, rep.sca)
    return callback


class _RunLog:
    """Mirror the package logger into ``run.log`` inside the run directory."""

    def __init__(self, out_dir: Path):
        self.handler = logging.FileHandler(out_dir / "run.log", mode="w")
        self.handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))

    def __enter__(self):
        # run.log always records INFO, whatever the console verbosity
        self.level = log.level
        if log.getEffectiveLevel() > logging.INFO:
            log.setLevel(logging.INFO)
        self.handler.setLevel(logging.INFO)
        log.addHandler(self.handler)
        return self

    def __exit__(self, *exc):
        log.removeHandler(self.handler)
        log.setLevel(self.level)
        self.handler.close()


def conditioning_source(cfg: ExperimentConfig) -> str:
    if not (cfg.decoder.use_speaker_emb or cfg.decoder.use_activity_penalty):
        return "none"
    return cfg.decode.conditioning


def train_run(cfg: ExperimentConfig, corpus: Corpus, out_dir) -> tuple:
    """Train from scratch; writes ``resolved.cfg``, ``model.ckpt`` and ``metrics.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = corpus.split("train")
    if not all(m.has_labels for m in train):
        raise ValueError("training split needs oracle segments for every mixture")
    cfg = resolve(with_corpus(cfg, corpus), train)
    (out_dir / "resolved.cfg").write_text(format_config(cfg))
    log.info("resolved config:\n%s", format_config(cfg))
    models = build(cfg)
    trainer = Trainer(models, cfg.train, train, corpus.vocab)
    history = trainer.run(callback=_periodic_eval(models, cfg, corpus, out_dir))
    trainer.save(out_dir / "model.ckpt")
    write_metrics_log(out_dir / "metrics.csv", history)
    if history:
        last = history[-1]
        log.info("trained %d steps: L_asr=%.4f L_diar=%s", last["step"], last["l_asr"],
                 f"{last['l_diar']:.4f}" if "l_diar" in last else "n/a")
    return cfg, models, history


def load_models(cfg: ExperimentConfig, checkpoint):
    from .diffmath import load_checkpoint

    path = Path(checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    models = build(cfg)
    models.load_state_dict({k: v for k, v in load_checkpoint(path).items() if k.startswith(("asr.", "diar."))})
    return models


def evaluate_run(cfg: ExperimentConfig, models, corpus: Corpus, out_dir) -> dict:
    out_dir = Path(out_dir)
    log.info("conditioning source = %s; termination = %s; beam = %d",
             conditioning_source(cfg), cfg.decode.termination, cfg.decode.beam)
    reports, rows = {}, []
    for split in split_names(cfg):
        reports[split] = evaluate(models, cfg, corpus.split(split), corpus.vocab, split, out_dir).report
        rows.extend(score_rows(split, reports[split]))
        r = reports[split]
        log.info("%s: wer=%.4f sca=%.4f der=%s", split, r.wer, r.sca, "n/a" if r.der is None else f"{r.der:.4f}")
    write_score_report(out_dir / "scores.csv", rows)
    return reports


def run_experiment(corpus, cfg: ExperimentConfig, out_dir, checkpoint=None) -> RunResult:
    """Train (or load ``checkpoint``), then evaluate the configured splits."""
    corpus = corpus if isinstance(corpus, Corpus) else load_corpus(corpus)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _RunLog(out_dir):
        if checkpoint is None:
            cfg, models, history = train_run(cfg, corpus, out_dir)
        else:
            cfg = resolve(with_corpus(cfg, corpus), corpus.split("train"))
            (out_dir / "resolved.cfg").write_text(format_config(cfg))
            log.info("resolved config:\n%s", format_config(cfg))
            log.info("weights from %s", checkpoint)
            models, history = load_models(cfg, checkpoint), []
        reports = evaluate_run(cfg, models, corpus, out_dir)
    return RunResult(out_dir, cfg, history, reports, models)


# --- ablation ----------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    row: int
    use_speaker_emb: bool
    use_activity_penalty: bool
    mtl: bool
    oracle_activity: bool

    @property
    def conditioning(self) -> str:
        if not (self.use_speaker_emb or self.use_activity_penalty):
            return "none"
        return "oracle" if self.oracle_activity else "predicted"


ABLATION_ROWS = {r.row: r for r in (
    AblationRow(2, False, False, False, False),  # SOT
    AblationRow(3, False, False, True, False),  # SOT + MTL
    AblationRow(4, True, False, False, False),  # SC-SOT, embeddings only
    AblationRow(5, True, False, True, False),
    AblationRow(6, False, True, True, False),
    AblationRow(7, True, True, True, False),
    AblationRow(8, True, True, True, True),  # row 7 model, oracle activity at decode time
)}


def parse_rows(text: str) -> list:
    try:
        rows = [int(r) for r in str(text).split(",") if r.strip()]
    except ValueError:
        raise ConfigError(f"--rows must be comma-separated integers, got {text!r}") from None
    bad = [r for r in rows if r not in ABLATION_ROWS]
    if bad or not rows:
        raise ConfigError(f"ablation rows must be a non-empty subset of 2..8, got {text!r}")
    return rows


def row_config(base: ExperimentConfig, row: int) -> ExperimentConfig:
    flags = ABLATION_ROWS[row]
    cfg = copy.deepcopy(base)
    cfg.decoder.use_speaker_emb = flags.use_speaker_emb
    cfg.decoder.use_activity_penalty = flags.use_activity_penalty
    cfg.train.mtl = flags.mtl
    cfg.run.use_diar = row != 2
    # only a jointly trained diarization branch can count speakers
    cfg.decode.termination = "speaker_count" if flags.mtl else "eos"
    cfg.decode.count_source = "predicted"
    cfg.decode.conditioning = flags.conditioning
    cfg.run.row = row
    return cfg


def _training_key(cfg: ExperimentConfig) -> str:
    """Everything that influences training; decode-time settings are excluded."""
    c = copy.deepcopy(cfg)
    c.decode.conditioning = "predicted"
    c.run.row = 0
    return format_config(c)


ABLATION_COLUMNS = ["row", "speaker_emb", "activity", "mtl", "oracle_activity", "seeds",
                    "wer_dev", "wer_test", "sca_dev", "sca_test", "der_dev", "der_test"]


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def ablate(rows, corpus, out_dir, base: ExperimentConfig | None = None, seeds=(0, 1, 2)) -> list:
    """Train and evaluate each ablation row for each seed; returns per-row mean records.

    Row 8 reuses the row 7 checkpoint trained in the same call (its training
    config is identical; only decoding differs). Each run otherwise starts
    from freshly initialised weights and optimizer state.
    """
    base = base or ExperimentConfig()
    rows = parse_rows(",".join(map(str, rows)) if not isinstance(rows, str) else rows)
    corpus = corpus if isinstance(corpus, Corpus) else load_corpus(corpus)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if 8 in rows:
        for split in split_names(base):
            missing = [m.mixture_id for m in corpus.split(split) if not m.has_labels]
            if missing:
                raise AblationError(f"row 8 needs oracle activity labels but split {split!r} has "
                                    f"{len(missing)} unlabelled mixtures (e.g. {missing[0]})")
    trained = {}
    per_run = []
    for row in sorted(rows, key=lambda r: (r == 8, r)):
        for seed in seeds:
            cfg = row_config(base, row)
            cfg.train.seed = seed
            run_dir = out_dir / f"row{row}" / f"seed{seed}"
            key = _training_key(resolve(with_corpus(cfg, corpus), corpus.split("train")))
            log.info("ablation row %d seed %d: conditioning source = %s", row, seed, ABLATION_ROWS[row].conditioning)
            result = run_experiment(corpus, cfg, run_dir, checkpoint=trained.get(key))
            trained.setdefault(key, run_dir / "model.ckpt")
            rec = {"row": row, "seed": seed}
            for split, rep in result.reports.items():
                rec[f"wer_{split}"], rec[f"sca_{split}"], rec[f"der_{split}"] = rep.wer, rep.sca, rep.der
            per_run.append(rec)

    with open(out_dir / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["row", "seed"] + ABLATION_COLUMNS[6:]
        w.writerow(cols)
        for rec in per_run:
            w.writerow([rec["row"], rec["seed"]] + [_fmt(rec.get(c)) for c in cols[2:]])

    summary = []
    for row in rows:
        recs = [r for r in per_run if r["row"] == row]
        flags = ABLATION_ROWS[row]
        out = {"row": row, "speaker_emb": int(flags.use_speaker_emb), "activity": int(flags.use_activity_penalty),
               "mtl": int(flags.mtl), "oracle_activity": int(flags.oracle_activity),
               "seeds": " ".join(str(s) for s in seeds)}
        for c in ABLATION_COLUMNS[6:]:
            vals = [r[c] for r in recs if r.get(c) is not None]
            out[c] = float(np.mean(vals)) if vals else None
        summary.append(out)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for rec in summary:
            w.writerow([rec[c] if c in ABLATION_COLUMNS[:6] else _fmt(rec[c]) for c in ABLATION_COLUMNS])
    return summary
