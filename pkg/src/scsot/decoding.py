"""Autoregressive decoding with ``<eos>`` or speaker-count termination."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .asr_model import EncoderOutput
from .diar_model import count_speakers
from .mixture_sim import activity_labels, downsample_labels
from .serialization import EOS_TERMINAL, SC_TERMINAL, TokenVocab, count_segments, deserialize

TERMINAL_TOKEN = "terminal_token"
COUNT_REACHED = "count_reached"
LENGTH_CAP = "length_cap"


@dataclass
class DecodeConfig:
    beam: int = 4
    max_len: int = 40
    termination: str = "eos"  # or "speaker_count"
    conditioning: str = "predicted"  # predicted | oracle | none
    count_source: str = "predicted"  # predicted | oracle
    existence_threshold: float = 0.5

    def validate(self) -> None:
        if self.beam < 1 or self.max_len < 1:
            raise ValueError("beam and max_len must be >= 1")
        if self.termination not in ("eos", "speaker_count"):
            raise ValueError(f"unknown termination {self.termination!r}")
        if self.conditioning not in ("predicted", "oracle", "none"):
            raise ValueError(f"unknown conditioning source {self.conditioning!r}")
        if self.count_source not in ("predicted", "oracle"):
            raise ValueError(f"unknown count source {self.count_source!r}")

    @property
    def label_mode(self) -> str:
        return SC_TERMINAL if self.termination == "speaker_count" else EOS_TERMINAL


@dataclass
class DecodeResult:
    tokens: list
    transcripts: list
    predicted_count: int
    log_prob: float
    reason: str
    warnings: list = field(default_factory=list)
    posterior: np.ndarray | None = None
    existence: np.ndarray | None = None


# --- search -------------------------------------------------------------------

def eos_termination(eos: int):
    return lambda seq: TERMINAL_TOKEN if seq and seq[-1] == eos else None


def count_termination(sc: int, num_speakers: int):
    def check(seq):
        return COUNT_REACHED if seq and seq[-1] == sc and sum(t == sc for t in seq) >= num_speakers else None
    return check


def greedy_search(step_fn, terminate, max_len: int):
    """Argmax decoding; returns ``(tokens, log_prob, reason)``."""
    seq, score = [], 0.0
    while True:
        lp = step_fn([tuple(seq)])[0]
        tok = int(np.argmax(lp))
        seq.append(tok)
        score += float(lp[tok])
        reason = terminate(seq)
        if reason:
            return seq, score, reason
        if len(seq) >= max_len:
            return seq, score, LENGTH_CAP


def beam_search(step_fn, terminate, beam: int, max_len: int):
    """Length-unnormalized beam search.

    ``step_fn`` maps a list of prefixes (token tuples without ``<sos>``) to a
    (len(prefixes), V) array of next-token log-probabilities. Each
    hypothesis carries its own termination state through ``terminate``.
    Returns ``(tokens, log_prob, reason)``.
    """
    alive = [((), 0.0)]
    finished = []
    for _ in range(max_len):
        lp = np.asarray(step_fn([h for h, _ in alive]), dtype=np.float64)
        scores = np.array([s for _, s in alive])[:, None] + lp
        flat = scores.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:beam]
        vocab = lp.shape[1]
        new_alive = []
        for idx in order:
            total = flat[idx]
            if not np.isfinite(total):
                break
            prefix = alive[idx // vocab][0]
            seq = prefix + (int(idx % vocab),)
            reason = terminate(list(seq))
            if reason:
                finished.append((seq, float(total), reason))
            elif len(seq) >= max_len:
                finished.append((seq, float(total), LENGTH_CAP))
            else:
                new_alive.append((seq, float(total)))
        alive = new_alive
        if not alive:
            break
        best_done = max((f[1] for f in finished), default=-np.inf)
        if best_done >= max(s for _, s in alive):
            break
    best = max(finished, key=lambda f: f[1])
    return list(best[0]), best[1], best[2]


# --- model-driven decoding ----------------------------------------------------

def choose_conditioning(source: str, diar_out=None, oracle_activity=None):
    """Pick ``(attractors, activity)`` for the decoder.

    ``diar_out`` is ``(attractors (1, K, D), posterior (1, T', K))`` from the
    diarization branch; ``oracle_activity`` is (1, T', S) ground truth.
    """
    if source == "none":
        return None, None
    if diar_out is None:
        raise ValueError(f"conditioning source {source!r} needs diarization outputs")
    attractors, posterior = diar_out
    if source == "predicted":
        return attractors, posterior
    if source == "oracle":
        if oracle_activity is None:
            raise ValueError("oracle conditioning requested without labels")
        return attractors, np.asarray(oracle_activity, dtype=np.float64)
    raise ValueError(f"unknown conditioning source {source!r}")


def _tile(enc: EncoderOutput, n: int) -> EncoderOutput:
    return EncoderOutput(dm.Tensor(np.repeat(enc.frames.data, n, axis=0)),
                         np.repeat(enc.mask, n, axis=0), np.repeat(enc.lengths, n))


def make_step_fn(models, enc, attractors, activity, vocab: TokenVocab, ban: tuple, use_conditioning: bool,
                 trace=None):
    """Closure scoring a batch of equal-length prefixes with the decoder."""
    decoder = models.asr.decoder
    n_attr = attractors.shape[1] if attractors is not None else None
    n_act = activity.shape[2] if activity is not None else None

    def step(prefixes):
        k = len(prefixes)
        ids = np.array([(vocab.sos, *p) for p in prefixes], dtype=np.int64)
        spk = np.cumsum(ids == vocab.sc, axis=1)
        limit = min(x for x in (n_attr, n_act, spk.max() + 1) if x is not None)
        spk = np.minimum(spk, limit - 1)
        if trace is not None:
            trace.append((prefixes, spk[:, -1].copy()))
        attr = None if attractors is None else np.repeat(attractors, k, axis=0)
        act = None if activity is None else np.repeat(activity, k, axis=0)
        logits = decoder(_tile(enc, k), ids, spk, attr, act, conditioning=use_conditioning).data[:, -1]
        z = logits - logits.max(axis=-1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        lp[:, list(ban)] = -np.inf
        return lp

    return step


def run_diarization(models, features, enc, decode_cfg: DecodeConfig):
    """Emit ``max_attractors`` attractors and their posteriors for one mixture."""
    diar = models.diar
    k = diar.config.max_attractors
    _, attrs, post = diar.forward(features[None], [features.shape[0]], k, asr_enc=enc)
    return attrs.attractors.data, post.data, attrs.existence_probs.data[0]


def _replay(models, enc, attractors, activity, vocab: TokenVocab, tokens, conditioned: bool, record) -> None:
    """Run the finished hypothesis once more, teacher-forced, to record its attention maps."""
    ids = np.array([[vocab.sos, *tokens[:-1]]], dtype=np.int64)
    spk = np.cumsum(ids == vocab.sc, axis=1)
    limits = [x.shape[1] if i == 0 else x.shape[2] for i, x in ((0, attractors), (1, activity)) if x is not None]
    if limits:
        spk = np.minimum(spk, min(limits) - 1)
    models.asr.decoder(enc, ids, spk, attractors, activity, record=record, conditioning=conditioned)


def decode(models, features, config: DecodeConfig, vocab: TokenVocab, oracle_labels=None,
           forced_count: int | None = None, trace=None, record=None) -> DecodeResult:
    """Decode one mixture.

    Args:
        models: object with ``.asr`` and optional ``.diar``.
        features: (T, F) array.
        oracle_labels: (T, S) FIFO activity labels at the input frame rate;
            needed for oracle conditioning or oracle counts.
        forced_count: overrides the speaker count in speaker-count mode.
        trace: optional list receiving ``(prefixes, speaker_index)`` per step.
        record: optional list receiving the attention maps of the final
            hypothesis as ``(type, layer, head, map)``.
    """
    config.validate()
    features = np.asarray(features, dtype=np.float64)
    warnings = []
    with dm.no_grad():
        enc = models.asr.encode(features[None], record=record)
        diar_out, existence, posterior = None, None, None
        if models.diar is not None:
            attractors, posterior, existence = run_diarization(models, features, enc, config)
            diar_out = (attractors, posterior)
        oracle_act = None
        if oracle_labels is not None:
            oracle_act = downsample_labels(np.asarray(oracle_labels), models.asr.subsample)[None]

        dec_cfg = models.asr.decoder.config
        conditioned = (dec_cfg.use_speaker_emb or dec_cfg.use_activity_penalty) and config.conditioning != "none"
        attractors, activity = choose_conditioning(config.conditioning if conditioned else "none",
                                                   diar_out, oracle_act)

        ban = [vocab.sos]
        if config.termination == "speaker_count":
            ban.append(vocab.eos)
            if forced_count is not None:
                n_spk = forced_count
            elif config.count_source == "oracle":
                if oracle_labels is None:
                    raise ValueError("oracle speaker count requested without labels")
                n_spk = np.asarray(oracle_labels).shape[1]
            else:
                if existence is None:
                    raise ValueError("speaker-count termination needs the diarization branch or an oracle count")
                n_spk = count_speakers(existence, config.existence_threshold)
            if n_spk < 1:
                warnings.append(f"speaker count {n_spk} coerced to 1")
                n_spk = 1
            terminate = count_termination(vocab.sc, n_spk)
        else:
            terminate = eos_termination(vocab.eos)

        step = make_step_fn(models, enc, attractors, activity, vocab, tuple(ban), conditioned, trace)
        if config.beam == 1:
            tokens, score, reason = greedy_search(step, terminate, config.max_len)
        else:
            tokens, score, reason = beam_search(step, terminate, config.beam, config.max_len)
        if record is not None:
            _replay(models, enc, attractors, activity, vocab, tokens, conditioned, record)

    mode = config.label_mode
    if config.termination == "speaker_count":
        predicted = n_spk
    else:
        predicted = count_segments(tokens, vocab, mode)
    return DecodeResult(tokens, deserialize(tokens, vocab, mode), predicted, score, reason, warnings,
                        None if posterior is None else posterior[0], existence)


def decode_mixtures(models, mixtures, config: DecodeConfig, vocab: TokenVocab) -> list:
    needs_labels = config.conditioning == "oracle" or config.count_source == "oracle"
    results = []
    for m in mixtures:
        labels = activity_labels(m).matrix if needs_labels else None
        results.append(decode(models, m.features, config, vocab, oracle_labels=labels))
    return results


# --- hypothesis file ----------------------------------------------------------

def format_hypothesis(utt_id: str, result: DecodeResult) -> str:
    spk = "|".join(" ".join(str(t) for t in seg) for seg in result.transcripts)
    return f"{utt_id}\t{result.reason}\t{result.predicted_count}\t{spk}"


def write_hypotheses(path, ids, results) -> None:
    Path(path).write_text("".join(format_hypothesis(i, r) + "\n" for i, r in zip(ids, results)))


def read_hypotheses(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        utt, reason, count, spk = line.split("\t")
        segs = [[int(t) for t in s.split()] for s in spk.split("|")]
        out[utt] = {"reason": reason, "count": int(count), "transcripts": segs}
    return out
