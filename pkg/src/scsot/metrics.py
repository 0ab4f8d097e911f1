"""WER, speaker counting accuracy and frame-level DER."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .diar_model import median_filter

WER_CONVENTION = "wer_assignment=min_permutation_with_empty_padding"
DER_CONVENTION = "der_mapping=fifo_columns; collar=0.0; median_window=11"


@dataclass
class DERComponents:
    miss: float
    false_alarm: float
    confusion: float
    reference_frames: int

    @property
    def der(self) -> float:
        return self.miss + self.false_alarm + self.confusion


@dataclass
class ScoreReport:
    wer: float
    sca: float
    der: float | None = None
    der_components: DERComponents | None = None
    per_utterance: list = field(default_factory=list)


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit costs (row-by-row DP)."""
    ref, hyp = list(ref), list(hyp)
    prev = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        sub = prev[:-1] + np.array([r != h for h in hyp], dtype=np.int64)
        for j in range(1, len(hyp) + 1):
            cur[j] = min(sub[j - 1], prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return int(prev[-1])


def multi_talker_errors(refs, hyps) -> tuple:
    """Minimum total edits over speaker assignments, padding the shorter side with empties.

    Returns ``(errors, reference_token_count)``.
    """
    refs, hyps = [list(r) for r in refs], [list(h) for h in hyps]
    n = max(len(refs), len(hyps))
    refs += [[]] * (n - len(refs))
    hyps += [[]] * (n - len(hyps))
    cost = np.array([[edit_distance(r, h) for h in hyps] for r in refs])
    rows, cols = linear_sum_assignment(cost)
    return int(cost[rows, cols].sum()), sum(len(r) for r in refs)


def wer(references, hypotheses) -> float:
    """Corpus WER; each argument is a list of per-mixture speaker transcript lists.

    A single mixture (list of token lists) is also accepted.
    """
    if references and references[0] and not isinstance(references[0][0], (list, tuple)):
        references, hypotheses = [references], [hypotheses]
    errors = total = 0
    for refs, hyps in zip(references, hypotheses, strict=True):
        e, n = multi_talker_errors(refs, hyps)
        errors += e
        total += n
    if total == 0:
        raise ValueError("reference contains no tokens")
    return errors / total


def sca(true_counts, predicted_counts) -> float:
    true_counts, predicted_counts = list(true_counts), list(predicted_counts)
    if len(true_counts) != len(predicted_counts):
        raise ValueError("count lists differ in length")
    if not true_counts:
        raise ValueError("no utterances to score")
    return sum(int(a == b) for a, b in zip(true_counts, predicted_counts)) / len(true_counts)


def _pad_columns(mat: np.ndarray, n: int) -> np.ndarray:
    return np.pad(mat, ((0, 0), (0, n - mat.shape[1])))


def der_frames(reference: np.ndarray, hypothesis: np.ndarray) -> DERComponents:
    """Frame-count DER between two binary (T, S) grids with fixed column mapping."""
    reference = np.asarray(reference, dtype=np.int64)
    hypothesis = np.asarray(hypothesis, dtype=np.int64)
    if reference.shape[0] != hypothesis.shape[0]:
        raise ValueError(f"frame count mismatch: {reference.shape[0]} vs {hypothesis.shape[0]}")
    n = max(reference.shape[1], hypothesis.shape[1])
    ref, hyp = _pad_columns(reference, n), _pad_columns(hypothesis, n)
    n_ref, n_hyp = ref.sum(axis=1), hyp.sum(axis=1)
    n_correct = (ref & hyp).sum(axis=1)
    total = int(n_ref.sum())
    if total == 0:
        raise ValueError("reference has no speech frames")
    miss = np.maximum(n_ref - n_hyp, 0).sum()
    fa = np.maximum(n_hyp - n_ref, 0).sum()
    conf = (np.minimum(n_ref, n_hyp) - n_correct).sum()
    return DERComponents(miss / total, fa / total, conf / total, total)


def binarize_posterior(posterior, threshold: float = 0.5, median_window: int = 11) -> np.ndarray:
    hyp = (np.asarray(posterior) >= threshold).astype(np.int64)
    if median_window > 1:
        hyp = np.stack([median_filter(hyp[:, s], median_window) for s in range(hyp.shape[1])], axis=1) \
            if hyp.shape[1] else hyp
    return hyp


def der(reference, posterior, threshold: float = 0.5, collar: float = 0.0, median_window: int = 11) -> DERComponents:
    """Binarize, median-filter each track, then count frame errors.

    ``reference`` is (T, S) binary and ``posterior`` (T, K) in [0, 1], both
    in FIFO column order. Only ``collar == 0`` is supported.
    """
    if collar != 0.0:
        raise ValueError("only a zero collar is supported")
    return der_frames(reference, binarize_posterior(posterior, threshold, median_window))


def corpus_der(references, posteriors, **kwargs) -> DERComponents:
    """Pool frame counts over mixtures."""
    miss = fa = conf = 0.0
    total = 0
    for ref, post in zip(references, posteriors, strict=True):
        c = der(ref, post, **kwargs)
        miss += c.miss * c.reference_frames
        fa += c.false_alarm * c.reference_frames
        conf += c.confusion * c.reference_frames
        total += c.reference_frames
    return DERComponents(miss / total, fa / total, conf / total, total)


def write_score_report(path, rows) -> None:
    """``rows``: iterable of (metric, split, value, components-string)."""
    lines = [f"# {WER_CONVENTION}; {DER_CONVENTION}", "metric,split,value,components"]
    lines.extend(f"{m},{s},{v:.6f},{c}" for m, s, v, c in rows)
    Path(path).write_text("\n".join(lines) + "\n")
