"""Attractor-based diarization branch.

Frame embeddings come either from an independent encoder or from a linear
projection of the ASR encoder output. An LSTM encoder summarizes the frames,
an LSTM decoder fed zero vectors then emits one attractor per step, and
frame activity is ``sigmoid(e_t . a_s)``. Columns follow FIFO speaker order,
so the loss compares against labels directly with no permutation search.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .asr_model import Encoder, EncoderConfig, EncoderOutput
from .diffmath import ParameterSet, Tensor


@dataclass
class DiarConfig:
    shared_encoder: bool = False
    layers: int = 1
    heads: int = 2
    hidden: int = 32
    ffn: int = 128
    conv_kernel: int = 7
    existence_threshold: float = 0.5
    max_attractors: int = 4
    shuffle_frames: bool = False

    def validate(self) -> None:
        if not 0 < self.existence_threshold < 1:
            raise ValueError("existence threshold must lie in (0, 1)")
        if self.max_attractors < 1:
            raise ValueError("max_attractors must be >= 1")
        if not self.shared_encoder and self.hidden % self.heads:
            raise ValueError(f"diar hidden {self.hidden} not divisible by heads {self.heads}")


@dataclass
class AttractorSet:
    attractors: Tensor  # (B, K, D)
    existence_logits: Tensor  # (B, K)
    existence_probs: Tensor  # (B, K)

    @property
    def count(self) -> int:
        return self.attractors.shape[1]


class DiarModel:
    def __init__(self, config: DiarConfig, input_dim: int, asr_hidden: int, subsample: int,
                 seed: int = 1, prefix: str = "diar"):
        config.validate()
        self.config = config
        self.params = ParameterSet(seed)
        d = config.hidden
        if config.shared_encoder:
            self.encoder = None
            self.w_proj = self.params.create(f"{prefix}.proj.w", (asr_hidden, d))
            self.b_proj = self.params.create(f"{prefix}.proj.b", (d,), "zeros")
        else:
            enc_cfg = EncoderConfig(input_dim=input_dim, layers=config.layers, heads=config.heads,
                                    hidden=d, ffn=config.ffn, conv_kernel=config.conv_kernel,
                                    subsample=subsample)
            self.encoder = Encoder(enc_cfg, self.params, f"{prefix}.enc")
        self.lstm_enc_w = self.params.create(f"{prefix}.eda.enc.w", (2 * d, 4 * d))
        self.lstm_enc_b = self.params.create(f"{prefix}.eda.enc.b", (4 * d,), "zeros")
        self.lstm_dec_w = self.params.create(f"{prefix}.eda.dec.w", (2 * d, 4 * d))
        self.lstm_dec_b = self.params.create(f"{prefix}.eda.dec.b", (4 * d,), "zeros")
        self.w_exist = self.params.create(f"{prefix}.eda.exist.w", (d, 1))
        self.b_exist = self.params.create(f"{prefix}.eda.exist.b", (1,), "zeros")

    @property
    def hidden(self) -> int:
        return self.config.hidden

    def diar_encode(self, features, lengths=None, asr_enc: EncoderOutput | None = None) -> EncoderOutput:
        if self.config.shared_encoder:
            if asr_enc is None:
                raise ValueError("shared-encoder diarization needs the ASR encoder output")
            frames = dm.linear(asr_enc.frames, self.w_proj, self.b_proj)
            return EncoderOutput(frames, asr_enc.mask, asr_enc.lengths)
        return self.encoder(features, lengths)

    def eda_attractors(self, emb: EncoderOutput, num: int, shuffle_seed=None) -> AttractorSet:
        """Run the LSTM encoder over valid frames, then decode ``num`` attractors."""
        if num < 1:
            raise ValueError("need at least one attractor")
        frames = emb.frames
        b, t, d = frames.shape
        mask = emb.mask
        if shuffle_seed is not None:
            order = np.tile(np.arange(t), (b, 1))
            rng = np.random.default_rng(shuffle_seed)
            for i, n in enumerate(emb.lengths):
                order[i, :n] = rng.permutation(n)
            sel = np.zeros((b, t, t))
            np.put_along_axis(sel, order[..., None], 1.0, axis=-1)
            frames = dm.matmul(sel, frames)
        h = dm.Tensor(np.zeros((b, d)))
        c = dm.Tensor(np.zeros((b, d)))
        cols = [(slice(None), i, slice(None)) for i in range(t)]
        for i in range(t):
            h_new, c_new = dm.lstm_step(dm.slice_(frames, cols[i]), h, c, self.lstm_enc_w, self.lstm_enc_b)
            m = mask[:, i:i + 1]
            if m.min() > 0:
                h, c = h_new, c_new
            else:
                h, c = dm.blend(m, h_new, h), dm.blend(m, c_new, c)
        zeros = np.zeros((b, d))
        outs = []
        for _ in range(num):
            h, c = dm.lstm_step(zeros, h, c, self.lstm_dec_w, self.lstm_dec_b)
            outs.append(dm.reshape(h, (b, 1, d)))
        attractors = outs[0] if num == 1 else dm.concat(outs, axis=1)
        logits = dm.reshape(dm.linear(attractors, self.w_exist, self.b_exist), (b, num))
        return AttractorSet(attractors, logits, dm.sigmoid(logits))

    def forward(self, features, lengths, num: int, asr_enc=None, shuffle_seed=None):
        emb = self.diar_encode(features, lengths, asr_enc)
        attrs = self.eda_attractors(emb, num, shuffle_seed)
        return emb, attrs, activity_posterior(emb.frames, attrs.attractors)


def activity_posterior(frame_embs, attractors) -> Tensor:
    """``p[b, t, s] = sigmoid(e_{b,t} . a_{b,s})``."""
    frame_embs, attractors = dm.as_tensor(frame_embs), dm.as_tensor(attractors)
    if frame_embs.shape[-1] != attractors.shape[-1]:
        raise ValueError(f"embedding dim {frame_embs.shape[-1]} != attractor dim {attractors.shape[-1]}")
    return dm.sigmoid(dm.matmul(frame_embs, dm.swap_last(attractors)))


def diar_loss_weights(frame_mask: np.ndarray, num_speakers) -> tuple:
    """Per-element weights giving a per-mixture mean, averaged over the batch.

    Returns ``(activity_weights (B, T', K), existence_weights (B, K))`` for
    ``K = max(num_speakers) + 1`` attractors.
    """
    num_speakers = np.asarray(num_speakers)
    b, t = frame_mask.shape
    k = int(num_speakers.max()) + 1
    spk = (np.arange(k)[None, :] < num_speakers[:, None]).astype(np.float64)
    act = frame_mask[:, :, None] * spk[:, None, :]
    act /= act.sum(axis=(1, 2), keepdims=True) * b
    ex = (np.arange(k)[None, :] <= num_speakers[:, None]).astype(np.float64)
    ex /= ex.sum(axis=1, keepdims=True) * b
    return act, ex


def existence_targets(num_speakers, k: int) -> np.ndarray:
    num_speakers = np.asarray(num_speakers)
    return (np.arange(k)[None, :] < num_speakers[:, None]).astype(np.float64)


def loss_diar(posterior, labels, existence_probs, num_speakers, frame_mask=None) -> tuple:
    """Activity BCE (FIFO columns, no permutation) plus existence BCE.

    Args:
        posterior: (B, T', K) Tensor with K >= max speakers + 1.
        labels: (B, T', K) 0/1 array in FIFO column order (columns past a
            mixture's speaker count are ignored).
        existence_probs: (B, K) Tensor.
        num_speakers: (B,) true counts.

    Returns ``(total, activity_bce, existence_bce)`` Tensors.
    """
    posterior = dm.as_tensor(posterior)
    labels = np.asarray(labels, dtype=np.float64)
    if posterior.ndim == 2:
        posterior = dm.reshape(posterior, (1, *posterior.shape))
        labels = labels[None]
        existence_probs = dm.reshape(dm.as_tensor(existence_probs), (1, -1))
        num_speakers = [num_speakers]
    num_speakers = np.asarray(num_speakers)
    if labels.shape != posterior.shape:
        raise ValueError(f"label shape {labels.shape} != posterior shape {posterior.shape}")
    b, t, k = posterior.shape
    if k < num_speakers.max() + 1:
        raise ValueError("need one more attractor than the true speaker count")
    if frame_mask is None:
        frame_mask = np.ones((b, t))
    act_w, ex_w = diar_loss_weights(frame_mask, num_speakers)
    act_w = np.pad(act_w, ((0, 0), (0, 0), (0, k - act_w.shape[2])))
    ex_w = np.pad(ex_w, ((0, 0), (0, k - ex_w.shape[1])))
    act = dm.binary_cross_entropy(posterior, labels, act_w)
    ex = dm.binary_cross_entropy(existence_probs, existence_targets(num_speakers, k), ex_w)
    return dm.add(act, ex), act, ex


def count_speakers(existence_probs, threshold: float = 0.5) -> int:
    """Number of leading attractors whose existence probability is >= threshold."""
    n = 0
    for q in np.asarray(existence_probs).reshape(-1):
        if q < threshold:
            break
        n += 1
    return n


def median_filter(seq, window: int = 11) -> np.ndarray:
    """Centered majority vote over a binary track, edges replicated."""
    if window % 2 == 0:
        raise ValueError("median window must be odd")
    seq = np.asarray(seq)
    if seq.size == 0:
        return seq.copy()
    half = window // 2
    # explicit edge padding: scipy's "nearest" mode wraps oddly once window > len
    padded = np.pad(seq.astype(np.float64), half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, window)
    return np.median(windows, axis=-1).astype(seq.dtype)


def write_diar_output(path, posterior: np.ndarray, existence: np.ndarray) -> None:
    lines = ["# existence," + ",".join(f"{q:.17g}" for q in existence)]
    lines.extend(",".join(f"{v:.17g}" for v in row) for row in posterior)
    Path(path).write_text("\n".join(lines) + "\n")


def read_diar_output(path) -> tuple:
    lines = Path(path).read_text().splitlines()
    existence = np.array([float(v) for v in lines[0].split(",")[1:]])
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()]
    posterior = np.array(rows) if rows else np.zeros((0, len(existence)))
    return posterior, existence
