"""Conformer-lite encoder and speaker-conditioned transformer decoder.

Both stacks are pre-norm. An encoder block is self-attention, depthwise
convolution and a feed-forward network, each on a residual branch. A decoder
block is causal self-attention, source-target attention and a feed-forward
network. Two optional speaker conditionings act on the decoder:

* the first block's FFN input is shifted by ``W_spk @ a_s`` where ``a_s`` is
  the attractor of the speaker currently being transcribed;
* source-target logits at frames where that speaker is inactive
  (posterior below ``threshold``) are lowered by ``penalty``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import ParameterSet, Tensor

MASK_VALUE = -1e9


@dataclass
class EncoderConfig:
    input_dim: int = 16
    layers: int = 2
    heads: int = 2
    hidden: int = 64
    ffn: int = 256
    conv_kernel: int = 7
    subsample: int = 2

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ValueError("hidden dim must be divisible by heads")
        if self.subsample < 1:
            raise ValueError("subsample factor must be >= 1")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv kernel must be odd")


@dataclass
class DecoderConfig:
    vocab_size: int = 19
    layers: int = 2
    heads: int = 2
    hidden: int = 64
    ffn: int = 256
    attractor_dim: int = 64
    use_speaker_emb: bool = False
    use_activity_penalty: bool = False
    penalty: float = 50.0
    threshold: float = 0.5
    # "all" or "first"
    penalty_layers: str = "all"

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ValueError("hidden dim must be divisible by heads")
        if self.penalty < 0:
            raise ValueError("penalty strength must be >= 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.penalty_layers not in ("all", "first"):
            raise ValueError("penalty_layers must be 'all' or 'first'")


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim - dim // 2])
    return pe


def subsampled_length(n_frames: int, factor: int) -> int:
    return -(-n_frames // factor)


# --- attention ----------------------------------------------------------------

def attention_penalty(activity, penalty: float, threshold: float) -> np.ndarray:
    """Per-frame logit offset: ``penalty`` where the posterior is below ``threshold``."""
    p = np.asarray(activity, dtype=np.float64)
    return penalty * (p < threshold).astype(np.float64)


def penalized_source_target_attention(q, k, v, activity_column=None, penalty: float = 50.0,
                                      threshold: float = 0.5, enabled: bool = True):
    """Single-head source-target attention with the inactivity penalty.

    Args:
        q: (N, d) queries; k, v: (T, d) encoder keys and values.
        activity_column: (T,) posterior of the target speaker per frame.

    Returns:
        ``(context, weights, logits)``; ``logits`` are the penalized scaled
        scores ``q k^T / sqrt(d) - c_t``.
    """
    q, k, v = dm.as_tensor(q), dm.as_tensor(k), dm.as_tensor(v)
    d = q.shape[-1]
    logits = dm.scale(dm.matmul(q, dm.swap_last(k)), 1.0 / math.sqrt(d))
    if enabled:
        if activity_column is None or len(activity_column) != k.shape[-2]:
            raise ValueError("activity column length must equal the number of encoder frames")
        logits = dm.sub(logits, attention_penalty(activity_column, penalty, threshold)[None, :])
    weights = dm.softmax(logits, axis=-1)
    return dm.matmul(weights, v), weights, logits


class MultiHeadAttention:
    def __init__(self, params: ParameterSet, prefix: str, dim: int, heads: int):
        self.heads = heads
        self.dim = dim
        self.wq = params.create(f"{prefix}.wq", (dim, dim))
        self.bq = params.create(f"{prefix}.bq", (dim,), "zeros")
        self.wk = params.create(f"{prefix}.wk", (dim, dim))
        self.bk = params.create(f"{prefix}.bk", (dim,), "zeros")
        self.wv = params.create(f"{prefix}.wv", (dim, dim))
        self.bv = params.create(f"{prefix}.bv", (dim,), "zeros")
        self.wo = params.create(f"{prefix}.wo", (dim, dim))
        self.bo = params.create(f"{prefix}.bo", (dim,), "zeros")

    def __call__(self, x: Tensor, memory: Tensor, bias: np.ndarray, record=None, tag=None) -> Tensor:
        """``bias`` is an additive constant broadcastable to (B, Nq, Nk)."""
        q = dm.linear(x, self.wq, self.bq)
        k = dm.linear(memory, self.wk, self.bk)
        v = dm.linear(memory, self.wv, self.bv)
        d = self.dim // self.heads
        head_out = []
        for h in range(self.heads):
            cols = (slice(None), slice(None), slice(h * d, (h + 1) * d))
            logits = dm.scale(dm.matmul(dm.slice_(q, cols), dm.swap_last(dm.slice_(k, cols))), 1.0 / math.sqrt(d))
            weights = dm.softmax(dm.add(logits, bias), axis=-1)
            if record is not None:
                record.append((*tag, h, weights.data.copy()))
            head_out.append(dm.matmul(weights, dm.slice_(v, cols)))
        merged = head_out[0] if self.heads == 1 else dm.concat(head_out, axis=-1)
        return dm.linear(merged, self.wo, self.bo)


class FeedForward:
    def __init__(self, params: ParameterSet, prefix: str, dim: int, hidden: int):
        self.w1 = params.create(f"{prefix}.w1", (dim, hidden))
        self.b1 = params.create(f"{prefix}.b1", (hidden,), "zeros")
        self.w2 = params.create(f"{prefix}.w2", (hidden, dim))
        self.b2 = params.create(f"{prefix}.b2", (dim,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return dm.linear(dm.gelu(dm.linear(x, self.w1, self.b1)), self.w2, self.b2)


class LayerNorm:
    def __init__(self, params: ParameterSet, prefix: str, dim: int):
        self.gamma = params.create(f"{prefix}.gamma", (dim,), "ones")
        self.beta = params.create(f"{prefix}.beta", (dim,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return dm.layer_norm(x, self.gamma, self.beta)


def conditioned_ffn(ffn: FeedForward, z, attractor, layer_index: int, use_speaker_emb: bool, w_spk) -> Tensor:
    """``FFN(z + W_spk a)`` in the first decoder layer (``layer_index == 1``), else ``FFN(z)``."""
    if use_speaker_emb and layer_index == 1:
        attractor, w_spk = dm.as_tensor(attractor), dm.as_tensor(w_spk)
        if attractor.shape[-1] != w_spk.shape[0]:
            raise ValueError(f"attractor dim {attractor.shape[-1]} != W_spk input dim {w_spk.shape[0]}")
        z = dm.add(z, dm.linear(attractor, w_spk))
    return ffn(z)


# --- encoder ------------------------------------------------------------------

@dataclass
class EncoderOutput:
    frames: Tensor  # (B, T', D)
    mask: np.ndarray  # (B, T') 1 for valid frames
    lengths: np.ndarray  # (B,)


class Encoder:
    def __init__(self, config: EncoderConfig, params: ParameterSet, prefix: str = "enc"):
        config.validate()
        self.config = config
        c = config
        self.w_in = params.create(f"{prefix}.in.w", (c.input_dim * c.subsample, c.hidden))
        self.b_in = params.create(f"{prefix}.in.b", (c.hidden,), "zeros")
        self.blocks = []
        for i in range(c.layers):
            p = f"{prefix}.{i}"
            self.blocks.append({
                "ln_att": LayerNorm(params, f"{p}.ln_att", c.hidden),
                "att": MultiHeadAttention(params, f"{p}.att", c.hidden, c.heads),
                "ln_conv": LayerNorm(params, f"{p}.ln_conv", c.hidden),
                "conv_w": params.create(f"{p}.conv.w", (c.conv_kernel, c.hidden)),
                "conv_b": params.create(f"{p}.conv.b", (c.hidden,), "zeros"),
                "pw_w": params.create(f"{p}.conv.pw_w", (c.hidden, c.hidden)),
                "pw_b": params.create(f"{p}.conv.pw_b", (c.hidden,), "zeros"),
                "ln_ffn": LayerNorm(params, f"{p}.ln_ffn", c.hidden),
                "ffn": FeedForward(params, f"{p}.ffn", c.hidden, c.ffn),
            })
        self.ln_out = LayerNorm(params, f"{prefix}.ln_out", c.hidden)

    def __call__(self, features, lengths=None, record=None) -> EncoderOutput:
        """Encode a padded batch of shape (B, T, F) (or a single (T, F) matrix)."""
        r = self.config.subsample
        feats = dm.as_tensor(features)
        if feats.ndim == 2:
            feats = dm.reshape(feats, (1, *feats.shape))
        b, t, f = feats.shape
        if lengths is None:
            lengths = np.full(b, t)
        lengths = np.asarray(lengths)
        if lengths.min() < r:
            raise ValueError(f"input of {lengths.min()} frames is shorter than subsample factor {r}")
        t_out = subsampled_length(t, r)
        if lengths.min() < t:
            # frames past each length must not leak into the last stacked frame
            in_mask = (np.arange(t)[None, :] < lengths[:, None]).astype(np.float64)
            feats = dm.mul(feats, in_mask[:, :, None])
        if t_out * r != t:
            pad = np.zeros((b, t_out * r - t, f))
            feats = dm.concat([feats, pad], axis=1)
        x = dm.reshape(feats, (b, t_out, r * f))
        out_len = -(-lengths // r)
        mask = (np.arange(t_out)[None, :] < out_len[:, None]).astype(np.float64)
        key_bias = np.where(mask[:, None, :] > 0, 0.0, MASK_VALUE)
        h = dm.add(dm.linear(x, self.w_in, self.b_in), sinusoidal_positions(t_out, self.config.hidden))
        m3 = mask[:, :, None]
        for i, blk in enumerate(self.blocks):
            a = blk["ln_att"](h)
            h = dm.add(h, blk["att"](a, a, key_bias, record, ("enc_self", i)))
            a = dm.mul(blk["ln_conv"](h), m3)
            a = dm.gelu(dm.depthwise_conv1d(a, blk["conv_w"], blk["conv_b"]))
            h = dm.add(h, dm.linear(a, blk["pw_w"], blk["pw_b"]))
            h = dm.add(h, blk["ffn"](blk["ln_ffn"](h)))
        return EncoderOutput(self.ln_out(h), mask, out_len)


# --- decoder ------------------------------------------------------------------

def speaker_selection(speaker_index: np.ndarray, num_attractors: int) -> np.ndarray:
    """One-hot (B, N, K) matrix picking attractor ``speaker_index[b, n]``."""
    sel = np.zeros((*speaker_index.shape, num_attractors))
    np.put_along_axis(sel, speaker_index[..., None], 1.0, axis=-1)
    return sel


def token_penalty(activity: np.ndarray, speaker_index: np.ndarray, penalty: float, threshold: float) -> np.ndarray:
    """(B, N, T') penalty: row n uses the activity column of token n's speaker."""
    # activity (B, T', S) -> (B, S, T') then gather rows by speaker index
    cols = np.take_along_axis(np.swapaxes(activity, 1, 2), speaker_index[..., None], axis=1)
    return attention_penalty(cols, penalty, threshold)


class Decoder:
    def __init__(self, config: DecoderConfig, params: ParameterSet, prefix: str = "dec"):
        config.validate()
        self.config = config
        c = config
        self.embed = params.create(f"{prefix}.embed", (c.vocab_size, c.hidden))
        self.blocks = []
        for i in range(c.layers):
            p = f"{prefix}.{i}"
            self.blocks.append({
                "ln_self": LayerNorm(params, f"{p}.ln_self", c.hidden),
                "self": MultiHeadAttention(params, f"{p}.self", c.hidden, c.heads),
                "ln_src": LayerNorm(params, f"{p}.ln_src", c.hidden),
                "src": MultiHeadAttention(params, f"{p}.src", c.hidden, c.heads),
                "ln_ffn": LayerNorm(params, f"{p}.ln_ffn", c.hidden),
                "ffn": FeedForward(params, f"{p}.ffn", c.hidden, c.ffn),
            })
        # created even when unused so checkpoints share one layout across configs
        self.w_spk = params.create(f"{prefix}.w_spk", (c.attractor_dim, c.hidden))
        self.ln_out = LayerNorm(params, f"{prefix}.ln_out", c.hidden)
        self.w_out = params.create(f"{prefix}.out.w", (c.hidden, c.vocab_size))
        self.b_out = params.create(f"{prefix}.out.b", (c.vocab_size,), "zeros")

    def __call__(self, enc: EncoderOutput, inputs: np.ndarray, speaker_index: np.ndarray,
                 attractors=None, activity=None, token_mask=None, record=None,
                 conditioning: bool = True) -> Tensor:
        """Logits (B, N, V) for decoder input ids (B, N).

        ``speaker_index[b, n]`` selects the attractor and activity column used
        at position n. ``attractors`` is (B, K, Da); ``activity`` is (B, T', S).
        ``conditioning=False`` runs the plain decoder regardless of config.
        """
        c = self.config
        use_emb = c.use_speaker_emb and conditioning
        use_penalty = c.use_activity_penalty and conditioning
        inputs = np.asarray(inputs)
        speaker_index = np.asarray(speaker_index)
        b, n = inputs.shape
        if token_mask is None:
            token_mask = np.ones((b, n))
        causal = np.triu(np.full((n, n), MASK_VALUE), k=1)
        self_bias = causal[None] + np.where(token_mask[:, None, :] > 0, 0.0, MASK_VALUE)
        src_bias = np.where(enc.mask[:, None, :] > 0, 0.0, MASK_VALUE)
        valid_index = speaker_index[token_mask > 0]

        penalty = None
        if use_penalty:
            if activity is None:
                raise ValueError("activity penalty enabled but no activity given")
            activity = np.asarray(activity, dtype=np.float64)
            if activity.shape[1] != enc.frames.shape[1]:
                raise ValueError(f"activity has {activity.shape[1]} frames, encoder {enc.frames.shape[1]}")
            if valid_index.size and valid_index.max() >= activity.shape[2]:
                raise ValueError("speaker index exceeds available activity columns")
            idx = np.minimum(speaker_index, activity.shape[2] - 1)
            penalty = token_penalty(activity, idx, c.penalty, c.threshold)

        if use_emb:
            if attractors is None:
                raise ValueError("speaker conditioning enabled but no attractors given")
            attractors = dm.as_tensor(attractors)
            k = attractors.shape[1]
            if valid_index.size and valid_index.max() >= k:
                raise ValueError("speaker index exceeds available attractors")
            sel = speaker_selection(np.minimum(speaker_index, k - 1), k)
            spk_attr = dm.matmul(sel, attractors)

        x = dm.add(dm.embedding_lookup(self.embed, inputs), sinusoidal_positions(n, c.hidden))
        for i, blk in enumerate(self.blocks):
            a = blk["ln_self"](x)
            x = dm.add(x, blk["self"](a, a, self_bias, record, ("dec_self", i)))
            bias = src_bias
            if penalty is not None and (c.penalty_layers == "all" or i == 0):
                bias = src_bias - penalty
            x = dm.add(x, blk["src"](blk["ln_src"](x), enc.frames, bias, record, ("src_tgt", i)))
            z = blk["ln_ffn"](x)
            if use_emb:
                x = dm.add(x, conditioned_ffn(blk["ffn"], z, spk_attr, i + 1, True, self.w_spk))
            else:
                x = dm.add(x, blk["ffn"](z))
        return dm.linear(self.ln_out(x), self.w_out, self.b_out)


class ASRModel:
    """Encoder plus decoder sharing one parameter registry."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int = 0, prefix: str = "asr"):
        self.params = ParameterSet(seed)
        self.encoder = Encoder(enc_cfg, self.params, f"{prefix}.enc")
        self.decoder = Decoder(dec_cfg, self.params, f"{prefix}.dec")

    @property
    def subsample(self) -> int:
        return self.encoder.config.subsample

    def encode(self, features, lengths=None, record=None) -> EncoderOutput:
        return self.encoder(features, lengths, record)

    def forward_teacher_forced(self, enc: EncoderOutput, dec_in, dec_out, speaker_index, token_mask,
                               attractors=None, activity=None, record=None):
        """Returns ``(logits, L_asr)``; L_asr is the mean CE over unmasked positions."""
        logits = self.decoder(enc, dec_in, speaker_index, attractors, activity, token_mask, record)
        weights = token_mask / token_mask.sum()
        return logits, dm.cross_entropy_logits(logits, dec_out, weights)


# --- attention dump -----------------------------------------------------------

def write_attention_dump(path, maps) -> None:
    """One text block per (type, layer, head): a header line, then CSV rows."""
    lines = []
    for kind, layer, head, mat in maps:
        mat = np.asarray(mat)
        if mat.ndim == 3:
            if mat.shape[0] != 1:
                raise ValueError("attention dumps are written one utterance at a time")
            mat = mat[0]
        lines.append(f"# layer={layer} head={head} type={kind} rows={mat.shape[0]} cols={mat.shape[1]}")
        lines.extend(",".join(f"{v:.17g}" for v in row) for row in mat)
    Path(path).write_text("\n".join(lines) + "\n")


def read_attention_dump(path) -> list:
    out, header, rows = [], None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            if header is not None:
                out.append((*header, np.array(rows)))
            fields = dict(kv.split("=") for kv in line[1:].split())
            header, rows = (fields["type"], int(fields["layer"]), int(fields["head"])), []
        elif line.strip():
            rows.append([float(v) for v in line.split(",")])
    if header is not None:
        out.append((*header, np.array(rows)))
    return out
