"""Joint ASR + diarization training with Adam and warmup."""

from __future__ import annotations

import contextlib
import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .asr_model import ASRModel, DecoderConfig, EncoderConfig, subsampled_length
from .diar_model import DiarConfig, DiarModel, loss_diar
from .mixture_sim import activity_labels, downsample_labels
from .serialization import EOS_TERMINAL, MODES, TokenVocab, serialize_fifo


@dataclass
class TrainConfig:
    alpha: float = 0.1
    lr: float = 1e-3
    warmup: int = 200
    epochs: int = 10
    max_steps: int = 0  # 0: run `epochs` full passes
    batch_frames: int = 20000
    seed: int = 0
    mtl: bool = False
    label_mode: str = EOS_TERMINAL
    train_activity: str = "oracle"  # oracle | predicted
    train_attractors: str = "predicted"  # predicted | label_pooled
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.label_mode not in MODES:
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if self.train_activity not in ("oracle", "predicted"):
            raise ValueError(f"unknown training activity source {self.train_activity!r}")
        if self.train_attractors not in ("predicted", "label_pooled"):
            raise ValueError(f"unknown training attractor source {self.train_attractors!r}")


@dataclass
class ModelPair:
    asr: ASRModel
    diar: DiarModel | None

    def parameters(self) -> list:
        out = list(self.asr.params)
        if self.diar is not None:
            out += list(self.diar.params)
        return out

    def state_dict(self) -> dict:
        out = self.asr.params.state_dict()
        if self.diar is not None:
            out.update(self.diar.params.state_dict())
        return out

    def load_state_dict(self, state: dict) -> None:
        self.asr.params.load_state_dict({k: v for k, v in state.items() if k.startswith("asr.")})
        if self.diar is not None:
            self.diar.params.load_state_dict({k: v for k, v in state.items() if k.startswith("diar.")})


def build_models(enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, diar_cfg: DiarConfig | None,
                 seed: int = 0) -> ModelPair:
    asr = ASRModel(enc_cfg, dec_cfg, seed=seed)
    diar = None
    if diar_cfg is not None:
        diar = DiarModel(diar_cfg, enc_cfg.input_dim, enc_cfg.hidden, enc_cfg.subsample, seed=seed + 7919)
    return ModelPair(asr, diar)


# --- batches ------------------------------------------------------------------

@dataclass
class Batch:
    ids: list
    features: np.ndarray  # (B, T, F)
    lengths: np.ndarray
    dec_in: np.ndarray  # (B, N)
    dec_out: np.ndarray
    speaker_index: np.ndarray
    token_mask: np.ndarray
    labels: np.ndarray  # (B, T', K) downsampled FIFO labels, K = max S + 1
    frame_mask: np.ndarray  # (B, T')
    num_speakers: np.ndarray

    @property
    def size(self) -> int:
        return len(self.ids)


def collate(mixtures, vocab: TokenVocab, mode: str, subsample: int) -> Batch:
    b = len(mixtures)
    t_max = max(m.num_frames for m in mixtures)
    f = mixtures[0].features.shape[1]
    feats = np.zeros((b, t_max, f))
    lengths = np.array([m.num_frames for m in mixtures])
    targets = [serialize_fifo(m.transcripts, m.start_frames, vocab, mode) for m in mixtures]
    n_max = max(len(t) for t in targets)
    dec_in = np.full((b, n_max), vocab.eos, dtype=np.int64)
    dec_out = np.full((b, n_max), vocab.eos, dtype=np.int64)
    spk = np.zeros((b, n_max), dtype=np.int64)
    tmask = np.zeros((b, n_max))
    n_spk = np.array([m.num_speakers for m in mixtures])
    t_sub = subsampled_length(t_max, subsample)
    k = int(n_spk.max()) + 1
    labels = np.zeros((b, t_sub, k))
    fmask = np.zeros((b, t_sub))
    for i, (m, tgt) in enumerate(zip(mixtures, targets)):
        feats[i, :m.num_frames] = m.features
        n = len(tgt)
        dec_in[i, 0] = vocab.sos
        dec_in[i, 1:n] = tgt.tokens[:-1]
        dec_out[i, :n] = tgt.tokens
        spk[i, :n] = tgt.speaker_index_per_token
        spk[i, n:] = tgt.speaker_index_per_token[-1]
        tmask[i, :n] = 1.0
        lab = downsample_labels(activity_labels(m).matrix, subsample)
        labels[i, :lab.shape[0], :lab.shape[1]] = lab
        fmask[i, :lab.shape[0]] = 1.0
    return Batch([m.mixture_id for m in mixtures], feats, lengths, dec_in, dec_out, spk, tmask,
                 labels, fmask, n_spk)


def frame_budget_batches(mixtures, budget: int, rng) -> list:
    """Shuffle, then pack consecutive mixtures until the frame total would exceed ``budget``."""
    order = rng.permutation(len(mixtures))
    batches, cur, frames = [], [], 0
    for i in order:
        n = mixtures[i].num_frames
        if cur and frames + n > budget:
            batches.append(cur)
            cur, frames = [], 0
        cur.append(mixtures[i])
        frames += n
    if cur:
        batches.append(cur)
    return batches


# --- losses and optimizer -------------------------------------------------------

def joint_loss(l_asr, l_diar, alpha: float, mtl: bool):
    """``L_asr + alpha * L_diar`` with MTL, else ``L_asr``."""
    values = [l_asr] + ([l_diar] if l_diar is not None else [])
    for v in values:
        if not np.all(np.isfinite(dm.as_tensor(v).data)):
            raise ValueError("non-finite loss component")
    if not mtl or l_diar is None:
        return l_asr
    return dm.add(l_asr, dm.scale(l_diar, alpha))


def learning_rate(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` at ``warmup`` steps, then inverse square-root decay."""
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def arrays(self) -> dict:
        out = {"state.step": np.array([float(self.step)])}
        out.update({f"adam.m/{k}": a for k, a in self.m.items()})
        out.update({f"adam.v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "TrainState":
        st = cls(step=int(arrays["state.step"][0]))
        for k, a in arrays.items():
            if k.startswith("adam.m/"):
                st.m[k[7:]] = a.copy()
            elif k.startswith("adam.v/"):
                st.v[k[7:]] = a.copy()
        return st


def clip_gradients(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def adam_update(params, state: TrainState, lr: float, cfg: TrainConfig) -> None:
    t = state.step
    for p in params:
        if p.grad is None:
            continue
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= cfg.beta1
        m += (1 - cfg.beta1) * p.grad
        v *= cfg.beta2
        v += (1 - cfg.beta2) * p.grad * p.grad
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


# --- forward + step -----------------------------------------------------------

def label_pooled_attractors(emb_frames, labels: np.ndarray) -> dm.Tensor:
    """Mean frame embedding over each speaker's labelled frames: (B, K, D)."""
    w = np.swapaxes(labels, 1, 2)
    w = w / np.maximum(w.sum(axis=2, keepdims=True), 1.0)
    return dm.matmul(w, emb_frames)


def compute_losses(models: ModelPair, batch: Batch, cfg: TrainConfig, step: int = 0) -> dict:
    """Forward both branches on a batch; returns a dict of loss Tensors."""
    asr, diar = models.asr, models.diar
    dcfg = asr.decoder.config
    enc = asr.encode(batch.features, batch.lengths)
    need_diar = diar is not None and (cfg.mtl or dcfg.use_speaker_emb
                                      or (dcfg.use_activity_penalty and cfg.train_activity == "predicted"))
    out = {}
    attractors = activity = None
    if need_diar:
        k = int(batch.num_speakers.max()) + 1
        shuffle = [cfg.seed, step, 17] if diar.config.shuffle_frames else None
        ctx = contextlib.nullcontext() if cfg.mtl else dm.no_grad()
        with ctx:
            emb, attrs, post = diar.forward(batch.features, batch.lengths, k, asr_enc=enc, shuffle_seed=shuffle)
            total, act_bce, ex_bce = loss_diar(post, batch.labels, attrs.existence_probs,
                                               batch.num_speakers, emb.mask)
            if cfg.train_attractors == "label_pooled":
                attr_t = label_pooled_attractors(emb.frames, batch.labels)
            else:
                attr_t = attrs.attractors
        out.update(l_diar=total, activity_bce=act_bce, existence_bce=ex_bce)
        if dcfg.use_speaker_emb:
            attractors = attr_t if cfg.mtl else dm.Tensor(attr_t.data)
        if dcfg.use_activity_penalty and cfg.train_activity == "predicted":
            activity = post.data
    if dcfg.use_activity_penalty and cfg.train_activity == "oracle":
        activity = batch.labels
    _, l_asr = asr.forward_teacher_forced(enc, batch.dec_in, batch.dec_out, batch.speaker_index,
                                          batch.token_mask, attractors, activity)
    out["l_asr"] = l_asr
    out["loss"] = joint_loss(l_asr, out.get("l_diar"), cfg.alpha, cfg.mtl)
    return out


def train_step(batch: Batch, models: ModelPair, cfg: TrainConfig, state: TrainState) -> dict:
    params = models.parameters()
    for p in params:
        p.grad = None
    losses = compute_losses(models, batch, cfg, state.step)
    loss = losses["loss"]
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss at step {state.step}: {losses}")
    dm.backward(loss)
    state.step += 1
    gnorm = clip_gradients(params, cfg.grad_clip)
    lr = learning_rate(state.step, cfg.lr, cfg.warmup)
    adam_update(params, state, lr, cfg)
    rec = {k: float(v.data) for k, v in losses.items()}
    rec.update(step=state.step, lr=lr, grad_norm=gnorm)
    state.history.append(rec)
    return rec


class Trainer:
    """Steps through frame-budget batches, reshuffled each epoch from (seed, epoch)."""

    def __init__(self, models: ModelPair, cfg: TrainConfig, mixtures, vocab: TokenVocab,
                 state: TrainState | None = None):
        cfg.validate()
        self.models = models
        self.cfg = cfg
        self.mixtures = list(mixtures)
        self.vocab = vocab
        self.state = state or TrainState()
        self._groups = {}
        self._t0 = time.perf_counter()

    def _epoch_groups(self, epoch: int) -> list:
        if epoch not in self._groups:
            rng = np.random.default_rng([self.cfg.seed, epoch])
            self._groups[epoch] = frame_budget_batches(self.mixtures, self.cfg.batch_frames, rng)
        return self._groups[epoch]

    def batch_for_step(self, step: int) -> Batch:
        """Batch consumed by 0-based step ``step``; a pure function of the step index."""
        epoch, offset = 0, step
        while offset >= len(self._epoch_groups(epoch)):
            offset -= len(self._epoch_groups(epoch))
            epoch += 1
        return collate(self._epoch_groups(epoch)[offset], self.vocab, self.cfg.label_mode,
                       self.models.asr.subsample)

    def total_steps(self) -> int:
        if self.cfg.max_steps:
            return self.cfg.max_steps
        return sum(len(self._epoch_groups(e)) for e in range(self.cfg.epochs))

    def run(self, steps: int | None = None, callback=None) -> list:
        target = self.total_steps() if steps is None else self.state.step + steps
        while self.state.step < target:
            rec = train_step(self.batch_for_step(self.state.step), self.models, self.cfg, self.state)
            rec["wall_time"] = time.perf_counter() - self._t0
            if callback is not None:
                callback(rec)
        return self.state.history

    def save(self, path) -> None:
        arrays = self.models.state_dict()
        arrays.update(self.state.arrays())
        dm.save_checkpoint(path, arrays)

    def load(self, path) -> None:
        arrays = dm.load_checkpoint(path)
        self.models.load_state_dict({k: v for k, v in arrays.items() if k.startswith(("asr.", "diar."))})
        self.state = TrainState.from_arrays(arrays)


def write_metrics_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L_asr", "L_diar", "lr", "wall_time"])
        for rec in history:
            w.writerow([rec["step"], repr(rec["l_asr"]), repr(rec.get("l_diar", float("nan"))),
                        repr(rec["lr"]), f"{rec.get('wall_time', 0.0):.3f}"])

