"""Deterministic synthetic multi-talker corpus.

Each token of an utterance is rendered as ``frames_per_token`` copies of the
speaker's prototype vector for that token plus the speaker's identity offset.
Speakers are mixed additively at integer start offsets and Gaussian noise is
added on top.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .serialization import TokenVocab, fifo_order

FEATURE_MAGIC = b"SCSOTFEA"
SPLITS = ("train", "dev", "test")
_SPLIT_SALT = {"train": 1, "dev": 2, "test": 3}


@dataclass
class CorpusConfig:
    vocab_size: int = 16
    feature_dim: int = 16
    speaker_pool: int = 8
    max_speakers: int = 3
    mixtures_per_count: int = 10
    dev_per_count: int = 4
    test_per_count: int = 10
    min_tokens: int = 2
    max_tokens: int = 4
    frames_per_token: int = 4
    max_offset: int = 12
    noise_scale: float = 0.1
    identity_scale: float = 1.0
    speaker_variation: float = 0.2

    def validate(self) -> None:
        if self.max_speakers < 1:
            raise ValueError("max_speakers must be >= 1")
        if self.vocab_size < 1:
            raise ValueError("vocabulary must not be empty")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.speaker_pool < self.max_speakers:
            raise ValueError("speaker_pool must be at least max_speakers")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")
        if self.frames_per_token < 1 or self.max_offset < 0 or self.noise_scale < 0:
            raise ValueError("frames_per_token >= 1, max_offset >= 0, noise_scale >= 0 required")
        if self.identity_scale <= 0:
            raise ValueError("identity_scale must be positive")

    def per_count(self, split: str) -> int:
        return {"train": self.mixtures_per_count, "dev": self.dev_per_count,
                "test": self.test_per_count}[split]


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: int
    prototype_table: np.ndarray  # (V, F)
    identity_offset: np.ndarray  # (F,)


@dataclass(frozen=True)
class UtteranceSpec:
    speaker_id: int
    token_ids: tuple
    frames_per_token: int
    start_frame: int

    def __post_init__(self):
        if len(self.token_ids) == 0:
            raise ValueError("utterance needs at least one token")
        if self.start_frame < 0 or self.frames_per_token < 1:
            raise ValueError("start_frame >= 0 and frames_per_token >= 1 required")

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.token_ids) * self.frames_per_token


@dataclass
class Mixture:
    """One overlapped recording.

    ``segments[i]`` and ``transcripts[i]`` describe the same speaker; their
    order is generation order, not FIFO order. A mixture read from a
    manifest without segments has no oracle labels; its transcripts are then
    taken to be in FIFO order already and ``speaker_count`` holds S.
    """

    mixture_id: str
    features: np.ndarray  # (T, F) float32
    segments: list | None  # [(speaker_id, start, end)]
    transcripts: list  # [tuple of token ids]
    speaker_count: int | None = None

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def has_labels(self) -> bool:
        return self.segments is not None

    @property
    def num_speakers(self) -> int:
        return len(self.segments) if self.segments is not None else int(self.speaker_count)

    @property
    def start_frames(self) -> list:
        if self.segments is None:
            raise ValueError(f"{self.mixture_id} has no oracle segments")
        return [s for _, s, _ in self.segments]

    def fifo_transcripts(self) -> list:
        if self.segments is None:
            return [list(t) for t in self.transcripts]
        return [list(self.transcripts[i]) for i in fifo_order(self.start_frames)]


@dataclass(frozen=True)
class ActivityLabels:
    matrix: np.ndarray  # (T, S) in {0, 1}, FIFO column order
    frame_rate: float = 100.0


def make_speakers(config: CorpusConfig, seed: int) -> list:
    """Speaker pool: a shared token table perturbed per speaker, plus an identity offset."""
    rng = np.random.default_rng([seed, 0])
    base = rng.standard_normal((config.vocab_size, config.feature_dim))
    speakers = []
    for sid in range(config.speaker_pool):
        table = base + config.speaker_variation * rng.standard_normal(base.shape)
        offset = rng.standard_normal(config.feature_dim)
        offset *= config.identity_scale / np.linalg.norm(offset)
        speakers.append(SpeakerSpec(sid, table, offset))
    return speakers


def mix(utterances, speakers, noise_scale: float, seed, mixture_id: str = "mix") -> Mixture:
    by_id = {s.speaker_id: s for s in speakers}
    seen = set()
    for u in utterances:
        if u.speaker_id in seen:
            raise ValueError(f"speaker {u.speaker_id} appears twice in one mixture")
        if u.speaker_id not in by_id:
            raise KeyError(f"unknown speaker {u.speaker_id}")
        seen.add(u.speaker_id)

    n_frames = max(u.end_frame for u in utterances)
    dim = speakers[0].prototype_table.shape[1]
    feats = np.zeros((n_frames, dim))
    for u in utterances:
        spk = by_id[u.speaker_id]
        clean = np.repeat(spk.prototype_table[list(u.token_ids)], u.frames_per_token, axis=0)
        feats[u.start_frame:u.end_frame] += clean + spk.identity_offset
    if noise_scale > 0:
        rng = np.random.default_rng(seed)
        feats += noise_scale * rng.standard_normal(feats.shape)
    return Mixture(
        mixture_id=mixture_id,
        features=feats.astype(np.float32),
        segments=[(u.speaker_id, u.start_frame, u.end_frame) for u in utterances],
        transcripts=[tuple(u.token_ids) for u in utterances],
    )


def _draw_utterances(config: CorpusConfig, n_spk: int, rng) -> list:
    speaker_ids = rng.choice(config.speaker_pool, size=n_spk, replace=False)
    lengths = rng.integers(config.min_tokens, config.max_tokens + 1, size=n_spk)
    starts = rng.integers(0, config.max_offset + 1, size=n_spk)
    # no gaps: an utterance may not begin after every earlier one has ended
    ends = {}
    for i in fifo_order(starts.tolist()):
        if ends:
            starts[i] = min(starts[i], max(ends.values()))
        ends[i] = starts[i] + lengths[i] * config.frames_per_token
    utts = []
    for i in range(n_spk):
        tokens = tuple(int(t) for t in rng.integers(0, config.vocab_size, size=lengths[i]))
        utts.append(UtteranceSpec(int(speaker_ids[i]), tokens, config.frames_per_token, int(starts[i])))
    return utts


def generate_corpus(config: CorpusConfig, seed: int, split: str = "train") -> list:
    """All mixtures of one split; mixture ``i`` depends only on (seed, split, i)."""
    config.validate()
    speakers = make_speakers(config, seed)
    out = []
    index = 0
    for n_spk in range(1, config.max_speakers + 1):
        for _ in range(config.per_count(split)):
            rng = np.random.default_rng([seed, _SPLIT_SALT[split], index])
            utts = _draw_utterances(config, n_spk, rng)
            mix_seed = [seed, _SPLIT_SALT[split], index, 1]
            out.append(mix(utts, speakers, config.noise_scale, mix_seed, f"{split}-{index:05d}"))
            index += 1
    return out


def activity_labels(mixture: Mixture, frame_rate: float = 100.0) -> ActivityLabels:
    order = fifo_order(mixture.start_frames)
    mat = np.zeros((mixture.num_frames, len(order)), dtype=np.int8)
    for col, i in enumerate(order):
        _, start, end = mixture.segments[i]
        mat[start:end, col] = 1
    return ActivityLabels(mat, frame_rate)


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """A subsampled frame is active if any input frame it covers is active."""
    n = labels.shape[0]
    n_out = -(-n // factor)
    padded = np.zeros((n_out * factor, labels.shape[1]), dtype=labels.dtype)
    padded[:n] = labels
    return padded.reshape(n_out, factor, -1).max(axis=1)


def overlap_frames(mixture: Mixture) -> int:
    return int((activity_labels(mixture).matrix.sum(axis=1) >= 2).sum())


# --- corpus directory -------------------------------------------------------

def write_features(path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f4")
    t, f = feats.shape
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<II", t, f) + feats.tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad feature file magic")
    t, f = struct.unpack_from("<II", buf, 8)
    return np.frombuffer(buf, dtype="<f4", count=t * f, offset=16).reshape(t, f).astype(np.float32)


def write_split(directory, mixtures) -> None:
    directory = Path(directory)
    (directory / "feats").mkdir(parents=True, exist_ok=True)
    lines = []
    for m in mixtures:
        rel = f"feats/{m.mixture_id}.fea"
        write_features(directory / rel, m.features)
        lines.append(json.dumps({
            "id": m.mixture_id,
            "T": m.num_frames,
            "F": int(m.features.shape[1]),
            "num_speakers": m.num_speakers,
            "segments": [list(map(int, s)) for s in m.segments],
            "transcripts": [list(map(int, t)) for t in m.transcripts],
            "features": rel,
        }, sort_keys=True))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def read_split(directory) -> list:
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl in {directory}")
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        feats = read_features(directory / rec["features"])
        if feats.shape != (rec["T"], rec["F"]):
            raise ValueError(f"{rec['id']}: feature shape {feats.shape} disagrees with manifest")
        segs = rec.get("segments")
        out.append(Mixture(rec["id"], feats, None if segs is None else [tuple(s) for s in segs],
                           [tuple(t) for t in rec["transcripts"]], int(rec["num_speakers"])))
    return out


def write_corpus(directory, config: CorpusConfig, seed: int) -> dict:
    """Generate train/dev/test splits plus ``vocab.txt`` and ``corpus.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split in SPLITS:
        splits[split] = generate_corpus(config, seed, split)
        write_split(directory / split, splits[split])
    TokenVocab(config.vocab_size).write(directory / "vocab.txt")
    (directory / "corpus.json").write_text(json.dumps({"seed": seed, **asdict(config)}, sort_keys=True, indent=1) + "\n")
    return splits


def read_corpus_config(directory) -> tuple:
    rec = json.loads((Path(directory) / "corpus.json").read_text())
    seed = rec.pop("seed")
    return CorpusConfig(**rec), seed


def nearest_prototype_decode(mixture: Mixture, speaker: SpeakerSpec, frames_per_token: int) -> list:
    """Recover token ids of a clean single-speaker mixture by nearest prototype."""
    _, start, end = mixture.segments[0]
    frames = mixture.features[start:end:frames_per_token].astype(np.float64) - speaker.identity_offset
    d = ((frames[:, None, :] - speaker.prototype_table[None]) ** 2).sum(axis=-1)
    return d.argmin(axis=1).tolist()

