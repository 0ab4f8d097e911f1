"""FIFO serialization of multi-speaker transcripts into one token stream.

Two label layouts are supported:

* ``eos_terminal``: ``a b <sc> c <eos>`` (S-1 separators, one terminal)
* ``sc_terminal``:  ``a b <sc> c <sc>`` (S separators, no ``<eos>``), used
  when decoding stops on a speaker count instead of on ``<eos>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

EOS_TERMINAL = "eos_terminal"
SC_TERMINAL = "sc_terminal"
MODES = (EOS_TERMINAL, SC_TERMINAL)


@dataclass(frozen=True)
class TokenVocab:
    """Text ids ``0..V-1`` followed by ``<sos>``, ``<eos>``, ``<sc>``."""

    num_text: int

    def __post_init__(self):
        if self.num_text < 1:
            raise ValueError("vocabulary needs at least one text token")

    @property
    def sos(self) -> int:
        return self.num_text

    @property
    def eos(self) -> int:
        return self.num_text + 1

    @property
    def sc(self) -> int:
        return self.num_text + 2

    @property
    def size(self) -> int:
        return self.num_text + 3

    def surface(self, tok: int) -> str:
        specials = {self.sos: "<sos>", self.eos: "<eos>", self.sc: "<sc>"}
        return specials.get(tok, f"t{tok:02d}")

    def is_special(self, tok: int) -> bool:
        return tok >= self.num_text

    def write(self, path) -> None:
        lines = []
        for tok in range(self.size):
            line = f"{tok}\t{self.surface(tok)}"
            if self.is_special(tok):
                line += "\tspecial"
            lines.append(line)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "TokenVocab":
        text = 0
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 3 or fields[2] != "special":
                text += 1
        return cls(text)


@dataclass(frozen=True)
class SerializedTarget:
    tokens: tuple
    mode: str
    speaker_index_per_token: tuple

    @property
    def num_segments(self) -> int:
        return self.speaker_index_per_token[-1] + 1 if self.tokens else 0

    def __len__(self) -> int:
        return len(self.tokens)


def fifo_order(start_frames) -> list:
    """Indices sorting speakers by start frame, ties by original index."""
    starts = list(start_frames)
    return sorted(range(len(starts)), key=lambda i: (starts[i], i))


def speaker_indices(tokens, sc: int) -> tuple:
    """Segment index of every position: the number of ``<sc>`` strictly before it."""
    out, seen = [], 0
    for tok in tokens:
        out.append(seen)
        if tok == sc:
            seen += 1
    return tuple(out)


def serialize_fifo(transcripts, start_frames, vocab: TokenVocab, mode: str = EOS_TERMINAL) -> SerializedTarget:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if len(transcripts) != len(start_frames) or not transcripts:
        raise ValueError("need one start frame per transcript and at least one speaker")
    for i, tr in enumerate(transcripts):
        if len(tr) == 0:
            raise ValueError(f"empty transcript for speaker {i}")

    tokens = []
    order = fifo_order(start_frames)
    for k, spk in enumerate(order):
        tokens.extend(int(t) for t in transcripts[spk])
        if k < len(order) - 1 or mode == SC_TERMINAL:
            tokens.append(vocab.sc)
    if mode == EOS_TERMINAL:
        tokens.append(vocab.eos)
    return SerializedTarget(tuple(tokens), mode, speaker_indices(tokens, vocab.sc))


def deserialize(tokens, vocab: TokenVocab, mode: str = EOS_TERMINAL) -> list:
    """Split a hypothesis or label sequence into per-speaker transcripts.

    Anything after the first ``<eos>`` is dropped. In ``sc_terminal`` mode the
    trailing separator closes the last segment; an unterminated tail is kept
    as a final segment. ``<sos>`` tokens are ignored.
    """
    segments, current = [], []
    closed = False
    for tok in tokens:
        if tok == vocab.eos:
            break
        if tok == vocab.sos:
            continue
        if tok == vocab.sc:
            segments.append(current)
            current = []
            closed = True
        else:
            current.append(int(tok))
            closed = False
    if mode == EOS_TERMINAL or not closed:
        if current or mode == EOS_TERMINAL or not segments:
            segments.append(current)
    return segments


def count_segments(tokens, vocab: TokenVocab, mode: str = EOS_TERMINAL) -> int:
    n_sc = sum(1 for t in tokens if t == vocab.sc)
    return n_sc + 1 if mode == EOS_TERMINAL else n_sc
