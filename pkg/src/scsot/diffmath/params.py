"""Named parameters, seeded initialization and the checkpoint file format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import DTYPE, Tensor

CHECKPOINT_MAGIC = b"SCSOTCKP"


class Parameter(Tensor):
    __slots__ = ("name", "init")

    def __init__(self, data, name: str, init: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.init = init
        self.op = "param"


class ParameterSet:
    """Ordered registry of a model's parameters.

    Initialization draws from a single seeded generator in creation order, so
    a model built twice with the same seed has identical weights.
    """

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, shape, init: str = "uniform") -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            fan_in = shape[0] if len(shape) > 1 else shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init scheme {init!r}")
        p = Parameter(data, name, init)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        missing = set(self._params) - set(state)
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, arr in state.items():
            if k not in self._params:
                if strict:
                    raise KeyError(f"unexpected parameter {k!r}")
                continue
            p = self._params[k]
            if p.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {arr.shape}")
            p.data[...] = arr

    def num_elements(self) -> int:
        return sum(p.data.size for p in self._params.values())


def save_checkpoint(path, arrays: dict) -> None:
    """Write named float64 arrays.

    Layout (little-endian): magic, u32 count, then per entry
    u32 name length, utf-8 name, u32 rank, u32 dims..., float64 data.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (count,), pos = struct.unpack_from("<I", buf, 8), 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(DTYPE).reshape(shape)
        pos += 8 * n
    return out
