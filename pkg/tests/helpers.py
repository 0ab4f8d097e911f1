"""Shared fixtures: gradcheck cases and tiny model builders."""

import numpy as np

from scsot import diffmath as dm
from scsot.asr_model import DecoderConfig, EncoderConfig
from scsot.diar_model import DiarConfig
from scsot.serialization import TokenVocab
from scsot.training import build_models


def primitive_cases(seed: int):
    """Yield (name, fn, inputs) for every differentiable primitive at a seed-dependent shape."""
    rng = np.random.default_rng(seed)
    n, m, k = (int(v) for v in rng.integers(2, 5, size=3))
    L = dm.leaf
    r = rng.standard_normal
    proj = np.random.default_rng(seed + 1000)
    pw = {}

    def wrap(name, f):
        def g(*args):
            out = f(*args)
            if out.data.ndim == 0:
                return out
            if name not in pw:
                pw[name] = proj.standard_normal(out.shape)
            return dm.sum_(dm.mul(out, pw[name]))
        return g

    mask = (rng.random((n, m)) > 0.5).astype(float)
    ids = rng.integers(0, k + 1, size=(n, m))
    x3 = r((2, n + 4, m))
    yield "add", wrap("add", dm.add), [L(r((n, m))), L(r((1, m)))]
    yield "sub", wrap("sub", dm.sub), [L(r((n, m))), L(r((n, 1)))]
    yield "mul", wrap("mul", dm.mul), [L(r((n, m))), L(r((n, m)))]
    yield "scale", wrap("scale", lambda a: dm.scale(a, 0.7)), [L(r((n, m)))]
    yield "blend", wrap("blend", lambda a, b: dm.blend(mask, a, b)), [L(r((n, m))), L(r((n, m)))]
    yield "matmul", wrap("matmul", dm.matmul), [L(r((2, n, m))), L(r((m, k)))]
    yield "linear", wrap("linear", dm.linear), [L(r((n, m))), L(r((m, k))), L(r(k))]
    yield "transpose", wrap("transpose", lambda a: dm.transpose(a, (1, 0, 2))), [L(r((n, m, k)))]
    yield "reshape", wrap("reshape", lambda a: dm.reshape(a, (m, n))), [L(r((n, m)))]
    yield "concat", wrap("concat", lambda a, b: dm.concat([a, b], axis=-1)), [L(r((n, m))), L(r((n, k)))]
    yield "slice", wrap("slice", lambda a: dm.slice_(a, (slice(None), slice(1, None)))), [L(r((n, m + 1)))]
    yield "sum", wrap("sum", lambda a: dm.sum_(a, axis=0)), [L(r((n, m)))]
    yield "mean", wrap("mean", lambda a: dm.mean(a, axis=-1, keepdims=True)), [L(r((n, m)))]
    yield "sigmoid", wrap("sigmoid", dm.sigmoid), [L(3 * r((n, m)))]
    yield "tanh", wrap("tanh", dm.tanh), [L(r((n, m)))]
    yield "gelu", wrap("gelu", dm.gelu), [L(2 * r((n, m)))]
    yield "softmax", wrap("softmax", dm.softmax), [L(r((n, m)))]
    yield "layer_norm", wrap("layer_norm", dm.layer_norm), [L(r((n, m + 2))), L(r(m + 2)), L(r(m + 2))]
    yield "embedding_lookup", wrap("embedding_lookup", lambda t: dm.embedding_lookup(t, ids)), [L(r((k + 1, 3)))]
    yield "depthwise_conv1d", wrap("depthwise_conv1d", dm.depthwise_conv1d), [L(x3), L(r((3, m))), L(r(m))]
    h = k

    def lstm(x, hh, c, w, b):
        hn, cn = dm.lstm_step(x, hh, c, w, b)
        return dm.concat([hn, cn], axis=-1)

    yield "lstm_step", wrap("lstm_step", lstm), [
        L(r((n, m))), L(r((n, h))), L(r((n, h))), L(0.5 * r((m + h, 4 * h))), L(r(4 * h))]
    targets = rng.integers(0, k, size=n)
    cw = rng.random(n)
    yield "cross_entropy_logits", lambda a: dm.cross_entropy_logits(a, targets, cw), [L(r((n, k)))]
    bt = (rng.random((n, m)) > 0.5).astype(float)
    yield "binary_cross_entropy", lambda p: dm.binary_cross_entropy(p, bt), [L(0.05 + 0.9 * rng.random((n, m)))]


VOCAB = TokenVocab(6)

ACCEPTANCE_LINES = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> str:
    """Log one acceptance line; the terminal summary repeats them in order."""
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return line


def tiny_models(seed=0, emb=True, act=True, diar=True, shared=False):
    enc = EncoderConfig(input_dim=5, layers=1, heads=2, hidden=8, ffn=16, conv_kernel=3, subsample=2)
    dec = DecoderConfig(vocab_size=VOCAB.size, layers=2, heads=2, hidden=8, ffn=16, attractor_dim=6,
                        use_speaker_emb=emb, use_activity_penalty=act)
    dcfg = DiarConfig(shared_encoder=shared, layers=1, heads=2, hidden=6, ffn=12, conv_kernel=3) if diar else None
    return build_models(enc, dec, dcfg, seed=seed)


def tiny_inputs(seed=0, frames=9, tokens=5, speakers=2):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((frames, 5))
    dec_out = rng.integers(0, VOCAB.num_text, size=tokens)
    dec_in = np.concatenate([[VOCAB.sos], dec_out[:-1]])
    spk = np.sort(rng.integers(0, speakers, size=tokens))
    return feats, dec_in, dec_out, spk
