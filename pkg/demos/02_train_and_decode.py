"""Train a small speaker-conditioned model with the diarization loss and decode with it.

Shows the three conditioning sources at decode time and count-terminated
search. Takes about a minute on one CPU core.

Run: python3 demos/02_train_and_decode.py
"""

import time

from scsot.asr_model import DecoderConfig, EncoderConfig
from scsot.decoding import DecodeConfig, decode_mixtures
from scsot.diar_model import DiarConfig
from scsot.metrics import sca, wer
from scsot.mixture_sim import CorpusConfig, generate_corpus
from scsot.serialization import SC_TERMINAL, TokenVocab
from scsot.training import TrainConfig, Trainer, build_models

cc = CorpusConfig(mixtures_per_count=11)
vocab = TokenVocab(cc.vocab_size)
train = generate_corpus(cc, 0, "train")[:32]

enc = EncoderConfig(input_dim=cc.feature_dim, hidden=64, ffn=256)
dec = DecoderConfig(vocab_size=vocab.size, hidden=64, ffn=256, attractor_dim=32,
                    use_speaker_emb=True, use_activity_penalty=True)
models = build_models(enc, dec, DiarConfig(), seed=0)
cfg = TrainConfig(mtl=True, lr=2e-3, warmup=200, max_steps=400, label_mode=SC_TERMINAL)

t0 = time.time()


def report(rec):
    if rec["step"] % 100 == 0:
        print(f"step {rec['step']:4d}  L_asr {rec['l_asr']:.3f}  activity BCE {rec['activity_bce']:.3f}  "
              f"{time.time() - t0:.0f}s", flush=True)


Trainer(models, cfg, train, vocab).run(callback=report)

refs = [m.fifo_transcripts() for m in train]
counts = [m.num_speakers for m in train]
for conditioning in ("none", "predicted", "oracle"):
    dcfg = DecodeConfig(beam=1, max_len=40, termination="speaker_count", conditioning=conditioning)
    res = decode_mixtures(models, train, dcfg, vocab)
    print(f"conditioning={conditioning:9s} train WER {wer(refs, [r.transcripts for r in res]):.3f}  "
          f"SCA {sca(counts, [r.predicted_count for r in res]):.3f}")

m = next(x for x in train if x.num_speakers == 3)
res = decode_mixtures(models, [m], DecodeConfig(beam=4, max_len=40, termination="speaker_count"), vocab)[0]
print(f"\n{m.mixture_id}: reference {m.fifo_transcripts()}")
print(f"  hypothesis {res.transcripts} ({res.reason}, {res.predicted_count} speakers)")
