"""Walk through FIFO serialization and multi-talker scoring on one toy mixture.

Run: python3 demos/01_serialization_and_metrics.py
"""

from scsot.metrics import der, multi_talker_errors, sca
from scsot.mixture_sim import CorpusConfig, activity_labels, generate_corpus
from scsot.serialization import EOS_TERMINAL, SC_TERMINAL, TokenVocab, count_segments, deserialize, serialize_fifo

cfg = CorpusConfig(mixtures_per_count=1)
vocab = TokenVocab(cfg.vocab_size)
mix = [m for m in generate_corpus(cfg, seed=0) if m.num_speakers == 3][0]

print(f"mixture {mix.mixture_id}: {mix.num_frames} frames, {mix.num_speakers} speakers")
for (spk, start, end), words in zip(mix.segments, mix.transcripts):
    print(f"  speaker {spk}: frames {start}..{end}  tokens {list(words)}")

# speakers are serialized by start time, first come first served
for mode in (EOS_TERMINAL, SC_TERMINAL):
    target = serialize_fifo(mix.transcripts, mix.start_frames, vocab, mode)
    print(f"\n{mode}: {' '.join(vocab.surface(t) for t in target.tokens)}")
    print(f"  speaker index per token: {list(target.speaker_index_per_token)}")
    print(f"  segments: {count_segments(target.tokens, vocab, mode)}, "
          f"round trip ok: {deserialize(target.tokens, vocab, mode) == mix.fifo_transcripts()}")

# a hypothesis with the speakers swapped still scores 0 errors: WER takes the best assignment
refs = mix.fifo_transcripts()
hyp = [refs[1], refs[0], refs[2][:-1]]
errors, total = multi_talker_errors(refs, hyp)
print(f"\nswapped hypothesis, one deletion: {errors} errors over {total} reference tokens")
print(f"speaker counting accuracy for counts [3, 2] vs truth [3, 3]: {sca([3, 3], [3, 2]):.2f}")

labels = activity_labels(mix).matrix
perfect = der(labels, labels.astype(float))
noisy = labels.astype(float).copy()
noisy[::7, 0] = 1.0 - noisy[::7, 0]  # isolated flips; the 11-frame median filter smooths most away
print(f"DER perfect: {perfect.der:.3f}, isolated flips: {der(labels, noisy, median_window=1).der:.3f} unfiltered, "
      f"{der(labels, noisy).der:.3f} filtered")
