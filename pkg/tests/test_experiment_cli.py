import csv
import dataclasses
import json

import pytest

from scsot import cli
from scsot import experiment as ex
from scsot.mixture_sim import generate_corpus, read_split, write_corpus
from scsot.serialization import TokenVocab, serialize_fifo

TINY_CFG = """\
[corpus]
vocab_size = 6
feature_dim = 5
mixtures_per_count = 4
dev_per_count = 1
test_per_count = 2
max_offset = 4
frames_per_token = 2

[encoder]
layers = 1
hidden = 8
ffn = 16
conv_kernel = 3

[decoder]
layers = 1
hidden = 8
ffn = 16

[diar]
hidden = 6
ffn = 12
conv_kernel = 3

[train]
max_steps = 3
batch_frames = 80
warmup = 5

[decode]
beam = 2
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    cfg = ex.load_config(path)
    write_corpus(tmp_path / "corpus", cfg.corpus, seed=1)
    return tmp_path, path, cfg


# --- config ------------------------------------------------------------------

def test_format_parse_round_trip():
    cfg = ex.parse_config(TINY_CFG)
    again = ex.parse_config(ex.format_config(cfg))
    assert again == cfg
    assert cfg.encoder.hidden == 8 and cfg.train.warmup == 5
    # untouched keys keep their defaults
    assert cfg.decoder.penalty == 50.0


@pytest.mark.parametrize("text, fragment", [
    ("[nope]\nx = 1\n", "unknown config section"),
    ("[train]\nlearning_rate = 1\n", "unknown key"),
    ("[train]\nlr = fast\n", "invalid value"),
    ("[decoder]\nuse_speaker_emb = maybe\n", "invalid value"),
    ("lr = 1\n", "malformed"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(ex.ConfigError, match=fragment):
        ex.parse_config(text)


def test_resolve_fills_derived_fields():
    cfg = ex.parse_config(TINY_CFG)
    cfg.decode.termination = "speaker_count"
    train = generate_corpus(cfg.corpus, 0, "train")
    r = ex.resolve(cfg, train)
    vocab = TokenVocab(6)
    assert r.encoder.input_dim == 5
    assert r.decoder.vocab_size == vocab.size
    assert r.decoder.attractor_dim == r.diar.hidden
    assert r.diar.max_attractors >= cfg.corpus.max_speakers + 1
    assert r.train.label_mode == "sc_terminal"
    longest = max(len(serialize_fifo(m.transcripts, m.start_frames, vocab, "sc_terminal").tokens) for m in train)
    assert r.decode.max_len == 2 * longest
    # resolving a resolved config changes nothing
    assert ex.resolve(r, train) == r


def test_resolve_rejects_bad_values():
    cfg = ex.parse_config(TINY_CFG)
    cfg.encoder.hidden = 7
    with pytest.raises(ex.ConfigError, match="encoder"):
        ex.resolve(cfg, generate_corpus(cfg.corpus, 0, "train"))
    cfg = ex.parse_config(TINY_CFG)
    with pytest.raises(ex.ConfigError, match="max_len"):
        ex.resolve(cfg)


def test_count_termination_needs_diarization():
    cfg = ex.parse_config(TINY_CFG)
    cfg.decode.termination = "speaker_count"
    cfg.run.use_diar = False
    with pytest.raises(ex.ConfigError, match="diarization"):
        ex.resolve(cfg, generate_corpus(cfg.corpus, 0, "train"))


# --- ablation rows -----------------------------------------------------------------

@pytest.mark.parametrize("row, emb, act, mtl, oracle", [
    (2, False, False, False, False), (3, False, False, True, False), (4, True, False, False, False),
    (5, True, False, True, False), (6, False, True, True, False), (7, True, True, True, False),
    (8, True, True, True, True)])
def test_row_config_flags(row, emb, act, mtl, oracle):
    cfg = ex.row_config(ex.parse_config(TINY_CFG), row)
    assert cfg.decoder.use_speaker_emb is emb
    assert cfg.decoder.use_activity_penalty is act
    assert cfg.train.mtl is mtl
    assert cfg.run.use_diar is (row != 2)
    expected = "oracle" if oracle else "predicted" if (emb or act) else "none"
    assert cfg.decode.conditioning == expected
    if row == 3:
        # MTL alone: the diarization loss is active but nothing reaches the decoder
        assert cfg.train.alpha > 0 and not (emb or act)


def test_rows_7_and_8_share_training():
    base = ex.parse_config(TINY_CFG)
    train = generate_corpus(base.corpus, 0, "train")
    keys = {r: ex._training_key(ex.resolve(ex.row_config(base, r), train)) for r in (5, 7, 8)}
    assert keys[7] == keys[8] != keys[5]


@pytest.mark.parametrize("text", ["1", "2,9", "x", ""])
def test_parse_rows_rejects(text):
    with pytest.raises(ex.ConfigError):
        ex.parse_rows(text)


def test_row8_without_labels_is_refused(tmp_path):
    base = ex.parse_config(TINY_CFG)
    base.run.splits = "test"
    splits = {s: generate_corpus(base.corpus, 0, s) for s in ("train", "test")}
    splits["test"] = [dataclasses.replace(m, segments=None, speaker_count=m.num_speakers) for m in splits["test"]]
    corpus = ex.Corpus(tmp_path, base.corpus, 0, TokenVocab(6), splits)
    with pytest.raises(ex.AblationError, match="row 8"):
        ex.ablate([7, 8], corpus, tmp_path / "abl", base, seeds=(0,))
    # no training happened before the refusal
    assert not (tmp_path / "abl" / "row7").exists()


# --- runs ------------------------------------------------------------------------

def test_run_experiment_outputs(tiny):
    root, _, cfg = tiny
    res = ex.run_experiment(root / "corpus", cfg, root / "run")
    out = root / "run"
    for name in ("resolved.cfg", "model.ckpt", "metrics.csv", "hyp_dev.txt", "hyp_test.txt", "scores.csv", "run.log"):
        assert (out / name).is_file(), name
    assert len(list((out / "diar" / "test").glob("*.csv"))) == len(read_split(root / "corpus" / "test"))
    assert set(res.reports) == {"dev", "test"}
    with open(out / "metrics.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
    assert "conditioning source = none;" in (out / "run.log").read_text()


def test_checkpoint_reuse_matches_training(tiny):
    root, _, cfg = tiny
    first = ex.run_experiment(root / "corpus", cfg, root / "a")
    again = ex.run_experiment(root / "corpus", cfg, root / "b", checkpoint=root / "a" / "model.ckpt")
    assert (root / "a" / "hyp_test.txt").read_bytes() == (root / "b" / "hyp_test.txt").read_bytes()
    assert first.reports["test"].wer == again.reports["test"].wer


def test_score_split_round_trip(tiny):
    root, _, cfg = tiny
    res = ex.run_experiment(root / "corpus", cfg, root / "run")
    hyps, diar = ex.read_scored_outputs(root / "run" / "hyp_test.txt", root / "run" / "diar" / "test")
    rep = ex.score_split(read_split(root / "corpus" / "test"), hyps, diar)
    assert rep.wer == res.reports["test"].wer and rep.der == res.reports["test"].der


def test_oracle_conditioning_needs_labels(tiny):
    root, _, cfg = tiny
    corpus = ex.load_corpus(root / "corpus")
    cfg = ex.resolve(ex.with_corpus(ex.row_config(cfg, 8), corpus), corpus.split("train"))
    models = ex.build(cfg)
    unlabelled = [dataclasses.replace(m, segments=None, speaker_count=m.num_speakers)
                  for m in corpus.split("test")]
    with pytest.raises(ex.AblationError):
        ex.decode_split(models, cfg, unlabelled, corpus.vocab)


# --- cli ---------------------------------------------------------------------------

def test_cli_pipeline(tiny, capsys):
    root, cfg_path, _ = tiny
    c, r = str(root / "corpus"), root / "run"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--seed", "2", "--out", str(root / "c2")]) == 0
    assert (root / "c2" / "train").is_dir()
    assert cli.main(["train", "--config", str(cfg_path), "--corpus", c, "--out", str(r)]) == 0
    ckpt = str(r / "model.ckpt")
    assert cli.main(["decode", "--corpus", c, "--checkpoint", ckpt, "--out", str(root / "dec"),
                     "--termination", "count", "--beam", "1"]) == 0
    assert (root / "dec" / "hyp.txt").read_text() == (root / "dec" / "hyp_test.txt").read_text()
    capsys.readouterr()
    assert cli.main(["score", "--ref", str(root / "corpus" / "test"), "--hyp", str(root / "dec" / "hyp.txt")]) == 0
    printed = capsys.readouterr().out
    assert "wer,test" in printed and "der,test" in printed
    assert cli.main(["dump-attention", "--corpus", c, "--checkpoint", ckpt, "--out", str(root / "att"),
                     "--limit", "2"]) == 0
    assert len(list((root / "att").glob("*.txt"))) == 2


@pytest.mark.parametrize("argv, code", [
    ([], cli.EXIT_USAGE),
    (["train", "--corpus", "x"], cli.EXIT_USAGE),
    (["decode", "--corpus", "x", "--checkpoint", "y", "--out", "z", "--termination", "sometimes"], cli.EXIT_USAGE),
])
def test_cli_usage_errors(argv, code, capsys):
    assert cli.main(argv) == code
    assert "usage" in capsys.readouterr().err


def test_cli_error_codes(tiny, tmp_path):
    root, cfg_path, _ = tiny
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nwarmup = soon\n")
    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("[train]\nwarm = 1\n")
    out = str(tmp_path / "o")
    c = str(root / "corpus")
    assert cli.main(["train", "--config", str(tmp_path / "absent.cfg"), "--corpus", c, "--out", out]) == cli.EXIT_MISSING
    assert cli.main(["train", "--config", str(bad), "--corpus", c, "--out", out]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", str(unknown), "--corpus", c, "--out", out]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--corpus", str(tmp_path / "nowhere"), "--out", out]) == cli.EXIT_MISSING
    assert cli.main(["ablate", "--corpus", c, "--out", out, "--rows", "1,2"]) == cli.EXIT_CONFIG
    assert cli.main(["decode", "--corpus", c, "--checkpoint", str(tmp_path / "none.ckpt"), "--out", out]) \
        == cli.EXIT_MISSING


def test_cli_ablate_without_labels(tiny, tmp_path):
    root, cfg_path, _ = tiny
    manifest = root / "corpus" / "test" / "manifest.jsonl"
    recs = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
    for rec in recs:
        del rec["segments"]
    manifest.write_text("".join(json.dumps(r) + "\n" for r in recs))
    args = ["ablate", "--config", str(cfg_path), "--corpus", str(root / "corpus"), "--out", str(tmp_path / "abl"),
            "--rows", "8", "--seeds", "0"]
    assert cli.main(args) == cli.EXIT_ABLATION


def test_log_level_env(tiny, monkeypatch, tmp_path):
    root, cfg_path, _ = tiny
    monkeypatch.setenv("SCSOT_LOG_LEVEL", "CHATTY")
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "g")]) == cli.EXIT_CONFIG
