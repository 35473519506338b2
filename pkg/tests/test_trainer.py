import struct
import zlib

import numpy as np
import pytest

from mpvoc import config, dsp, metrics, trainer, vocoder

TINY = [
    "trainer.segment_frames=16",
    "trainer.batch_size=2",
    "corpus.n_utterances=4",
    "corpus.n_eval=1",
    "corpus.duration=0.5",
    "model.block.channels=8",
    "model.topology.depth=2",
    "model.topology.shared_layers=1",
    "model.stft.n_fft=256",
    "model.stft.hop=64",
    "model.mel.n_mels=32",
    "loss.resolutions=256:64,512:128",
    "metrics.pitch_frame=512",
    "metrics.pitch_hop=128",
    "metrics.f0_min=80",
    "metrics.mcd_n_fft=256",
    "metrics.mcd_hop=64",
    "metrics.mcd_n_mels=32",
]


def tiny_cfg(*extra):
    return config.load_config(overrides=TINY + list(extra))


@pytest.fixture(scope="module")
def tiny_corpus():
    return trainer.load_corpus(tiny_cfg().corpus)


def test_corpus_deterministic():
    spec = trainer.SyntheticCorpusSpec(n_utterances=3, duration=0.25)
    a = trainer.make_synthetic_corpus(spec)
    b = trainer.make_synthetic_corpus(spec)
    assert trainer.corpus_checksum(a) == trainer.corpus_checksum(b)
    c = trainer.make_synthetic_corpus(trainer.SyntheticCorpusSpec(n_utterances=3, duration=0.25, seed=1))
    assert trainer.corpus_checksum(a) != trainer.corpus_checksum(c)


def test_corpus_pitch_matches_spec():
    corpus = trainer.make_synthetic_corpus(trainer.SyntheticCorpusSpec(n_utterances=5))
    for utt in corpus:
        tr = metrics.pitch_track(utt.wave)
        assert abs(np.nanmedian(tr.f0) - utt.f0) <= 3.0


def test_single_harmonic_no_noise_is_sine():
    spec = trainer.SyntheticCorpusSpec(n_utterances=1, n_harmonics=1, noise_floor=0.0, f0_min=250, f0_max=250)
    x = trainer.make_synthetic_corpus(spec)[0].wave.samples
    mag = np.abs(dsp.stft_array(x, dsp.StftConfig(1024, 256)))
    assert np.argmax(mag[:, 30]) == round(250 * 1024 / 16000)


def test_invalid_corpus_spec():
    with pytest.raises(ValueError):
        trainer.SyntheticCorpusSpec(f0_min=300, f0_max=100)


def test_split_holds_out_tail(tiny_corpus):
    train, held = trainer.split_corpus(tiny_corpus, 1)
    assert [u.utt_id for u in held] == [tiny_corpus[-1].utt_id]
    assert len(train) == 3


def test_identical_runs_bit_identical(tiny_corpus):
    cfg = tiny_cfg()
    a = trainer.Trainer(cfg, tiny_corpus)
    b = trainer.Trainer(cfg, tiny_corpus)
    la = [a.train_step().total for _ in range(4)]
    lb = [b.train_step().total for _ in range(4)]
    assert la == lb


def test_lr_zero_freezes_parameters(tiny_corpus):
    tr = trainer.Trainer(tiny_cfg("trainer.lr=0"), tiny_corpus)
    before = tr.model.params.state_dict()
    for _ in range(3):
        tr.train_step()
    after = tr.model.params.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_negative_lr_rejected():
    with pytest.raises(config.ConfigError):
        tiny_cfg("trainer.lr=-1")


def test_loss_decreases_on_singleton():
    cfg = tiny_cfg("corpus.n_utterances=1", "corpus.n_eval=0", "trainer.lr=3e-3")
    tr = trainer.Trainer(cfg)
    first = tr.train_step().total
    for _ in range(40):
        last = tr.train_step().total
    assert last < first


def test_checkpoint_resume_bit_exact(tmp_path, tiny_corpus):
    cfg = tiny_cfg()
    ref = trainer.Trainer(cfg, tiny_corpus)
    for _ in range(3):
        ref.train_step()
    path = tmp_path / "a.mpv"
    ref.save_checkpoint(path)
    cont = [ref.train_step().total for _ in range(4)]
    resumed = trainer.Trainer.from_checkpoint(path, tiny_corpus)
    assert [resumed.train_step().total for _ in range(4)] == cont


def test_checkpoint_save_load_save_byte_identical(tmp_path, tiny_corpus):
    tr = trainer.Trainer(tiny_cfg(), tiny_corpus)
    tr.train_step()
    a, b = tmp_path / "a.mpv", tmp_path / "b.mpv"
    tr.save_checkpoint(a)
    trainer.Trainer.from_checkpoint(a, tiny_corpus).save_checkpoint(b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_layout_manual_decode(tmp_path):
    path = tmp_path / "toy.mpv"
    trainer.write_checkpoint(path, [("w", np.array([1.5, -2.0])), ("tag", b"hi")])
    data = path.read_bytes()
    assert data[:8] == b"MPVOCKPT"
    assert struct.unpack_from("<II", data, 8) == (1, 2)
    pos = 16
    assert struct.unpack_from("<H", data, pos) == (1,)
    assert data[pos + 2:pos + 3] == b"w"
    pos += 3
    assert data[pos] == 0 and data[pos + 1] == 1
    assert struct.unpack_from("<I", data, pos + 2) == (2,)
    assert struct.unpack_from("<2d", data, pos + 6) == (1.5, -2.0)
    pos += 6 + 16
    assert struct.unpack_from("<H", data, pos) == (3,)
    assert data[pos + 2:pos + 5] == b"tag"
    pos += 5
    assert data[pos] == 1 and struct.unpack_from("<I", data, pos + 1) == (2,)
    assert data[pos + 5:pos + 7] == b"hi"
    pos += 7
    assert len(data) == pos + 4
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_checkpoint_corruption_and_version(tmp_path):
    path = tmp_path / "x.mpv"
    trainer.write_checkpoint(path, [("w", np.zeros(3))])
    raw = bytearray(path.read_bytes())
    raw[20] ^= 0xFF
    bad = tmp_path / "bad.mpv"
    bad.write_bytes(bytes(raw))
    with pytest.raises(trainer.CheckpointError, match="checksum"):
        trainer.read_checkpoint(bad)
    raw = bytearray(path.read_bytes()[:-4])
    raw[8:12] = struct.pack("<I", 99)
    raw += struct.pack("<I", zlib.crc32(bytes(raw)))
    v99 = tmp_path / "v99.mpv"
    v99.write_bytes(bytes(raw))
    with pytest.raises(trainer.CheckpointError, match="version 99"):
        trainer.read_checkpoint(v99)
    junk = tmp_path / "junk.mpv"
    junk.write_bytes(b"not a checkpoint at all")
    with pytest.raises(trainer.CheckpointError):
        trainer.read_checkpoint(junk)


def test_evaluate_twice_identical_csv(tiny_corpus):
    tr = trainer.Trainer(tiny_cfg(), tiny_corpus)
    tr.train_step()
    assert tr.evaluate().to_csv() == tr.evaluate().to_csv()


def test_cell_parse_and_apply():
    c = trainer.Cell.parse("partially_shared:2/prior/miri")
    assert (c.topology, c.shared_layers, c.source, c.head) == ("partially_shared", 2, "prior", "miri")
    assert c.label == "partially_shared:2/prior/miri"
    cfg = c.apply(config.load_config(), seed=7)
    assert cfg.model.seed == 7 and cfg.trainer.seed == 7
    assert cfg.model.topology.kind == "partially_shared" and cfg.model.head.kind == "miri"
    for bad in ["separate/raw", "sep/raw/direct", "separate/wave/direct"]:
        with pytest.raises(ValueError):
            trainer.Cell.parse(bad)


def test_single_cell_grid_matches_direct_training(tiny_corpus):
    cfg = tiny_cfg("trainer.steps=2")
    cell = trainer.Cell.parse("separate/raw/direct")
    row = trainer.run_ablation(cfg, [cell], [0], tiny_corpus)[0]
    tr = trainer.Trainer(cell.apply(cfg, 0), tiny_corpus)
    tr.train()
    mean = tr.evaluate().mean()
    assert row["final_loss"] == tr.history[-1].total
    assert all(row[k] == mean[k] for k in metrics.CSV_COLUMNS)


def test_four_cell_grid_emits_four_rows(tiny_corpus):
    cfg = tiny_cfg("trainer.steps=1")
    rows = trainer.run_ablation(cfg, corpus=tiny_corpus)
    assert len(rows) == 4 and all(r["status"] == "ok" for r in rows)
    text = trainer.ablation_csv(rows)
    assert len(text.splitlines()) == 5
    assert text.splitlines()[0].startswith("cell,topology,shared_layers")


def test_grid_order_independent(tiny_corpus):
    cfg = tiny_cfg("trainer.steps=1")
    cells = trainer.parse_cells("shared/raw/direct,separate/prior/miri")
    fwd = trainer.run_ablation(cfg, cells, [0], tiny_corpus)
    rev = trainer.run_ablation(cfg, cells[::-1], [0], tiny_corpus)
    assert trainer.ablation_csv(fwd) == trainer.ablation_csv(rev[::-1])


def test_failed_cell_recorded_not_fatal(tiny_corpus):
    cfg = tiny_cfg("trainer.steps=1")
    cells = [trainer.Cell("partially_shared", "raw", "direct", 5), trainer.Cell.parse("shared/raw/direct")]
    rows = trainer.run_ablation(cfg, cells, [0], tiny_corpus)
    assert rows[0]["status"].startswith("failed")
    assert rows[1]["status"] == "ok"


def test_sample_rate_mismatch_rejected():
    with pytest.raises(config.ConfigError):
        config.load_config(overrides=["corpus.sample_rate=22050"])
