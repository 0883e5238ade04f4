import logging
import struct
import wave

import numpy as np
import pytest
from scipy import stats
from scipy.io import wavfile

from mrcqtdiff.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from mrcqtdiff.config import SCHEMA, describe, load_config, parse_config
from mrcqtdiff.data import ArrayDataset, DatasetManifest, build_manifest, next_batch, two_tone_corpus
from mrcqtdiff.errors import ConfigError, DataError, FormatError, ParameterError
from mrcqtdiff.wav import load_wav, read_wav, save_wav

RATE = 8000


# -- WAV -----------------------------------------------------------------------


def test_float32_round_trip_is_bit_exact(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 1001).astype(np.float32)
    save_wav(tmp_path / "a.wav", x, RATE, "float32")
    y, rate = load_wav(tmp_path / "a.wav")
    assert rate == RATE
    assert y.astype(np.float32).tobytes() == x.tobytes()
    # independent reader agrees
    rate2, z = wavfile.read(tmp_path / "a.wav")
    assert rate2 == RATE and z.tobytes() == x.tobytes()


@pytest.mark.parametrize("fmt,bits", [("pcm16", 16), ("pcm24", 24)])
def test_pcm_round_trip_within_half_lsb(tmp_path, fmt, bits):
    x = np.random.default_rng(1).uniform(-1, 1, 999)
    save_wav(tmp_path / "p.wav", x, RATE, fmt)
    y, _ = load_wav(tmp_path / "p.wav")
    assert np.max(np.abs(y - x)) <= 0.5 / 2 ** (bits - 1) + 1e-15
    with wave.open(str(tmp_path / "p.wav")) as w:
        assert (w.getsampwidth(), w.getframerate(), w.getnframes()) == (bits // 8, RATE, 999)


def test_pcm16_matches_standard_library_encoding(tmp_path):
    x = np.linspace(-1.2, 1.2, 64)
    save_wav(tmp_path / "c.wav", x, RATE, "pcm16")
    with wave.open(str(tmp_path / "c.wav")) as w:
        ints = np.frombuffer(w.readframes(64), dtype="<i2")
    np.testing.assert_array_equal(ints, np.clip(np.round(x * 32768), -32768, 32767))


def test_reads_stdlib_written_stereo_pcm24(tmp_path):
    rng = np.random.default_rng(2)
    ints = rng.integers(-2**23, 2**23, size=(50, 2))
    raw = b"".join(int(v).to_bytes(3, "little", signed=True) for v in ints.reshape(-1))
    with wave.open(str(tmp_path / "s.wav"), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(3)
        w.setframerate(RATE)
        w.writeframes(raw)
    wf = read_wav(tmp_path / "s.wav")
    assert (wf.channels, wf.bits, wf.sample_rate) == (2, 24, RATE)
    np.testing.assert_array_equal(wf.samples, ints / 2**23)
    np.testing.assert_allclose(wf.mono(), 0.5 * (ints[:, 0] + ints[:, 1]) / 2**23)


def test_extensible_float_header(tmp_path):
    x = np.array([0.25, -0.5, 0.125], dtype="<f4")
    fmt = struct.pack("<HHIIHHHHIH14s", 0xFFFE, 1, RATE, RATE * 4, 4, 32, 22, 32, 4, 3, b"\x00" * 14)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", 12) + x.tobytes()
    (tmp_path / "e.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    y, _ = load_wav(tmp_path / "e.wav")
    np.testing.assert_array_equal(y, x)


def test_truncated_file_raises_naming_the_chunk(tmp_path):
    save_wav(tmp_path / "t.wav", np.zeros(100), RATE, "pcm16")
    data = (tmp_path / "t.wav").read_bytes()
    (tmp_path / "cut.wav").write_bytes(data[:-50])
    with pytest.raises(FormatError, match="'data'"):
        read_wav(tmp_path / "cut.wav")


def test_malformed_files(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav at all")
    with pytest.raises(FormatError, match="RIFF"):
        read_wav(tmp_path / "junk.wav")
    fmt = struct.pack("<HHIIHH", 1, 1, RATE, RATE, 1, 8)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 2) + b"\x00\x00"
    (tmp_path / "u8.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(FormatError, match="'fmt '"):
        read_wav(tmp_path / "u8.wav")
    with pytest.raises(FormatError):
        save_wav(tmp_path / "x.wav", np.zeros(4), RATE, "mp3")


# -- configuration ---------------------------------------------------------------


def test_shipped_profiles():
    paper = load_config("paper")
    assert paper["transform"]["sample_rate"] == 44100.0
    assert paper["transform"]["bins_per_octave"] == (8, 16, 32)
    assert paper["diffusion"]["num_steps"] == 51 and paper["diffusion"]["rho"] == 10.0
    assert paper["train"]["ema_decay"] == 0.9999 and paper["train"]["learning_rate"] == 1e-4
    assert paper.multires_spec().num_octaves == 9
    lows = [r.f_lo for r in paper.multires_spec().octave_table]
    assert lows[::3] == pytest.approx([43.06640625, 344.53125, 2756.25])
    toy = load_config("toy")
    assert toy.net_config().channels == (8, 16, 32)
    assert toy["transform"]["segment_length"] == 16384


def test_dump_parse_round_trip():
    cfg = load_config("paper")
    again = parse_config(cfg.dumps())
    assert again.values == cfg.values
    assert again.dumps() == cfg.dumps()


def test_overrides_and_typed_views():
    cfg = load_config("toy", ["train.learning_rate=3e-4", "diffusion.num_steps = 11"])
    assert cfg.trainer_config().learning_rate == 3e-4
    assert cfg.schedule().num_steps == 11
    assert cfg.schedule(5).num_steps == 5
    assert cfg.trainer_config(num_iterations=7).num_iterations == 7


@pytest.mark.parametrize("text,needle", [
    ("[bogus]\nx = 1\n", "bogus"),
    ("[train]\nlerning_rate = 1\n", "train.lerning_rate"),
    ("[train]\nbatch_size = two\n", "train.batch_size"),
    ("[net]\nzero_init = maybe\n", "net.zero_init"),
])
def test_schema_violations_name_the_key(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_semantic_validation():
    with pytest.raises(ConfigError):
        parse_config("[transform]\nbins_per_octave = 4, 8, 16\n")
    with pytest.raises(ConfigError):
        parse_config("[net]\nchannels = 8, 16\ndilated_convs = 2, 2, 2\n")
    with pytest.raises(ConfigError):
        load_config("toy", ["train.nope=1"])
    with pytest.raises(ConfigError):
        load_config("/nonexistent/file.cfg")


def test_describe_lists_every_key():
    text = describe()
    for section, keys in SCHEMA.items():
        assert f"[{section}]" in text
        assert all(f"  {k} = " in text for k in keys)


# -- checkpoints ------------------------------------------------------------------


def make_ckpt(rng):
    arr = lambda *s: rng.standard_normal(s).astype(np.float32)
    return Checkpoint(load_config("toy").dumps(), 42, {"a.w": arr(3, 2), "b": arr(4)},
                      {"a.w": arr(3, 2), "b": arr(4)}, 42, {"a.w": arr(3, 2), "b": arr(4)},
                      {"a.w": arr(3, 2), "b": rng.standard_normal(4)}, {"rng": {"seed": 1}})


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    ck = make_ckpt(np.random.default_rng(3))
    save_checkpoint(tmp_path / "c.bin", ck)
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.iteration == 42 and back.adam_step == 42 and back.meta == {"rng": {"seed": 1}}
    assert back.adam_v["b"].dtype == np.float64
    assert to_bytes(back) == (tmp_path / "c.bin").read_bytes()


def test_checkpoint_header_layout():
    data = to_bytes(make_ckpt(np.random.default_rng(4)))
    assert data[:8] == b"MRCQTCKP"
    assert struct.unpack_from("<I", data, 8)[0] == 1
    n = struct.unpack_from("<I", data, 12)[0]
    assert data[16:16 + n].decode().startswith("[transform]")


def test_corrupt_checkpoints():
    data = to_bytes(make_ckpt(np.random.default_rng(5)))
    with pytest.raises(FormatError, match="truncated"):
        from_bytes(data[:-3])
    with pytest.raises(FormatError, match="magic"):
        from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(FormatError, match="trailing"):
        from_bytes(data + b"\x00")


# -- data ---------------------------------------------------------------------------


def test_manifest_skips_short_and_mismatched_files(tmp_path, caplog):
    save_wav(tmp_path / "long.wav", np.zeros(2 * RATE), RATE)
    save_wav(tmp_path / "short.wav", np.zeros(RATE // 2), RATE)
    save_wav(tmp_path / "other_rate.wav", np.zeros(2 * RATE), RATE * 2)
    (tmp_path / "broken.wav").write_bytes(b"RIFF")
    with caplog.at_level(logging.WARNING):
        m = build_manifest(tmp_path, RATE, RATE)
    assert [e[0].split("/")[-1] for e in m.entries] == ["long.wav"]
    assert "shorter than one segment" in caplog.text
    assert "sample rate" in caplog.text and "broken.wav" in caplog.text


def test_empty_dataset_is_an_error(tmp_path):
    save_wav(tmp_path / "short.wav", np.zeros(10), RATE)
    with pytest.raises(DataError):
        build_manifest(tmp_path, RATE, RATE)
    with pytest.raises(DataError):
        ArrayDataset(np.zeros((0, 8)))
    with pytest.raises(ParameterError):
        DatasetManifest([("x", 1.0, RATE)], 8, normalization="rms")


def test_offsets_are_uniform(tmp_path):
    # a 12 s ramp at 10 Hz with 6 s segments: the first sample of a segment is its offset
    rate, seg = 10, 60
    ramp = np.arange(120) / 2**10
    save_wav(tmp_path / "ramp.wav", ramp, rate, "float32")
    m = build_manifest(tmp_path, seg, rate, normalization="none")
    rng = np.random.default_rng(6)
    offsets = np.array([next_batch(m, rng, 1)[0, 0] * 2**10 for _ in range(10_000)])
    assert set(np.unique(offsets)) <= set(range(61))
    # continuity-corrected comparison against the discrete uniform law on 0..60
    p = stats.kstest(offsets + np.random.default_rng(7).uniform(0, 1, offsets.size), "uniform",
                     args=(0, 61)).pvalue
    assert p > 0.01


def test_peak_normalisation_and_determinism(tmp_path):
    save_wav(tmp_path / "n.wav", 0.3 * np.random.default_rng(8).standard_normal(4 * RATE).clip(-3, 3) / 3,
             RATE, "float32")
    m = build_manifest(tmp_path, RATE, RATE)
    a = next_batch(m, np.random.default_rng(9), 3)
    b = next_batch(m, np.random.default_rng(9), 3)
    assert a.shape == (3, RATE)
    np.testing.assert_allclose(np.abs(a).max(axis=1), 1.0)
    assert a.tobytes() == b.tobytes()


def test_two_tone_corpus():
    c = two_tone_corpus(16, 16384, 16384, seed=1)
    assert c.shape == (16, 16384)
    rms = np.sqrt(np.mean(c**2, axis=1))
    assert np.all((rms > 0.3) & (rms < 0.7))
    spectrum = np.abs(np.fft.rfft(c, axis=1))
    peaks = np.argmax(spectrum, axis=1)  # 1 Hz bins
    assert np.all((peaks >= 1200) & (peaks <= 6000))
    assert np.array_equal(c, two_tone_corpus(16, 16384, 16384, seed=1))


# -- resuming ---------------------------------------------------------------------------


def test_resume_matches_uninterrupted_run(tmp_path):
    from mrcqtdiff.runner import checkpoint_name, train_run

    cfg = load_config("toy", ["train.checkpoint_every=2"])
    train_run(cfg, tmp_path / "full", num_iterations=4)
    train_run(cfg, tmp_path / "split", num_iterations=2)
    train_run(cfg, tmp_path / "split", resume=tmp_path / "split" / checkpoint_name(2), num_iterations=4)
    full_log = (tmp_path / "full" / "loss.log").read_text()
    assert len(full_log.splitlines()) == 4
    assert (tmp_path / "split" / "loss.log").read_text() == full_log
    last = checkpoint_name(4)
    assert (tmp_path / "split" / last).read_bytes() == (tmp_path / "full" / last).read_bytes()
