import json
import wave

import numpy as np
import pytest

from mcrssl.config import Config, ConfigError, config_from_dict, load_config
from mcrssl.data import DataSource, SyntheticSpec, load_corpus, read_wav, synth_clip, wav_corpus, write_wav


# -- config --------------------------------------------------------------------

def test_defaults_round_trip():
    cfg = Config()
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_unknown_key_named():
    d = Config().to_dict()
    d["train"]["learning_rate"] = 1.0
    with pytest.raises(ConfigError) as exc:
        config_from_dict(d)
    assert exc.value.key == "train.learning_rate"


def test_wrong_type_named():
    d = Config().to_dict()
    d["train"]["batch_size"] = "8"
    with pytest.raises(ConfigError, match="train.batch_size"):
        config_from_dict(d)


def test_wav_dir_without_path_names_missing_key():
    d = Config().to_dict()
    d["data"]["kind"] = "wav-dir"
    with pytest.raises(ConfigError) as exc:
        config_from_dict(d)
    assert exc.value.key == "data.path"


@pytest.mark.parametrize("key, value", [
    ("train.mode", "r-drop"),
    ("teacher.target_norm", "batch"),
    ("objective.reduction", "max"),
    ("objective.lambda_mcr", -1.0),
    ("teacher.target_top_k", 99),
])
def test_invalid_choices(key, value):
    d = Config().to_dict()
    sec, name = key.split(".")
    d[sec][name] = value
    with pytest.raises(ConfigError, match=key):
        config_from_dict(d)


def test_invalid_json_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(p)


def test_partial_file_uses_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"seed": 4}}), encoding="utf-8")
    cfg = load_config(p)
    assert cfg.train.seed == 4 and cfg.model.n_layers == Config().model.n_layers


# -- data ----------------------------------------------------------------------

def test_synthetic_clip_is_pure_function_of_index():
    spec = SyntheticSpec(n_clips=4, clip_len_samples=800)
    a, b = synth_clip(spec, 2), synth_clip(spec, 2)
    assert np.array_equal(a.waveform, b.waveform) and a.label == b.label == 2
    assert a.waveform.dtype == np.float32
    assert not np.array_equal(a.waveform, synth_clip(spec, 3).waveform)


def test_synthetic_has_voiced_and_silent_parts():
    clip = synth_clip(SyntheticSpec(clip_len_samples=16000), 0)
    assert 0 < clip.voiced.mean() < 1
    assert np.abs(clip.waveform[clip.voiced]).mean() > 5 * np.abs(clip.waveform[~clip.voiced]).mean()


def test_wav_round_trip(tmp_path):
    x = (np.arange(-10, 10) / 32.0).astype(np.float32)
    write_wav(tmp_path / "a.wav", x, 16000)
    y, rate = read_wav(tmp_path / "a.wav")
    assert rate == 16000 and np.array_equal(x, y)


def _raw_wav(path, channels, width, rate=16000):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(bytes(8 * channels * width))


def test_stereo_and_8bit_rejected(tmp_path):
    _raw_wav(tmp_path / "s.wav", 2, 2)
    _raw_wav(tmp_path / "b.wav", 1, 1)
    with pytest.raises(ValueError, match="mono"):
        read_wav(tmp_path / "s.wav")
    with pytest.raises(ValueError, match="16-bit"):
        read_wav(tmp_path / "b.wav")


def test_wav_corpus_rates(tmp_path):
    write_wav(tmp_path / "a.wav", np.zeros(400), 16000)
    write_wav(tmp_path / "b.wav", np.zeros(400), 8000)
    with pytest.raises(ValueError, match="mixed"):
        wav_corpus(tmp_path)
    corpus = wav_corpus(tmp_path, ["a.wav"])
    assert len(corpus) == 1 and corpus.sample_rate == 16000


def test_load_corpus_dispatch(tmp_path):
    write_wav(tmp_path / "a.wav", np.zeros(400), 16000)
    assert len(load_corpus(DataSource(kind="wav-dir", path=str(tmp_path)))) == 1
    assert len(load_corpus(DataSource(synthetic=SyntheticSpec(n_clips=3, clip_len_samples=400)))) == 3
