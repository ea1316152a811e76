import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cofm import container
from cofm.config import ConfigError, config_hash, describe_defaults, parse_config, parse_text, serialize_config
from cofm.sample import SamplerConfig
from cofm.train import TrainConfig, preset


def test_empty_config_gives_defaults():
    cfg = parse_text("")
    assert cfg == TrainConfig()
    assert cfg.lr == 1e-3 and cfg.batch_size == 1024
    assert parse_text("# only a comment\n\n", "sample") == SamplerConfig()


def test_round_trip():
    text = 'pairing = "emd"\nobjective.hj = "pushforward"\nobjective.k = 4\nmodel.hidden_width = 32\n'
    cfg = parse_text(text)
    assert cfg.pairing == "emd" and cfg.objective.hj == "pushforward" and cfg.model.hidden_width == 32
    again = parse_text(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


def test_bare_words_comments_and_coercion():
    cfg = parse_text("pairing = emd  # exact matching\nlr = 2e-3\nbatch_size = 64.0\nobjective.k = 3\n")
    assert cfg.pairing == "emd" and cfg.batch_size == 64 and isinstance(cfg.objective.k, float)


def test_unknown_key_named_with_line():
    with pytest.raises(ConfigError) as info:
        parse_text("lr = 1e-3\nlearning_rte = 0.1\n")
    assert info.value.key == "learning_rte" and info.value.line == 2
    assert "learning_rte" in str(info.value)


@pytest.mark.parametrize(
    "text, key",
    [
        ('batch_size = "big"', "batch_size"),
        ("lr = true", "lr"),
        ("batch_size = 1.5", "batch_size"),
        ("lr = [1, 2", "lr"),
    ],
)
def test_type_mismatch(text, key):
    with pytest.raises(ConfigError) as info:
        parse_text(text)
    assert info.value.key == key and info.value.line == 1


def test_repeated_key_and_bad_line():
    with pytest.raises(ConfigError, match="repeats line 1"):
        parse_text("lr = 1\nlr = 2\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_text("just words\n")


def test_semantic_validation_is_config_error():
    with pytest.raises(ConfigError, match="pairing"):
        parse_text('pairing = "greedy"')


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "absent.cfg")


def test_file_on_top_of_preset(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("iterations = 7\n")
    cfg = parse_config(p, base=preset("gauss2d"))
    assert cfg.iterations == 7 and cfg.pairing == "emd"


def test_hash_tracks_content():
    a, b = TrainConfig(), TrainConfig(seed=1)
    assert config_hash(a) == config_hash(TrainConfig()) != config_hash(b)
    assert "objective.k = 4.0" in describe_defaults("train")


@settings(max_examples=30, deadline=None)
@given(
    st.dictionaries(
        st.text("abcxyz/_", min_size=1, max_size=8),
        arrays(np.float64, st.tuples(st.integers(0, 3), st.integers(1, 3))),
        max_size=4,
    )
)
def test_container_round_trip(arrs):
    meta = {"k": [1, 2], "s": "x"}
    data = container.encode(meta, arrs)
    m, back = container.decode(data)
    assert m == meta and set(back) == set(arrs)
    for k, v in arrs.items():
        assert np.array_equal(back[k], v, equal_nan=True)
    assert container.encode(m, back) == data


def test_container_layout():
    data = container.encode({"a": 1}, {"w": np.array([1.5])})
    assert data[:4] == b"COFM"
    version, hlen = struct.unpack("<IQ", data[4:16])
    assert version == container.VERSION
    assert data[16 + hlen :] == np.array([1.5], dtype="<f8").tobytes()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:10],
        lambda d: d[:4] + struct.pack("<IQ", 99, 0) + d[16:],
        lambda d: d[:-4],
        lambda d: d[:16] + b"\xff" + d[17:],
    ],
)
def test_container_corruption_detected(mutate):
    data = container.encode({"a": 1}, {"w": np.arange(4.0)})
    with pytest.raises(container.ContainerError):
        container.decode(mutate(data))
