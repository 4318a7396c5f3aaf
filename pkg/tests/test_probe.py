import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_config
from mcrssl.autodiff import Tensor
from mcrssl.autodiff import functional as F
from mcrssl.data import Clip, Corpus
from mcrssl.probe import (
    LayerWeights,
    export_weight_analysis,
    export_weight_comparison,
    load_upstream,
    load_weight_analysis,
    probe_train,
    upstream_checksum,
    weight_entropy,
    weighted_sum,
)
from mcrssl.trainer import Trainer


@pytest.fixture(scope="module")
def upstream_path(tmp_path_factory):
    tr = Trainer(small_config())
    tr.run(4)
    path = tmp_path_factory.mktemp("up") / "up.ckpt"
    tr.save(path)
    return path


def test_weighted_sum_examples():
    assert np.array_equal(weighted_sum([[[1.0]]], [1.0]).data, [[1.0]])
    h1, h2 = np.ones((2, 3)), 3 * np.ones((2, 3))
    assert np.allclose(weighted_sum([h1, h2], [0.25, 0.75]).data, 2.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_weighted_sum_homogeneous(n_layers, c, seed):
    rng = np.random.default_rng(seed)
    hs = [rng.normal(size=(3, 2)) for _ in range(n_layers)]
    w = LayerWeights(rng.normal(size=n_layers))
    lhs = weighted_sum([c * h for h in hs], w).data
    assert np.allclose(lhs, c * weighted_sum(hs, w).data, rtol=1e-9, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=13))
def test_layer_weights_are_a_distribution(logits):
    w = LayerWeights(np.array(logits)).validate().weights
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-6


def test_weighted_sum_rejects_mismatch():
    with pytest.raises(ValueError):
        weighted_sum([np.ones(2), np.ones(2)], [1.0])
    with pytest.raises(ValueError):
        weighted_sum([np.ones(2), np.ones(3)], [0.5, 0.5])


def test_weighted_sum_passes_gradient_to_weights():
    w = Tensor(np.array([0.5, 0.5]), requires_grad=True, dtype=np.float64)
    F.sum(weighted_sum([np.ones(3), 2 * np.ones(3)], w)).backward()
    assert np.array_equal(w.grad, [3.0, 6.0])


def test_load_upstream_is_frozen(upstream_path):
    up = load_upstream(upstream_path)
    assert not any(p.requires_grad for p in up.params.values())
    teacher = load_upstream(upstream_path, "teacher")
    assert upstream_checksum(up.params) != upstream_checksum(teacher.params)


def test_probe_leaves_upstream_unchanged_and_weights_valid(upstream_path):
    up = load_upstream(upstream_path)
    before = upstream_checksum(up.params)
    res = probe_train(up, "voicing")
    assert upstream_checksum(up.params) == before
    w = res.weights.weights
    assert w.shape == (up.config.model.n_layers + 1,)
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-6
    assert 0 <= res.accuracy <= 1 and res.record()["kind"] == "probe"


def test_projection_task_is_learnable(upstream_path):
    res = probe_train(upstream_path, "projection")
    assert res.accuracy > res.chance + 0.2


def test_random_labels_near_chance(upstream_path):
    res = probe_train(upstream_path, "random")
    assert abs(res.accuracy - 0.5) <= 0.1


def test_probe_is_deterministic(upstream_path):
    a = probe_train(upstream_path, "tone_class")
    b = probe_train(upstream_path, "tone_class")
    assert a.accuracy == b.accuracy
    assert np.array_equal(a.weights.weights, b.weights.weights)


def test_probe_errors(upstream_path):
    up = load_upstream(upstream_path)
    one = Corpus([Clip(np.zeros(2400, dtype=np.float32), 0, np.ones(2400, dtype=bool))], 16000)
    with pytest.raises(ValueError, match="two clips"):
        probe_train(up, "voicing", corpus=one)
    with pytest.raises(ValueError, match="unknown probe task"):
        probe_train(up, "speaker")
    no_fe = dataclasses.replace(up.config.probe, include_feature_layer=False)
    with pytest.raises(ValueError, match="feature-encoder"):
        probe_train(up, "projection", probe_cfg=no_fe)


def test_weight_json_round_trip(tmp_path):
    weights = {"voicing": LayerWeights(np.array([0.3, -1.0, 2.0, 0.1, 0.0])),
               "tone_class": LayerWeights(np.array([1.0, 1.0, 1.0, 1.0, 1.0]))}
    path = tmp_path / "w.json"
    doc = export_weight_analysis(weights, path)
    raw = path.read_bytes()
    loaded = load_weight_analysis(path)
    assert loaded == doc
    assert set(loaded) == {"voicing", "tone_class"} and all(len(v) == 5 for v in loaded.values())
    export_weight_analysis(loaded, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == raw


def test_weight_json_rejects_invalid(tmp_path):
    with pytest.raises(ValueError):
        export_weight_analysis({"t": [0.5, 0.6]}, tmp_path / "w.json")
    (tmp_path / "bad.json").write_text(json.dumps({"t": [-0.5, 1.5]}), encoding="utf-8")
    with pytest.raises(ValueError):
        load_weight_analysis(tmp_path / "bad.json")


def test_comparison_entropy(tmp_path):
    n = 4
    doc = export_weight_comparison({"a": {"t": [1 / n] * n}, "b": {"t": [1.0, 0.0, 0.0, 0.0]}},
                                   tmp_path / "cmp.json")
    assert doc["a"]["t"]["entropy"] == pytest.approx(np.log(n), abs=1e-12)
    assert doc["b"]["t"]["entropy"] == 0.0
    assert weight_entropy([0.5, 0.5]) == pytest.approx(np.log(2))
