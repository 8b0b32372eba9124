import json

import numpy as np
import pytest

from incrlin import io
from incrlin.datamodel import EmbeddingTable, FeatureStore, WeightMatrix
from incrlin.errors import FormatError
from incrlin.synth import SynthSpec, generate


def _store(seed=0):
    return generate(SynthSpec(n_classes=4, dimension=5, rng_seed=seed,
                              support_per_class=3, query_per_class=2)).store


def test_feature_csv_round_trip_exact(tmp_path):
    store = _store()
    path = tmp_path / "features.csv"
    io.save_feature_store_csv(store, path)
    back = io.load_feature_store_csv(path)
    assert back.classes == store.classes
    for c in store.classes:
        np.testing.assert_array_equal(back.support(c), store.support(c))
        np.testing.assert_array_equal(back.query(c), store.query(c))


def test_feature_binary_round_trip_f32(tmp_path):
    store = _store(1)
    path = tmp_path / "features.fscf"
    io.save_feature_store_binary(store, path)
    back = io.load_feature_store_binary(path)
    assert back.classes == store.classes
    for c in store.classes:
        np.testing.assert_array_equal(back.support(c),
                                      store.support(c).astype("<f4").astype(np.float64))
        np.testing.assert_array_equal(back.query(c),
                                      store.query(c).astype("<f4").astype(np.float64))


def test_feature_loader_dispatches_on_magic(tmp_path):
    store = _store(2)
    csv_path = tmp_path / "a.data"
    bin_path = tmp_path / "b.data"
    io.save_feature_store_csv(store, csv_path)
    io.save_feature_store_binary(store, bin_path)
    assert io.load_feature_store(csv_path).classes == store.classes
    assert io.load_feature_store(bin_path).classes == store.classes


def test_feature_binary_bad_files(tmp_path):
    good = tmp_path / "good.fscf"
    io.save_feature_store_binary(_store(), good)
    blob = good.read_bytes()

    bad_magic = tmp_path / "bad_magic"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        io.load_feature_store_binary(bad_magic)

    bad_version = tmp_path / "bad_version"
    bad_version.write_bytes(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
    with pytest.raises(FormatError):
        io.load_feature_store_binary(bad_version)

    truncated = tmp_path / "truncated"
    truncated.write_bytes(blob[:-3])
    with pytest.raises(FormatError):
        io.load_feature_store_binary(truncated)


def test_feature_csv_bad_files(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("class_id,foo,f0\n0,support,1.0\n")
    with pytest.raises(FormatError):
        io.load_feature_store_csv(p)
    p.write_text("class_id,split,f0\n0,support\n")
    with pytest.raises(FormatError):
        io.load_feature_store_csv(p)
    p.write_text("class_id,split,f0\n0,train,1.0\n")
    with pytest.raises(FormatError):
        io.load_feature_store_csv(p)
    p.write_text("class_id,split,f0\n0,support,abc\n")
    with pytest.raises(FormatError):
        io.load_feature_store_csv(p)
    p.write_text("class_id,split,f0\n")
    with pytest.raises(FormatError):
        io.load_feature_store_csv(p)


def test_embeddings_round_trip(tmp_path):
    table = EmbeddingTable({3: np.array([0.5, -1.25]), 1: np.array([2.0, 4.0])})
    path = tmp_path / "emb.csv"
    io.save_embeddings_csv(table, path)
    back = io.load_embeddings_csv(path, source="description")
    assert back.source == "description"
    assert back.classes == (1, 3)
    np.testing.assert_array_equal(back.vector(3), table.vector(3))


def test_weights_round_trip(tmp_path):
    w = WeightMatrix([2, 0], np.array([[1.5, -2.0], [0.25, 3.0]]))
    path = tmp_path / "weights.csv"
    io.save_weights_csv(w, path)
    back = io.load_weights_csv(path)
    np.testing.assert_array_equal(back.row(2), w.row(2))
    np.testing.assert_array_equal(back.row(0), w.row(0))


def test_manifest_round_trip_and_registry(tmp_path):
    path = tmp_path / "manifest.json"
    labels = {0: "cat", 1: "dog", 2: "newt"}
    sessions = {0: 0, 1: 0, 2: 1}
    io.save_manifest(path, labels, sessions)
    labels2, sessions2 = io.load_manifest(path)
    assert labels2 == labels and sessions2 == sessions
    registry = io.registry_from_manifest(sessions2)
    assert registry.base_classes == (0, 1)
    assert registry.classes_in(1) == (2,)


def test_manifest_bad_files(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("not json")
    with pytest.raises(FormatError):
        io.load_manifest(p)
    p.write_text(json.dumps({"0": {"label": "x"}}))  # missing session
    with pytest.raises(FormatError):
        io.load_manifest(p)
    p.write_text(json.dumps({}))
    with pytest.raises(FormatError):
        io.load_manifest(p)
    with pytest.raises(FormatError):
        io.registry_from_manifest({0: 1})  # no session-0 classes


def test_csv_floats_survive_full_precision(tmp_path):
    # repr round-trips doubles exactly
    vals = np.array([[np.pi, np.e, 1e-300, -1.2345678901234567e10, 0.1]])
    store = FeatureStore(5, {0: vals}, {0: vals})
    path = tmp_path / "f.csv"
    io.save_feature_store_csv(store, path)
    back = io.load_feature_store_csv(path)
    np.testing.assert_array_equal(back.query(0), vals)
