import numpy as np
import pytest

import incrlin.protocol as protocol_mod
from incrlin.datamodel import (
    Batch,
    ClassRegistry,
    EmbeddingTable,
    FeatureStore,
    LabeledExample,
    RunConfig,
    SessionStream,
    WeightMatrix,
)
from incrlin.errors import ConfigError, DivergenceError, MissingExampleError, ValidationError
from incrlin.protocol import (
    confusion_matrix,
    delta_metric,
    predict,
    run_episode,
    run_multi_session,
    run_single_session,
    sample_episode,
    weighted_accuracy,
)
from incrlin.synth import SynthSpec, generate, incremental_split
from incrlin.trainer import train_base


# --- prediction and confusion ----------------------------------------------------

def test_predict_ties_break_to_lowest_class_id():
    w = WeightMatrix([4, 7, 2], np.zeros((3, 3)))
    preds = predict(w, np.ones((2, 3)), [4, 7, 2])
    np.testing.assert_array_equal(preds, [2, 2])


def test_predict_invariant_to_positive_logit_rescaling():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((5, 6))
    feats = rng.standard_normal((40, 6))
    a = predict(WeightMatrix(range(5), m), feats, range(5))
    b = predict(WeightMatrix(range(5), 3.7 * m), feats, range(5))
    np.testing.assert_array_equal(a, b)


def test_confusion_perfect_classifier_is_diagonal():
    w = WeightMatrix([0, 1, 2], 10.0 * np.eye(3))
    batch = Batch(np.eye(3), np.array([0, 1, 2]))
    conf = confusion_matrix(w, batch, [0, 1, 2])
    np.testing.assert_array_equal(conf.counts, np.eye(3, dtype=int))


def test_confusion_constant_predictor_single_column():
    m = np.zeros((3, 2))
    m[1] = [5.0, 5.0]
    w = WeightMatrix([0, 1, 2], m)
    batch = Batch(np.abs(np.random.default_rng(1).standard_normal((9, 2))),
                  np.array([0, 0, 0, 1, 1, 1, 2, 2, 2]))
    conf = confusion_matrix(w, batch, [0, 1, 2])
    assert conf.counts[:, 1].sum() == 9
    assert conf.counts[:, 0].sum() == conf.counts[:, 2].sum() == 0


def test_confusion_row_sums_and_total():
    rng = np.random.default_rng(2)
    w = WeightMatrix([0, 1], rng.standard_normal((2, 3)))
    labels = np.array([0] * 7 + [1] * 5)
    batch = Batch(rng.standard_normal((12, 3)), labels)
    conf = confusion_matrix(w, batch, [0, 1])
    np.testing.assert_array_equal(conf.row_sums(), [7, 5])
    assert conf.total == 12


def test_confusion_rejects_unknown_gold_class():
    w = WeightMatrix([0, 1], np.eye(2))
    with pytest.raises(ValidationError):
        confusion_matrix(w, Batch(np.eye(2), np.array([0, 9])), [0, 1])


def test_recency_fraction_matches_direct_count():
    rng = np.random.default_rng(3)
    w = WeightMatrix(range(6), rng.standard_normal((6, 4)))
    batch = Batch(rng.standard_normal((50, 4)), rng.integers(0, 6, size=50))
    conf = confusion_matrix(w, batch, range(6))
    recent = [4, 5]
    preds = predict(w, batch.features, range(6))
    direct = float(np.isin(preds, recent).mean())
    assert conf.fraction_predicted_in(recent) == pytest.approx(direct, abs=1e-12)


# --- metrics -----------------------------------------------------------------------

def test_weighted_accuracy_hand_example():
    assert weighted_accuracy(80.0, 50.0, 60, 5) == pytest.approx(77.6923, abs=1e-3)


def test_weighted_accuracy_bounds_and_degenerate():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, b = rng.uniform(0, 100, size=2)
        nb, nn = int(rng.integers(1, 50)), int(rng.integers(1, 50))
        w = weighted_accuracy(a, b, nb, nn)
        assert min(a, b) - 1e-9 <= w <= max(a, b) + 1e-9
    assert weighted_accuracy(66.0, None, 10, 0) == 66.0


def test_delta_metric_hand_example():
    assert delta_metric(80.0, 90.0, 60.0, 70.0) == -10.0


# --- episode sampling ----------------------------------------------------------------

def _episode_stores(seed=0, n_base=6, n_novel=8, d=4, support=6, query=5):
    rng = np.random.default_rng(seed)
    def mk(classes):
        sup = {c: rng.standard_normal((support, d)) for c in classes}
        qry = {c: rng.standard_normal((query, d)) for c in classes}
        return FeatureStore(d, sup, qry)
    return mk(range(n_base)), mk(range(100, 100 + n_novel))


def test_sample_episode_shapes_one_shot_five_way():
    base, novel = _episode_stores()
    ep = sample_episode(base, novel, n_way=5, k_shot=1, n_query=30,
                        rng=np.random.default_rng(5))
    assert len(ep.support) == 5
    assert len(ep.novel_classes) == 5
    assert len(ep.query) == 30
    assert len({ex.class_id for ex in ep.support}) == 5


def test_sample_episode_deterministic_under_seed():
    base, novel = _episode_stores()
    e1 = sample_episode(base, novel, 5, 2, 20, np.random.default_rng(9))
    e2 = sample_episode(base, novel, 5, 2, 20, np.random.default_rng(9))
    assert e1.novel_classes == e2.novel_classes
    np.testing.assert_array_equal(e1.query.features, e2.query.features)
    np.testing.assert_array_equal(e1.query.class_ids, e2.query.class_ids)
    for a, b in zip(e1.support, e2.support):
        assert a.class_id == b.class_id
        np.testing.assert_array_equal(a.feature, b.feature)


def test_sample_episode_insufficient_examples():
    base, novel = _episode_stores(n_novel=3)
    with pytest.raises(MissingExampleError):
        sample_episode(base, novel, n_way=5, k_shot=1, n_query=10,
                       rng=np.random.default_rng(0))
    base2, novel2 = _episode_stores(support=2)
    with pytest.raises(MissingExampleError):
        sample_episode(base2, novel2, n_way=5, k_shot=3, n_query=10,
                       rng=np.random.default_rng(0))


def test_query_groups_balanced_over_many_episodes():
    # base-group and novel-group query totals agree within 3%
    base, novel = _episode_stores()
    rng = np.random.default_rng(11)
    base_total = 0
    novel_total = 0
    for _ in range(2000):
        ep = sample_episode(base, novel, 5, 1, 20, rng)
        is_base = ep.query.class_ids < 100
        base_total += int(is_base.sum())
        novel_total += int((~is_base).sum())
    assert abs(base_total - novel_total) / (base_total + novel_total) < 0.03


# --- multi-session runner ---------------------------------------------------------------

def _bench_setup(seed=0, kind="finetune", memory=False):
    data = generate(SynthSpec(n_classes=20, dimension=8, rng_seed=seed,
                              support_per_class=8, query_per_class=6))
    registry = ClassRegistry(incremental_split(20, 8, 3))  # 8 base + 4 sessions x 3
    cfg = RunConfig(regularizer_kind=kind, alpha=1e-3, learning_rate=0.05,
                    max_epochs=60, rng_seed=seed, memory_enabled=memory)
    stream = SessionStream(data.store, registry, cfg, embeddings=data.embeddings, k_shot=5)
    return data, registry, cfg, stream


def test_run_multi_session_shapes_and_session_zero():
    data, registry, cfg, stream = _bench_setup()
    base_cfg = cfg.replace(regularizer_kind="finetune")
    bw, _ = train_base(data.store.restrict(registry.base_classes),
                       registry.base_classes, base_cfg)
    results = run_multi_session(stream, base_weights=bw)
    assert len(results) == registry.n_sessions
    assert results[0].acc_novel is None
    assert results[0].acc_weighted == results[0].acc_base
    for t, r in enumerate(results):
        assert r.session == t
        assert r.confusion.counts.shape == (len(registry.classes_up_to(t)),) * 2
        assert r.confusion.total == r.n_query
        if t >= 1:
            assert 0.0 <= r.acc_novel <= 100.0
            assert min(r.acc_base, r.acc_novel) - 1e-9 <= r.acc_weighted


def test_run_multi_session_prefix_independence():
    # truncating the stream to fewer sessions leaves earlier results identical
    data, registry, cfg, stream = _bench_setup(seed=3)
    bw, _ = train_base(data.store.restrict(registry.base_classes),
                       registry.base_classes, cfg)
    full = run_multi_session(stream, base_weights=bw)
    short_registry = ClassRegistry([registry.classes_in(t) for t in range(3)])
    short_stream = SessionStream(data.store, short_registry, cfg,
                                 embeddings=data.embeddings, k_shot=5)
    short = run_multi_session(short_stream, base_weights=bw)
    for a, b in zip(short, full[:3]):
        assert a.acc_weighted == b.acc_weighted
        assert a.acc_base == b.acc_base
        np.testing.assert_array_equal(a.confusion.counts, b.confusion.counts)


def test_run_multi_session_memory_buffer_grows_per_session():
    data, registry, cfg, stream = _bench_setup(kind="finetune", memory=True)
    bw, _ = train_base(data.store.restrict(registry.base_classes),
                       registry.base_classes, cfg)
    run_multi_session(stream, base_weights=bw)
    # after running all 4 incremental sessions the buffer archives sessions 0..3
    expected = sum(len(registry.classes_in(t)) for t in range(registry.last_session))
    assert len(stream.memory) == expected


def test_run_multi_session_semantic_requires_embeddings():
    data, registry, cfg, _ = _bench_setup(kind="semantic")
    stream = SessionStream(data.store, registry, cfg.replace(regularizer_kind="semantic"),
                           embeddings=None, k_shot=5)
    bw, _ = train_base(data.store.restrict(registry.base_classes),
                       registry.base_classes, cfg)
    with pytest.raises(ConfigError):
        run_multi_session(stream, base_weights=bw)


def test_run_multi_session_base_weight_coverage_checked():
    data, registry, cfg, stream = _bench_setup()
    bw = WeightMatrix([0, 1], np.ones((2, 8)))  # misses most base classes
    with pytest.raises(ValidationError):
        run_multi_session(stream, base_weights=bw)


def test_run_multi_session_protocol_shape_sixty_plus_eight_fives():
    # 60 base classes + 8 sessions of 5: the final session evaluates over all 100
    data = generate(SynthSpec(n_classes=100, dimension=8, rng_seed=1,
                              support_per_class=6, query_per_class=2))
    registry = ClassRegistry(incremental_split(100, 60, 5))
    cfg = RunConfig(regularizer_kind="finetune", alpha=1e-3, learning_rate=0.05,
                    max_epochs=30, rng_seed=1)
    stream = SessionStream(data.store, registry, cfg, k_shot=5)
    bw, _ = train_base(data.store.restrict(registry.base_classes),
                       registry.base_classes, cfg)
    results = run_multi_session(stream, base_weights=bw, collect_confusion=False)
    assert len(results) == 9
    assert len(registry.classes_up_to(8)) == 100
    assert results[8].n_query == 100 * 2
    assert set(results[8].per_class_accuracy) == set(range(100))


def test_run_multi_session_tolerates_empty_session():
    data = generate(SynthSpec(n_classes=12, dimension=6, rng_seed=2,
                              support_per_class=6, query_per_class=3))
    registry = ClassRegistry([tuple(range(8)), (), (8, 9, 10, 11)])
    cfg = RunConfig(regularizer_kind="finetune", alpha=1e-3, learning_rate=0.05,
                    max_epochs=30, rng_seed=2, memory_enabled=True)
    stream = SessionStream(data.store, registry, cfg, k_shot=3)
    bw, _ = train_base(data.store.restrict(registry.base_classes),
                       registry.base_classes, cfg)
    results = run_multi_session(stream, base_weights=bw)
    assert len(results) == 3
    assert results[1].acc_weighted == results[1].acc_base  # nothing novel yet
    assert len(stream.memory) == 8  # base archived once, empty session skipped


def test_run_multi_session_all_regularizer_kinds_run():
    for kind in ("subspace", "semantic", "linmap", "description"):
        data, registry, cfg, stream = _bench_setup(kind=kind)
        bw, _ = train_base(data.store.restrict(registry.base_classes),
                           registry.base_classes, cfg)
        results = run_multi_session(stream, base_weights=bw)
        assert len(results) == registry.n_sessions


# --- single-session runner ----------------------------------------------------------------

def _single_setup(seed=0):
    data = generate(SynthSpec(n_classes=16, dimension=8, rng_seed=seed,
                              support_per_class=8, query_per_class=6))
    base_ids = list(range(10))
    novel_ids = list(range(10, 16))
    base_store = data.store.restrict(base_ids)
    novel_store = data.store.restrict(novel_ids)
    cfg = RunConfig(regularizer_kind="finetune", alpha=1e-3, learning_rate=0.05,
                    max_epochs=40, rng_seed=7)
    bw, _ = train_base(base_store, base_ids, cfg)
    return base_store, novel_store, bw, cfg, data


def test_run_episode_perfect_classifier_has_zero_delta():
    # crafted episode where every query is its own class's indicator vector
    base_ids = [0, 1]
    w = WeightMatrix(base_ids, 10 * np.eye(2, 4))
    support = (LabeledExample(5, np.array([0.0, 0.0, 1.0, 0.0])),)
    query = Batch(np.eye(4)[[0, 1, 2]], np.array([0, 1, 5]))
    episode = protocol_mod.Episode((5,), support, query)
    cfg = RunConfig(regularizer_kind="finetune", alpha=0.0, beta_base=0.0,
                    learning_rate=0.1, max_epochs=30, rng_seed=0)
    result = run_episode(w, episode, cfg, np.random.default_rng(0))
    assert result.acc_base_joint == 100.0
    assert result.acc_novel_joint == 100.0
    assert result.delta == 0.0


def test_degenerate_one_class_dominance_pattern():
    # every query feature lies along class 5's support direction, so the
    # imprinted class-5 row wins every argmax: an always-one-class classifier.
    # joint novel accuracy then equals 1/n_way (only class 5's queries right).
    base_ids = [0, 1]
    w = WeightMatrix(base_ids, np.eye(2, 4))
    support = (LabeledExample(5, np.array([0.0, 0.0, 1.0, 0.0])),
               LabeledExample(6, np.array([0.0, 0.0, 0.0, 1.0])))
    feats = np.array([
        [0.1, 0.0, 1.0, 0.0],   # base 0 query
        [0.0, 0.1, 1.0, 0.0],   # base 1 query
        [0.0, 0.0, 1.0, 0.0],   # novel 5 query
        [0.0, 0.0, 1.0, 0.05],  # novel 6 query, still captured by row 5
    ])
    query = Batch(feats, np.array([0, 1, 5, 6]))
    episode = protocol_mod.Episode((5, 6), support, query)
    cfg = RunConfig(regularizer_kind="finetune", alpha=0.0, beta_base=0.0,
                    learning_rate=0.0, max_epochs=1, rng_seed=0)  # imprint only
    result = run_episode(w, episode, cfg, np.random.default_rng(0))
    n_way = 2
    assert result.acc_novel_joint == pytest.approx(100.0 / n_way)
    assert result.acc_novel_individual == pytest.approx(100.0 / n_way)
    assert result.acc_base_joint == pytest.approx(0.0)
    assert result.acc_base_individual == pytest.approx(100.0)
    assert result.delta == pytest.approx(-50.0)


def test_run_single_session_deterministic_and_job_invariant():
    base_store, novel_store, bw, cfg, _ = _single_setup()
    kw = dict(n_episodes=12, n_way=3, k_shot=1, n_query=16)
    r1 = run_single_session(base_store, novel_store, bw, cfg, **kw)
    r2 = run_single_session(base_store, novel_store, bw, cfg, **kw)
    r3 = run_single_session(base_store, novel_store, bw, cfg, jobs=3, **kw)
    assert r1.as_dict() == r2.as_dict() == r3.as_dict()
    assert r1.acc.n == 12 and r1.n_failed == 0


def test_run_single_session_counts_failed_episodes():
    base_store, novel_store, bw, cfg, _ = _single_setup()
    real = protocol_mod.run_episode
    calls = {"i": -1}

    def flaky(*args, **kwargs):
        calls["i"] += 1
        if calls["i"] == 2:
            raise DivergenceError("synthetic failure")
        return real(*args, **kwargs)

    protocol_mod.run_episode = flaky
    try:
        result = run_single_session(base_store, novel_store, bw, cfg,
                                    n_episodes=6, n_way=3, k_shot=1, n_query=12)
    finally:
        protocol_mod.run_episode = real
    assert result.n_failed == 1
    assert result.acc.n == 5


def test_run_single_session_rejects_memory():
    base_store, novel_store, bw, cfg, _ = _single_setup()
    with pytest.raises(ConfigError):
        run_single_session(base_store, novel_store, bw,
                           cfg.replace(memory_enabled=True), n_episodes=2)


def test_run_single_session_semantic_needs_embeddings():
    base_store, novel_store, bw, cfg, _ = _single_setup()
    with pytest.raises(ConfigError):
        run_single_session(base_store, novel_store, bw,
                           cfg.replace(regularizer_kind="semantic"), n_episodes=2)


def test_run_single_session_semantic_and_linmap():
    base_store, novel_store, bw, cfg, data = _single_setup()
    for kind in ("semantic", "linmap"):
        result = run_single_session(base_store, novel_store, bw,
                                    cfg.replace(regularizer_kind=kind, gamma=0.1, tau=0.5),
                                    n_episodes=4, n_way=3, k_shot=1, n_query=12,
                                    embeddings=data.embeddings)
        assert result.acc.n == 4
