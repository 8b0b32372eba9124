"""Evaluation protocols: the multi-session incremental run and the episodic
single-session run, plus all accuracy / confusion / interference metrics.

Accuracies are percentages in [0, 100] throughout.
"""
from __future__ import annotations

import dataclasses
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .datamodel import (
    Batch,
    ClassRegistry,
    EmbeddingTable,
    FeatureStore,
    LabeledExample,
    MemoryBuffer,
    RunConfig,
    SessionStream,
    WeightMatrix,
    WeightSnapshots,
    update_memory,
)
from .errors import ConfigError, EngineError, MissingExampleError, ValidationError
from .linalg import fit_least_squares, orthonormal_basis
from .objectives import Objective, semantic_targets
from .trainer import fine_tune, init_novel_weights, train_base


def predict(weights: WeightMatrix, features: np.ndarray,
            active_classes: Iterable[int]) -> np.ndarray:
    """Top-1 class ids under bias-free logits; ties go to the lowest class id."""
    order = sorted(set(active_classes))
    m = weights.subset(order)
    logits = np.asarray(features, dtype=np.float64) @ m.T
    return np.array(order, dtype=np.int64)[np.argmax(logits, axis=1)]


def accuracy(golds: np.ndarray, preds: np.ndarray) -> float:
    """Percent agreement."""
    golds = np.asarray(golds)
    if golds.size == 0:
        raise MissingExampleError("no examples to score")
    return 100.0 * float(np.mean(golds == np.asarray(preds)))


@dataclasses.dataclass(frozen=True, eq=False)
class Confusion:
    """Count matrix indexed (gold, predicted) over ascending class ids."""

    class_ids: tuple[int, ...]
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def fraction_predicted_in(self, classes: Iterable[int]) -> float:
        """Share of all predictions landing in the given classes."""
        cols = [self.class_ids.index(c) for c in sorted(set(classes))]
        return float(self.counts[:, cols].sum()) / max(1, self.total)


def confusion_matrix(weights: WeightMatrix, query, active_classes: Iterable[int]) -> Confusion:
    """Gold-versus-predicted counts for the query set under the active classes."""
    batch = query if isinstance(query, Batch) else Batch.from_examples(list(query))
    order = sorted(set(active_classes))
    index = {c: i for i, c in enumerate(order)}
    unknown = sorted(set(int(c) for c in batch.class_ids) - set(order))
    if unknown:
        raise ValidationError(f"query classes {unknown} are not active")
    preds = predict(weights, batch.features, order)
    k = len(order)
    counts = np.zeros((k, k), dtype=np.int64)
    gold_pos = np.array([index[int(c)] for c in batch.class_ids])
    pred_pos = np.array([index[int(c)] for c in preds])
    np.add.at(counts, (gold_pos, pred_pos), 1)
    return Confusion(tuple(order), counts)


def weighted_accuracy(acc_base: float, acc_novel: float | None,
                      n_base_classes: int, n_novel_classes: int) -> float:
    """Base and novel group accuracies combined by group class counts."""
    if n_novel_classes == 0 or acc_novel is None:
        return acc_base
    total = n_base_classes + n_novel_classes
    return (n_base_classes * acc_base + n_novel_classes * acc_novel) / total


@dataclasses.dataclass(frozen=True, eq=False)
class SessionResult:
    session: int
    acc_base: float
    acc_novel: float | None
    acc_weighted: float
    per_class_accuracy: dict[int, float]
    confusion: Confusion | None
    n_query: int

    def as_dict(self) -> dict:
        out = {
            "session": self.session,
            "acc_base": self.acc_base,
            "acc_novel": self.acc_novel,
            "acc_weighted": self.acc_weighted,
            "per_class_accuracy": {str(c): v for c, v in self.per_class_accuracy.items()},
            "n_query": self.n_query,
        }
        if self.confusion is not None:
            out["confusion"] = {
                "class_ids": list(self.confusion.class_ids),
                "counts": self.confusion.counts.tolist(),
            }
        return out


def _evaluate_session(weights: WeightMatrix, query: Batch, registry: ClassRegistry,
                      session: int, collect_confusion: bool) -> SessionResult:
    active = registry.classes_up_to(session)
    base = set(registry.base_classes)
    golds = query.class_ids
    preds = predict(weights, query.features, active)

    base_mask = np.isin(golds, sorted(base))
    acc_base = accuracy(golds[base_mask], preds[base_mask])
    novel_classes = [c for c in active if c not in base]
    acc_novel = None
    if novel_classes and (~base_mask).any():
        acc_novel = accuracy(golds[~base_mask], preds[~base_mask])
    acc_w = weighted_accuracy(acc_base, acc_novel, len(base), len(novel_classes))

    per_class: dict[int, float] = {}
    for c in active:
        mask = golds == c
        if mask.any():
            per_class[c] = accuracy(golds[mask], preds[mask])
    conf = confusion_matrix(weights, query, active) if collect_confusion else None
    return SessionResult(session, acc_base, acc_novel, acc_w, per_class, conf, len(query))


def _session_targets(kind: str, novel: Sequence[int], base: Sequence[int],
                     snapshot0: WeightMatrix, embeddings: EmbeddingTable | None,
                     linear_map, tau: float):
    if kind in ("semantic", "description"):
        if embeddings is None:
            raise ConfigError(f"{kind} regularization needs an embedding table")
        return semantic_targets(embeddings.subset(novel), embeddings.subset(base),
                                snapshot0, tau)
    if kind == "linmap":
        if embeddings is None:
            raise ConfigError("linear-map regularization needs an embedding table")
        return {c: linear_map.apply(embeddings.vector(c)) for c in novel}
    return None


def run_multi_session(stream: SessionStream, config: RunConfig | None = None,
                      base_weights: WeightMatrix | None = None,
                      collect_confusion: bool = True,
                      on_session_end=None) -> list[SessionResult]:
    """Run the incremental protocol over every session of the stream.

    Session 0 scores the base weights (ingested, or trained here on the base
    support pool); each later session fine-tunes on its support set (plus the
    memory buffer when enabled) and is scored on the query pools of every
    class seen so far. ``on_session_end(t, weights)`` is called with a frozen
    weight copy after each session, for weight export.
    """
    config = stream.config if config is None else config
    registry = stream.registry
    rng = np.random.default_rng(config.rng_seed)

    if base_weights is None:
        base_weights, _ = train_base(stream.store, registry.base_classes, config, rng=rng)
    base = sorted(registry.base_classes)
    missing = [c for c in base if c not in base_weights]
    if missing:
        raise ValidationError(f"base weights lack rows for classes {missing}")
    snapshot0 = WeightMatrix(base, base_weights.subset(base))

    snapshots = WeightSnapshots()
    snapshots.store(0, snapshot0)
    results = [_evaluate_session(snapshot0, stream.query_batch_up_to(0), registry, 0,
                                 collect_confusion)]
    if on_session_end is not None:
        on_session_end(0, snapshot0.frozen())

    kind = config.regularizer_kind
    basis = None
    linear_map = None
    if kind == "subspace":
        basis = orthonormal_basis([snapshot0.row(c) for c in base])
    elif kind == "linmap":
        if stream.embeddings is None:
            raise ConfigError("linear-map regularization needs an embedding table")
        linear_map = fit_least_squares([stream.embeddings.vector(c) for c in base],
                                       [snapshot0.row(c) for c in base])
    base_norms = snapshot0.norms()

    weights = snapshot0.copy()
    stream.memory = MemoryBuffer.empty()
    for t in range(1, registry.n_sessions):
        if config.memory_enabled and registry.classes_in(t - 1):
            stream.memory = update_memory(stream.memory, stream.support_examples(t - 1),
                                          rng, expected_classes=registry.classes_in(t - 1))
        novel = registry.classes_in(t)
        if not novel:
            snapshots.store(t, weights)
            results.append(_evaluate_session(weights, stream.query_batch_up_to(t),
                                             registry, t, collect_confusion))
            if on_session_end is not None:
                on_session_end(t, weights.frozen())
            continue
        support = stream.support_examples(t)
        weights = weights.with_rows(
            init_novel_weights(support, base_norms, rng, classes=novel))
        targets = _session_targets(kind, novel, base, snapshot0, stream.embeddings,
                                   linear_map, config.tau)
        objective = Objective(config, registry, t, snapshots, basis=basis, targets=targets)
        data = (list(support) + list(stream.memory.examples)
                if config.memory_enabled else support)
        weights, _ = fine_tune(weights, objective, data, config, rng)
        snapshots.store(t, weights)
        results.append(_evaluate_session(weights, stream.query_batch_up_to(t),
                                         registry, t, collect_confusion))
        if on_session_end is not None:
            on_session_end(t, weights.frozen())
    return results


# --- single-session episodes ---------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class Episode:
    """One sampled incremental dataset: novel support plus a mixed query set."""

    novel_classes: tuple[int, ...]
    support: tuple[LabeledExample, ...]
    query: Batch


def sample_episode(base_store: FeatureStore, novel_store: FeatureStore,
                   n_way: int = 5, k_shot: int = 1, n_query: int = 50,
                   rng: np.random.Generator | None = None) -> Episode:
    """Sample an episode: ``n_way`` novel classes with ``k_shot`` support
    examples each, and queries drawn from the base and novel groups with equal
    probability (then uniformly within the group)."""
    if rng is None:
        rng = np.random.default_rng()
    if len(novel_store.classes) < n_way:
        raise MissingExampleError(
            f"novel pool has {len(novel_store.classes)} classes, need {n_way}")
    if n_query < 1:
        raise ValidationError(f"n_query must be >= 1, got {n_query}")
    chosen = np.sort(rng.choice(np.array(novel_store.classes), size=n_way, replace=False))
    support: list[LabeledExample] = []
    for c in chosen:
        pool = novel_store.support(int(c))
        if pool.shape[0] < k_shot or novel_store.query_count(int(c)) < 1:
            raise MissingExampleError(
                f"class {int(c)} lacks {k_shot} support + query examples")
        idx = rng.choice(pool.shape[0], size=k_shot, replace=False)
        support.extend(LabeledExample(int(c), pool[i]) for i in idx)

    base_classes = base_store.classes
    groups = rng.integers(0, 2, size=n_query)
    base_pick = rng.integers(0, len(base_classes), size=n_query)
    novel_pick = rng.integers(0, n_way, size=n_query)
    u = rng.random(n_query)
    feats = np.empty((n_query, base_store.dimension))
    labels = np.empty(n_query, dtype=np.int64)
    for i in range(n_query):
        if groups[i] == 0:
            c = base_classes[base_pick[i]]
            pool = base_store.query(c)
        else:
            c = int(chosen[novel_pick[i]])
            pool = novel_store.query(c)
        feats[i] = pool[int(u[i] * pool.shape[0])]
        labels[i] = c
    return Episode(tuple(int(c) for c in chosen), tuple(support), Batch(feats, labels))


def delta_metric(base_joint: float, base_individual: float,
                 novel_joint: float, novel_individual: float) -> float:
    """Interference gap: joint minus individual accuracy, averaged over groups."""
    return 0.5 * ((base_joint - base_individual) + (novel_joint - novel_individual))


@dataclasses.dataclass(frozen=True)
class EpisodeResult:
    acc_base_joint: float
    acc_novel_joint: float
    acc_joint_mean: float
    acc_base_individual: float
    acc_novel_individual: float
    delta: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def run_episode(base_weights: WeightMatrix, episode: Episode, config: RunConfig,
                rng: np.random.Generator, basis=None,
                embeddings: EmbeddingTable | None = None,
                linear_map=None) -> EpisodeResult:
    """Fine-tune fresh weights on one episode and score joint vs individual."""
    base = sorted(base_weights.class_ids)
    registry = ClassRegistry([base, episode.novel_classes])
    snapshots = WeightSnapshots()
    snapshot0 = WeightMatrix(base, base_weights.subset(base))
    snapshots.store(0, snapshot0)

    weights = snapshot0.copy().with_rows(
        init_novel_weights(episode.support, snapshot0.norms(), rng,
                           classes=episode.novel_classes))
    targets = _session_targets(config.regularizer_kind, list(episode.novel_classes),
                               base, snapshot0, embeddings, linear_map, config.tau)
    objective = Objective(config, registry, 1, snapshots, basis=basis, targets=targets)
    weights, _ = fine_tune(weights, objective, episode.support, config, rng)

    q = episode.query
    base_mask = np.isin(q.class_ids, base)
    if not base_mask.any() or base_mask.all():
        raise MissingExampleError("episode query set misses one of the groups")
    all_classes = registry.classes_up_to(1)
    preds = predict(weights, q.features, all_classes)
    bj = accuracy(q.class_ids[base_mask], preds[base_mask])
    nj = accuracy(q.class_ids[~base_mask], preds[~base_mask])
    preds_b = predict(weights, q.features[base_mask], base)
    bi = accuracy(q.class_ids[base_mask], preds_b)
    preds_n = predict(weights, q.features[~base_mask], episode.novel_classes)
    ni = accuracy(q.class_ids[~base_mask], preds_n)
    return EpisodeResult(bj, nj, 0.5 * (bj + nj), bi, ni, delta_metric(bj, bi, nj, ni))


@dataclasses.dataclass(frozen=True)
class AggregateStat:
    mean: float
    ci95: float
    n: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _aggregate(values: Sequence[float]) -> AggregateStat:
    arr = np.asarray(values, dtype=np.float64)
    n = arr.size
    ci = 1.96 * float(np.std(arr, ddof=1)) / np.sqrt(n) if n > 1 else 0.0
    return AggregateStat(float(arr.mean()), ci, n)


@dataclasses.dataclass(frozen=True, eq=False)
class SingleSessionResult:
    n_episodes: int
    n_failed: int
    acc: AggregateStat
    acc_base_joint: AggregateStat
    acc_novel_joint: AggregateStat
    acc_base_individual: AggregateStat
    acc_novel_individual: AggregateStat
    delta: AggregateStat
    abs_delta: float
    episodes: tuple[EpisodeResult, ...] | None = None

    def as_dict(self, include_episodes: bool = False) -> dict:
        out = {
            "n_episodes": self.n_episodes,
            "n_failed": self.n_failed,
            "acc": self.acc.as_dict(),
            "acc_base_joint": self.acc_base_joint.as_dict(),
            "acc_novel_joint": self.acc_novel_joint.as_dict(),
            "acc_base_individual": self.acc_base_individual.as_dict(),
            "acc_novel_individual": self.acc_novel_individual.as_dict(),
            "delta": self.delta.as_dict(),
            "abs_delta": self.abs_delta,
        }
        if include_episodes and self.episodes is not None:
            out["episodes"] = [e.as_dict() for e in self.episodes]
        return out


def run_single_session(base_store: FeatureStore, novel_store: FeatureStore,
                       base_weights: WeightMatrix, config: RunConfig,
                       n_episodes: int = 2000, n_way: int = 5, k_shot: int = 1,
                       n_query: int = 50, embeddings: EmbeddingTable | None = None,
                       jobs: int = 1, keep_episodes: bool = False) -> SingleSessionResult:
    """Average episodic evaluation: every episode restarts from the base
    weights, fine-tunes on its own support set, and is scored jointly and per
    group. Failed episodes are excluded from the aggregates but counted."""
    if config.memory_enabled:
        raise ConfigError("memory replay applies to the multi-session protocol only")
    if n_episodes < 1:
        raise ValidationError(f"n_episodes must be >= 1, got {n_episodes}")
    base = sorted(base_weights.class_ids)
    missing = [c for c in base if c not in base_store.classes]
    if missing:
        raise MissingExampleError(f"base classes {missing} have no query pool")

    kind = config.regularizer_kind
    basis = None
    linear_map = None
    snapshot0 = WeightMatrix(base, base_weights.subset(base))
    if kind == "subspace":
        basis = orthonormal_basis([snapshot0.row(c) for c in base])
    elif kind in ("semantic", "description"):
        if embeddings is None:
            raise ConfigError(f"{kind} regularization needs an embedding table")
    elif kind == "linmap":
        if embeddings is None:
            raise ConfigError("linear-map regularization needs an embedding table")
        linear_map = fit_least_squares([embeddings.vector(c) for c in base],
                                       [snapshot0.row(c) for c in base])

    def one(i: int):
        ss = np.random.SeedSequence(entropy=(config.rng_seed, i))
        rng_sample, rng_train = (np.random.default_rng(s) for s in ss.spawn(2))
        try:
            episode = sample_episode(base_store, novel_store, n_way=n_way,
                                     k_shot=k_shot, n_query=n_query, rng=rng_sample)
            return run_episode(snapshot0, episode, config, rng_train, basis=basis,
                               embeddings=embeddings, linear_map=linear_map)
        except EngineError:
            return None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one, range(n_episodes)))
    else:
        outcomes = [one(i) for i in range(n_episodes)]

    ok = [r for r in outcomes if r is not None]
    n_failed = n_episodes - len(ok)
    if not ok:
        raise EngineError(f"all {n_episodes} episodes failed")
    agg = SingleSessionResult(
        n_episodes=n_episodes,
        n_failed=n_failed,
        acc=_aggregate([r.acc_joint_mean for r in ok]),
        acc_base_joint=_aggregate([r.acc_base_joint for r in ok]),
        acc_novel_joint=_aggregate([r.acc_novel_joint for r in ok]),
        acc_base_individual=_aggregate([r.acc_base_individual for r in ok]),
        acc_novel_individual=_aggregate([r.acc_novel_individual for r in ok]),
        delta=_aggregate([r.delta for r in ok]),
        abs_delta=abs(_aggregate([r.delta for r in ok]).mean),
        episodes=tuple(ok) if keep_episodes else None,
    )
    return agg
