"""Domain types: feature stores, class registries, weights, embeddings, memory.

Feature vectors are plain 1-D float64 numpy arrays; ``as_feature`` is the
single place they get validated. Everything that survives a session boundary
(registries, snapshots, embedding tables) is immutable after construction.
"""
from __future__ import annotations

import dataclasses
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatchError,
    DisjointClassError,
    MissingEmbeddingError,
    MissingExampleError,
    MissingSnapshotError,
    ValidationError,
)

REGULARIZER_KINDS = ("finetune", "subspace", "semantic", "linmap", "description")

_KIND_ALIASES = {
    "fine-tune": "finetune",
    "fine_tune": "finetune",
    "linear-map": "linmap",
    "linear_map": "linmap",
}


def normalize_kind(kind: str) -> str:
    """Map spelling variants of a regularizer kind onto its canonical token."""
    k = _KIND_ALIASES.get(kind.strip().lower(), kind.strip().lower())
    if k not in REGULARIZER_KINDS:
        raise ConfigError(f"unknown regularizer kind {kind!r}; expected one of {REGULARIZER_KINDS}")
    return k


def as_feature(values, dimension: int | None = None) -> np.ndarray:
    """Coerce to a finite 1-D float64 vector, optionally checking its length."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValidationError(f"feature must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("feature contains non-finite entries")
    if dimension is not None and v.shape[0] != dimension:
        raise DimensionMismatchError(f"feature has dimension {v.shape[0]}, expected {dimension}")
    return v


@dataclasses.dataclass(frozen=True, eq=False)
class LabeledExample:
    """One (class_id, feature) pair."""

    class_id: int
    feature: np.ndarray

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id must be non-negative, got {self.class_id}")
        object.__setattr__(self, "feature", as_feature(self.feature))


@dataclasses.dataclass(frozen=True, eq=False)
class Batch:
    """Stacked examples: features (n, d) and class ids (n,)."""

    features: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        c = np.asarray(self.class_ids, dtype=np.int64)
        if f.ndim != 2 or c.ndim != 1 or f.shape[0] != c.shape[0]:
            raise ValidationError(f"inconsistent batch shapes {f.shape} / {c.shape}")
        if f.shape[0] == 0:
            raise ValidationError("batch is empty")
        if not np.all(np.isfinite(f)):
            raise ValidationError("batch features contain non-finite entries")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "class_ids", c)

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample]) -> "Batch":
        if len(examples) == 0:
            raise ValidationError("batch is empty")
        feats = np.stack([ex.feature for ex in examples])
        ids = np.array([ex.class_id for ex in examples], dtype=np.int64)
        return cls(feats, ids)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dimension(self) -> int:
        return self.features.shape[1]


def coerce_batch(data) -> Batch:
    """Accept a Batch or a sequence of LabeledExample."""
    if isinstance(data, Batch):
        return data
    return Batch.from_examples(list(data))


class FeatureStore:
    """Class-labeled feature vectors split into a support pool and a query pool.

    Every class must expose at least one query example; support pools may be
    empty (e.g. a store used only for evaluation). Arrays are copied in and
    frozen, so stores are safe to share.
    """

    def __init__(self, dimension: int, support: Mapping[int, np.ndarray],
                 query: Mapping[int, np.ndarray]):
        if dimension <= 0:
            raise ValidationError(f"dimension must be positive, got {dimension}")
        self._dimension = int(dimension)
        self._support: dict[int, np.ndarray] = {}
        self._query: dict[int, np.ndarray] = {}
        for cid, rows in query.items():
            self._query[int(cid)] = self._freeze(rows, cid)
        for cid, rows in support.items():
            cid = int(cid)
            if cid not in self._query:
                raise MissingExampleError(f"class {cid} has support examples but no query examples")
            self._support[cid] = self._freeze(rows, cid)
        for cid, rows in self._query.items():
            if rows.shape[0] < 1:
                raise MissingExampleError(f"class {cid} has no query examples")
            if cid not in self._support:
                self._support[cid] = self._freeze(np.empty((0, self._dimension)), cid)
        if not self._query:
            raise ValidationError("feature store has no classes")
        self._classes = tuple(sorted(self._query))

    def _freeze(self, rows, cid) -> np.ndarray:
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"class {cid}: expected a (n, d) array, got shape {arr.shape}")
        if arr.shape[1] != self._dimension:
            raise DimensionMismatchError(
                f"class {cid}: dimension {arr.shape[1]} != store dimension {self._dimension}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"class {cid}: non-finite feature entries")
        arr = arr.copy()
        arr.setflags(write=False)
        return arr

    @classmethod
    def from_rows(cls, dimension: int, rows: Iterable[tuple[int, str, np.ndarray]]) -> "FeatureStore":
        """Build from (class_id, split, feature) triples; split is 'support' or 'query'."""
        support: dict[int, list] = {}
        query: dict[int, list] = {}
        for cid, split, feat in rows:
            if split == "support":
                support.setdefault(int(cid), []).append(feat)
            elif split == "query":
                query.setdefault(int(cid), []).append(feat)
            else:
                raise ValidationError(f"unknown split tag {split!r}")
        sup = {c: np.stack(v) for c, v in support.items()}
        qry = {c: np.stack(v) for c, v in query.items()}
        return cls(dimension, sup, qry)

    @property
    def dimension(self) -> int:
        return self._dimension

    @property
    def classes(self) -> tuple[int, ...]:
        return self._classes

    def support(self, class_id: int) -> np.ndarray:
        try:
            return self._support[class_id]
        except KeyError:
            raise MissingExampleError(f"class {class_id} not in store") from None

    def query(self, class_id: int) -> np.ndarray:
        try:
            return self._query[class_id]
        except KeyError:
            raise MissingExampleError(f"class {class_id} not in store") from None

    def support_count(self, class_id: int) -> int:
        return self.support(class_id).shape[0]

    def query_count(self, class_id: int) -> int:
        return self.query(class_id).shape[0]

    def restrict(self, class_ids: Iterable[int]) -> "FeatureStore":
        """Sub-store containing only the given classes."""
        ids = sorted(set(int(c) for c in class_ids))
        missing = [c for c in ids if c not in self._query]
        if missing:
            raise MissingExampleError(f"classes {missing} not in store")
        return FeatureStore(self._dimension,
                            {c: self._support[c] for c in ids},
                            {c: self._query[c] for c in ids})

    def support_examples(self, class_ids: Iterable[int], k: int | None = None) -> list[LabeledExample]:
        """Support examples for the given classes; first ``k`` per class if set."""
        out: list[LabeledExample] = []
        for c in sorted(set(class_ids)):
            rows = self.support(c)
            if k is not None:
                if rows.shape[0] < k:
                    raise MissingExampleError(
                        f"class {c} has {rows.shape[0]} support examples, need {k}")
                rows = rows[:k]
            out.extend(LabeledExample(c, row) for row in rows)
        if not out:
            raise MissingExampleError("no support examples for the requested classes")
        return out

    def query_batch(self, class_ids: Iterable[int]) -> Batch:
        """All query examples of the given classes, stacked in ascending class order."""
        ids = sorted(set(class_ids))
        feats = []
        labels = []
        for c in ids:
            rows = self.query(c)
            feats.append(rows)
            labels.append(np.full(rows.shape[0], c, dtype=np.int64))
        return Batch(np.concatenate(feats, axis=0), np.concatenate(labels))

    def iter_rows(self):
        """Yield (class_id, split, feature-row) in a stable order, for serialization."""
        for c in self._classes:
            for row in self._support[c]:
                yield c, "support", row
            for row in self._query[c]:
                yield c, "query", row


class ClassRegistry:
    """Ordered record of which classes were introduced at which session.

    Immutable; ``register_session`` returns a new registry. Session class sets
    are pairwise disjoint and session indices are contiguous from 0.
    """

    def __init__(self, sessions: Sequence[Iterable[int]]):
        if len(sessions) == 0:
            raise ValidationError("registry needs at least a base session")
        self._sessions: tuple[tuple[int, ...], ...] = tuple(
            tuple(sorted(int(c) for c in s)) for s in sessions)
        self._session_of: dict[int, int] = {}
        for t, classes in enumerate(self._sessions):
            for c in classes:
                if c < 0:
                    raise ValidationError(f"class ids must be non-negative, got {c}")
                if c in self._session_of:
                    raise DisjointClassError(
                        f"class {c} appears in sessions {self._session_of[c]} and {t}")
                self._session_of[c] = t

    @classmethod
    def with_base(cls, base_classes: Iterable[int]) -> "ClassRegistry":
        return cls([tuple(base_classes)])

    def register_session(self, new_classes: Iterable[int]) -> "ClassRegistry":
        """New registry with ``new_classes`` recorded under the next session index.

        An empty set still advances the session counter.
        """
        new = tuple(sorted(set(int(c) for c in new_classes)))
        overlap = [c for c in new if c in self._session_of]
        if overlap:
            raise DisjointClassError(f"classes {overlap} already registered")
        return ClassRegistry(self._sessions + (new,))

    @property
    def n_sessions(self) -> int:
        return len(self._sessions)

    @property
    def last_session(self) -> int:
        return len(self._sessions) - 1

    @property
    def base_classes(self) -> tuple[int, ...]:
        return self._sessions[0]

    def classes_in(self, session: int) -> tuple[int, ...]:
        if not 0 <= session < len(self._sessions):
            raise ValidationError(f"session {session} not registered")
        return self._sessions[session]

    def classes_up_to(self, session: int) -> tuple[int, ...]:
        """All classes introduced in sessions 0..session, ascending."""
        if not 0 <= session < len(self._sessions):
            raise ValidationError(f"session {session} not registered")
        out: list[int] = []
        for s in self._sessions[: session + 1]:
            out.extend(s)
        return tuple(sorted(out))

    @property
    def all_classes(self) -> tuple[int, ...]:
        return self.classes_up_to(self.last_session)

    def session_of(self, class_id: int) -> int:
        try:
            return self._session_of[class_id]
        except KeyError:
            raise ValidationError(f"class {class_id} not registered") from None

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._session_of


class WeightMatrix:
    """Per-class weight vectors, one row per class, no bias term.

    Row order is insertion order. The backing matrix is exposed directly;
    only a single owning trainer may mutate it at a time.
    """

    def __init__(self, class_ids: Sequence[int], matrix: np.ndarray, *, copy: bool = True):
        ids = tuple(int(c) for c in class_ids)
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate class ids in weight matrix")
        m = np.array(matrix, dtype=np.float64, copy=copy)
        if m.ndim != 2 or m.shape[0] != len(ids):
            raise ValidationError(
                f"matrix shape {m.shape} does not match {len(ids)} classes")
        if m.shape[1] == 0:
            raise ValidationError("weight dimension must be positive")
        if not np.all(np.isfinite(m)):
            raise ValidationError("weight matrix contains non-finite entries")
        self._ids = ids
        self._index = {c: i for i, c in enumerate(ids)}
        self._m = m

    @classmethod
    def from_rows(cls, rows: Mapping[int, np.ndarray]) -> "WeightMatrix":
        if not rows:
            raise ValidationError("no weight rows given")
        ids = list(rows)
        return cls(ids, np.stack([as_feature(rows[c]) for c in ids]))

    @property
    def class_ids(self) -> tuple[int, ...]:
        return self._ids

    @property
    def dimension(self) -> int:
        return self._m.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._index

    def __len__(self) -> int:
        return len(self._ids)

    def row(self, class_id: int) -> np.ndarray:
        try:
            return self._m[self._index[class_id]]
        except KeyError:
            raise ValidationError(f"class {class_id} has no weight row") from None

    def subset(self, class_ids: Sequence[int]) -> np.ndarray:
        """Rows for the given classes, in the given order (a fresh array)."""
        idx = [self._index[c] for c in class_ids]
        return self._m[idx].copy()

    def with_rows(self, rows: Mapping[int, np.ndarray]) -> "WeightMatrix":
        """New matrix with additional rows appended (existing rows untouched)."""
        dup = [c for c in rows if c in self._index]
        if dup:
            raise ValidationError(f"classes {dup} already have weight rows")
        new_ids = self._ids + tuple(int(c) for c in rows)
        extra = np.stack([as_feature(rows[c], self.dimension) for c in rows])
        return WeightMatrix(new_ids, np.concatenate([self._m, extra], axis=0))

    def copy(self) -> "WeightMatrix":
        return WeightMatrix(self._ids, self._m, copy=True)

    def frozen(self) -> "WeightMatrix":
        out = WeightMatrix(self._ids, self._m, copy=True)
        out._m.setflags(write=False)
        return out

    def as_dict(self) -> dict[int, np.ndarray]:
        return {c: self._m[i].copy() for c, i in self._index.items()}

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self._m, axis=1)


class WeightSnapshots:
    """Frozen per-session copies of the weight matrix.

    Snapshot ``t`` covers every class seen up to and including session ``t``
    and never changes once stored.
    """

    def __init__(self):
        self._by_session: dict[int, WeightMatrix] = {}

    def store(self, session: int, weights: WeightMatrix) -> None:
        if session in self._by_session:
            raise ValidationError(f"snapshot {session} already stored")
        self._by_session[session] = weights.frozen()

    def get(self, session: int) -> WeightMatrix:
        try:
            return self._by_session[session]
        except KeyError:
            raise MissingSnapshotError(f"no snapshot for session {session}") from None

    @property
    def sessions(self) -> tuple[int, ...]:
        return tuple(sorted(self._by_session))

    def __contains__(self, session: int) -> bool:
        return session in self._by_session

    def introduced_at(self, class_id: int) -> int:
        """Session whose snapshot first contains the class (= the session that added it)."""
        for t in self.sessions:
            if class_id in self._by_session[t]:
                return t
        raise MissingSnapshotError(f"class {class_id} absent from all snapshots")

    def anchor(self, class_id: int) -> np.ndarray:
        """Weight row at the end of the session that introduced the class."""
        return self._by_session[self.introduced_at(class_id)].row(class_id)


class OrthonormalBasis:
    """Matrix with orthonormal columns spanning a weight subspace."""

    ORTHO_TOL = 1e-6

    def __init__(self, matrix: np.ndarray):
        p = np.asarray(matrix, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] == 0:
            raise ValidationError(f"basis must be a non-empty 2-D matrix, got shape {p.shape}")
        if p.shape[1] > p.shape[0]:
            raise ValidationError(f"basis has more columns ({p.shape[1]}) than rows ({p.shape[0]})")
        gram = p.T @ p
        if np.max(np.abs(gram - np.eye(p.shape[1]))) > self.ORTHO_TOL:
            raise ValidationError("basis columns are not orthonormal")
        self._p = p.copy()
        self._p.setflags(write=False)

    @property
    def matrix(self) -> np.ndarray:
        return self._p

    @property
    def dimension(self) -> int:
        return self._p.shape[0]

    @property
    def rank(self) -> int:
        return self._p.shape[1]


class EmbeddingTable:
    """Per-class semantic vectors, tagged with their source (label or description)."""

    def __init__(self, vectors: Mapping[int, np.ndarray], source: str = "label"):
        if source not in ("label", "description"):
            raise ValidationError(f"unknown embedding source {source!r}")
        if not vectors:
            raise ValidationError("embedding table is empty")
        items = {int(c): as_feature(v) for c, v in vectors.items()}
        dims = {v.shape[0] for v in items.values()}
        if len(dims) != 1:
            raise DimensionMismatchError(f"inconsistent embedding dimensions {sorted(dims)}")
        self._vectors = items
        for v in self._vectors.values():
            v.setflags(write=False)
        self._dimension = dims.pop()
        self.source = source

    @property
    def dimension(self) -> int:
        return self._dimension

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self._vectors))

    def vector(self, class_id: int) -> np.ndarray:
        try:
            return self._vectors[class_id]
        except KeyError:
            raise MissingEmbeddingError(f"class {class_id} has no embedding") from None

    def subset(self, class_ids: Iterable[int]) -> dict[int, np.ndarray]:
        return {c: self.vector(c) for c in class_ids}

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._vectors


class MemoryBuffer:
    """Examples retained from earlier sessions: exactly one per archived class."""

    def __init__(self, examples: Sequence[LabeledExample] = ()):
        self.examples: tuple[LabeledExample, ...] = tuple(examples)
        seen: set[int] = set()
        for ex in self.examples:
            if ex.class_id in seen:
                raise ValidationError(f"memory holds more than one example of class {ex.class_id}")
            seen.add(ex.class_id)
        self.classes: frozenset[int] = frozenset(seen)

    @classmethod
    def empty(cls) -> "MemoryBuffer":
        return cls()

    def __len__(self) -> int:
        return len(self.examples)


def update_memory(buffer: MemoryBuffer, support: Sequence[LabeledExample],
                  rng: np.random.Generator,
                  expected_classes: Iterable[int] | None = None) -> MemoryBuffer:
    """Archive one uniformly chosen support example per new class.

    Prior entries are kept verbatim (the same retained example persists across
    all later sessions). ``expected_classes``, when given, is the class set
    the support must cover.
    """
    by_class: dict[int, list[LabeledExample]] = {}
    for ex in support:
        by_class.setdefault(ex.class_id, []).append(ex)
    if expected_classes is not None:
        missing = [c for c in sorted(set(expected_classes)) if not by_class.get(c)]
        if missing:
            raise MissingExampleError(f"no support examples for classes {missing}")
    overlap = sorted(set(by_class) & buffer.classes)
    if overlap:
        raise ValidationError(f"classes {overlap} already archived in memory")
    picked: list[LabeledExample] = []
    for c in sorted(by_class):
        pool = by_class[c]
        picked.append(pool[int(rng.integers(len(pool)))])
    return MemoryBuffer(buffer.examples + tuple(picked))


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Hyperparameters for one run: regularizer choice, coefficients, optimizer."""

    regularizer_kind: str = "finetune"
    alpha: float = 5e-3
    beta_base: float = 0.2
    beta_prev_novel: float = 0.1
    gamma: float = 0.0
    tau: float = 3.0
    learning_rate: float = 0.002
    max_epochs: int = 1000
    convergence_tolerance: float = 1e-4
    patience_epochs: int = 10
    memory_enabled: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "regularizer_kind", normalize_kind(self.regularizer_kind))
        for name in ("alpha", "beta_base", "beta_prev_novel", "gamma", "tau",
                     "learning_rate", "convergence_tolerance"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.patience_epochs < 1:
            raise ConfigError(f"patience_epochs must be >= 1, got {self.patience_epochs}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.rng_seed < 0:
            raise ConfigError(f"rng_seed must be non-negative, got {self.rng_seed}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True, eq=False)
class LinearMap:
    """Affine map from embedding space to weight space: e -> matrix @ e + bias."""

    matrix: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if m.ndim != 2 or b.ndim != 1 or m.shape[0] != b.shape[0]:
            raise ValidationError(f"inconsistent map shapes {m.shape} / {b.shape}")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(b))):
            raise ValidationError("linear map contains non-finite entries")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "bias", b)

    def apply(self, embedding: np.ndarray) -> np.ndarray:
        e = as_feature(embedding, self.matrix.shape[1])
        return self.matrix @ e + self.bias


class SessionStream:
    """One run's data: store, session plan, optional embeddings, memory, config.

    ``k_shot`` limits each incremental session's support set to the first k
    examples per class; the base session always uses the full support pool.
    """

    def __init__(self, store: FeatureStore, registry: ClassRegistry, config: RunConfig,
                 embeddings: EmbeddingTable | None = None, k_shot: int | None = None):
        missing = [c for c in registry.all_classes if c not in store.classes]
        if missing:
            raise MissingExampleError(f"registered classes {missing} absent from the store")
        if k_shot is not None and k_shot < 1:
            raise ValidationError(f"k_shot must be >= 1, got {k_shot}")
        self.store = store
        self.registry = registry
        self.config = config
        self.embeddings = embeddings
        self.k_shot = k_shot
        self.memory = MemoryBuffer.empty()

    @property
    def n_incremental_sessions(self) -> int:
        return self.registry.last_session

    def support_examples(self, session: int) -> list[LabeledExample]:
        classes = self.registry.classes_in(session)
        k = None if session == 0 else self.k_shot
        return self.store.support_examples(classes, k=k)

    def query_batch_up_to(self, session: int) -> Batch:
        return self.store.query_batch(self.registry.classes_up_to(session))
