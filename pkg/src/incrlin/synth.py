"""Deterministic synthetic fixtures: Gaussian class clusters with matching
semantic embeddings, sized for desk-scale runs."""
from __future__ import annotations

import dataclasses

import numpy as np

from .datamodel import ClassRegistry, EmbeddingTable, FeatureStore
from .errors import ValidationError


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    """Shape of a synthetic dataset.

    Class means are drawn uniformly on the sphere of radius ``mean_scale``;
    examples are isotropic Gaussians around them. ``from-means`` embeddings
    reuse the class means so semantic similarity mirrors feature geometry;
    ``random`` embeddings are an uninformative control.
    """

    n_classes: int
    dimension: int
    mean_scale: float = 1.0
    within_class_stddev: float = 0.3
    support_per_class: int = 25
    query_per_class: int = 25
    embedding_mode: str = "from-means"
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.dimension < 1:
            raise ValidationError("need at least one class and one dimension")
        if self.within_class_stddev <= 0:
            raise ValidationError("within_class_stddev must be positive")
        if self.support_per_class < 1 or self.query_per_class < 1:
            raise ValidationError("per-class counts must be >= 1")
        if self.embedding_mode not in ("from-means", "random"):
            raise ValidationError(f"unknown embedding mode {self.embedding_mode!r}")


@dataclasses.dataclass(frozen=True, eq=False)
class SynthData:
    store: FeatureStore
    embeddings: EmbeddingTable
    registry: ClassRegistry
    class_means: np.ndarray  # (n_classes, dimension)


def generate(spec: SynthSpec) -> SynthData:
    """Generate a feature store, an embedding table, and a flat registry.

    Deterministic given the seed. Class ids are 0..n_classes-1; the registry
    places them all in session 0, callers impose their own session plan.
    """
    rng = np.random.default_rng(spec.rng_seed)
    g = rng.standard_normal((spec.n_classes, spec.dimension))
    means = spec.mean_scale * g / np.linalg.norm(g, axis=1, keepdims=True)

    support = {}
    query = {}
    for c in range(spec.n_classes):
        support[c] = means[c] + spec.within_class_stddev * rng.standard_normal(
            (spec.support_per_class, spec.dimension))
        query[c] = means[c] + spec.within_class_stddev * rng.standard_normal(
            (spec.query_per_class, spec.dimension))
    store = FeatureStore(spec.dimension, support, query)

    if spec.embedding_mode == "from-means":
        vectors = {c: means[c] for c in range(spec.n_classes)}
    else:
        vectors = {c: rng.standard_normal(spec.dimension) for c in range(spec.n_classes)}
    embeddings = EmbeddingTable(vectors, source="label")
    registry = ClassRegistry.with_base(range(spec.n_classes))
    return SynthData(store, embeddings, registry, means)


def incremental_split(n_classes: int, n_base: int, n_per_session: int) -> list[list[int]]:
    """Session plan: the first ``n_base`` ids form the base session, the rest
    arrive ``n_per_session`` at a time."""
    if not 0 < n_base <= n_classes:
        raise ValidationError(f"n_base must be in 1..{n_classes}, got {n_base}")
    if n_per_session < 1:
        raise ValidationError("n_per_session must be >= 1")
    if (n_classes - n_base) % n_per_session != 0:
        raise ValidationError(
            f"{n_classes - n_base} novel classes do not split into sessions of {n_per_session}")
    plan = [list(range(n_base))]
    for start in range(n_base, n_classes, n_per_session):
        plan.append(list(range(start, start + n_per_session)))
    return plan
