"""Objective assembly: softmax cross-entropy plus the weight regularizers.

All terms report both a value and the exact gradient with respect to the
trainable weight rows. The total is a minimization objective: negative mean
log-likelihood plus the scaled penalties.
"""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence

import numpy as np

from .datamodel import (
    Batch,
    ClassRegistry,
    OrthonormalBasis,
    RunConfig,
    WeightMatrix,
    WeightSnapshots,
    coerce_batch,
)
from .errors import (
    ConfigError,
    DimensionMismatchError,
    MissingSnapshotError,
    MissingTargetError,
    ValidationError,
)

FIXED_TARGET_KINDS = ("semantic", "linmap", "description")


def _softmax_ce(m: np.ndarray, feats: np.ndarray, label_pos: np.ndarray):
    """Mean negative log softmax over the rows of ``m``; returns (value, grad)."""
    logits = feats @ m.T
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    z = expl.sum(axis=1)
    n = feats.shape[0]
    rows = np.arange(n)
    value = float((np.log(z) - logits[rows, label_pos]).mean())
    p = expl / z[:, None]
    p[rows, label_pos] -= 1.0
    return value, p.T @ feats / n


def _grad_dict(class_ids: Sequence[int], grad: np.ndarray) -> dict[int, np.ndarray]:
    return {c: grad[i].copy() for i, c in enumerate(class_ids)}


def cross_entropy(weights: WeightMatrix, batch, active_classes: Iterable[int]):
    """Mean cross-entropy of the batch under softmax over the active classes.

    Returns (value, gradient per active class). Logits are bias-free inner
    products of weight rows with features.
    """
    b = coerce_batch(batch)
    order = sorted(set(active_classes))
    index = {c: i for i, c in enumerate(order)}
    unknown = sorted(set(int(c) for c in b.class_ids) - set(order))
    if unknown:
        raise ValidationError(f"batch classes {unknown} not among the active classes")
    m = weights.subset(order)
    if b.dimension != m.shape[1]:
        raise DimensionMismatchError(
            f"batch dimension {b.dimension} != weight dimension {m.shape[1]}")
    label_pos = np.array([index[int(c)] for c in b.class_ids], dtype=np.int64)
    value, grad = _softmax_ce(m, b.features, label_pos)
    return value, _grad_dict(order, grad)


def r_prior(weights: WeightMatrix):
    """Squared Euclidean magnitude of all trainable rows; gradient 2*row."""
    m = weights.matrix
    value = float((m * m).sum())
    return value, _grad_dict(weights.class_ids, 2.0 * m)


def r_old(weights: WeightMatrix, snapshots: WeightSnapshots,
          beta_base: float, beta_prev_novel: float,
          old_classes: Iterable[int] | None = None):
    """Anchoring penalty for previously learned classes.

    Each archived class is pulled toward its row at the end of the session
    that introduced it, weighted ``beta_base`` for base classes and
    ``beta_prev_novel`` for novel classes of earlier sessions. Classes absent
    from every snapshot contribute nothing (they are this session's novel
    rows). The returned value carries the beta weights.
    """
    if old_classes is not None:
        for c in sorted(set(old_classes)):
            snapshots.introduced_at(c)  # raises MissingSnapshotError if absent
    grad = np.zeros_like(weights.matrix)
    value = 0.0
    known = set()
    for t in snapshots.sessions:
        known.update(snapshots.get(t).class_ids)
    for i, c in enumerate(weights.class_ids):
        if c not in known:
            continue
        t = snapshots.introduced_at(c)
        beta = beta_base if t == 0 else beta_prev_novel
        diff = weights.matrix[i] - snapshots.get(t).row(c)
        value += beta * float(diff @ diff)
        grad[i] = 2.0 * beta * diff
    return value, _grad_dict(weights.class_ids, grad)


def r_new_subspace(weights: WeightMatrix, novel_classes: Iterable[int],
                   basis: OrthonormalBasis):
    """Distance of each novel row from the base-weight subspace.

    Value sum ||eta_c - P P^T eta_c||^2, gradient 2(eta_c - P P^T eta_c);
    the projector is symmetric idempotent, so treating the projection as a
    constant or differentiating through it gives the same gradient.
    """
    novel = sorted(set(novel_classes))
    if weights.dimension != basis.dimension:
        raise DimensionMismatchError(
            f"weight dimension {weights.dimension} != basis dimension {basis.dimension}")
    p = basis.matrix
    grad = np.zeros_like(weights.matrix)
    value = 0.0
    for c in novel:
        row = weights.row(c)
        resid = row - p @ (p.T @ row)
        value += float(resid @ resid)
        grad[weights.class_ids.index(c)] = 2.0 * resid
    return value, _grad_dict(weights.class_ids, grad)


def semantic_targets(novel_embeddings: Mapping[int, np.ndarray],
                     base_embeddings: Mapping[int, np.ndarray],
                     base_weights: WeightMatrix, tau: float) -> dict[int, np.ndarray]:
    """Similarity-weighted combinations of base rows, one target per novel class.

    Weights are a temperature-tau softmax of embedding inner products over the
    base classes (max-subtracted for stability). Targets are static: they are
    computed once per session and held constant during fine-tuning.
    """
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if not novel_embeddings:
        return {}
    base_ids = sorted(base_embeddings)
    if not base_ids:
        raise ValidationError("no base embeddings given")
    e_base = np.stack([np.asarray(base_embeddings[c], dtype=np.float64) for c in base_ids])
    w_base = base_weights.subset(base_ids)
    targets: dict[int, np.ndarray] = {}
    for c in sorted(novel_embeddings):
        e_c = np.asarray(novel_embeddings[c], dtype=np.float64)
        if e_c.shape != e_base[0].shape:
            raise DimensionMismatchError(
                f"embedding of class {c} has shape {e_c.shape}, expected {e_base[0].shape}")
        sims = e_base @ e_c / tau
        sims -= sims.max()
        w = np.exp(sims)
        w /= w.sum()
        targets[c] = w @ w_base
    return targets


def r_new_fixed_target(weights: WeightMatrix, targets: Mapping[int, np.ndarray],
                       novel_classes: Iterable[int] | None = None):
    """Squared distance of novel rows from fixed (static) target vectors."""
    classes = sorted(targets) if novel_classes is None else sorted(set(novel_classes))
    grad = np.zeros_like(weights.matrix)
    value = 0.0
    for c in classes:
        if c not in targets:
            raise MissingTargetError(f"class {c} has no regularization target")
        diff = weights.row(c) - np.asarray(targets[c], dtype=np.float64)
        value += float(diff @ diff)
        grad[weights.class_ids.index(c)] = 2.0 * diff
    return value, _grad_dict(weights.class_ids, grad)


class ObjectiveTerms:
    """Loss decomposition and total gradient for one evaluation.

    ``total`` = data_loss + alpha * r_prior + r_old + gamma * r_new, where
    r_old already carries its beta weights and r_new is raw.
    """

    __slots__ = ("data_loss", "r_prior", "r_old", "r_new", "total",
                 "class_ids", "gradient_matrix", "_gradient_dict")

    def __init__(self, data_loss, r_prior, r_old, r_new, total, class_ids, gradient_matrix):
        self.data_loss = data_loss
        self.r_prior = r_prior
        self.r_old = r_old
        self.r_new = r_new
        self.total = total
        self.class_ids = class_ids
        self.gradient_matrix = gradient_matrix
        self._gradient_dict = None

    @property
    def gradient(self) -> dict[int, np.ndarray]:
        if self._gradient_dict is None:
            self._gradient_dict = _grad_dict(self.class_ids, self.gradient_matrix)
        return self._gradient_dict


class Objective:
    """Assembled per-session objective over the classes seen so far.

    The trainable set is every row up to the current session; old rows stay
    trainable but are anchored by the r_old term. Exactly one new-class
    regularizer is active, selected by ``config.regularizer_kind``:
    ``subspace`` needs a basis, the fixed-target kinds need a target map, and
    ``finetune`` needs neither.
    """

    def __init__(self, config: RunConfig, registry: ClassRegistry, session: int,
                 snapshots: WeightSnapshots, basis: OrthonormalBasis | None = None,
                 targets: Mapping[int, np.ndarray] | None = None):
        self.config = config
        self.registry = registry
        self.session = session
        self.class_ids = registry.classes_up_to(session)
        self._index = {c: i for i, c in enumerate(self.class_ids)}
        kind = config.regularizer_kind

        if session == 0:
            if basis is not None or targets is not None:
                raise ConfigError("the base session takes no new-class regularizer components")
        elif kind == "subspace":
            if basis is None or targets is not None:
                raise ConfigError("subspace regularization needs a basis and no fixed targets")
        elif kind in FIXED_TARGET_KINDS:
            if targets is None or basis is not None:
                raise ConfigError(f"{kind} regularization needs fixed targets and no basis")
        elif kind == "finetune":
            if basis is not None or targets is not None:
                raise ConfigError("plain fine-tuning takes no new-class regularizer components")

        # Anchors for all previously seen classes.
        old = registry.classes_up_to(session - 1) if session > 0 else ()
        self._old_pos = np.array([self._index[c] for c in old], dtype=np.int64)
        anchors = []
        betas = []
        for c in old:
            t = registry.session_of(c)
            snap = snapshots.get(t)
            if c not in snap:
                raise MissingSnapshotError(f"snapshot {t} does not cover class {c}")
            anchors.append(snap.row(c))
            betas.append(config.beta_base if t == 0 else config.beta_prev_novel)
        self._anchors = np.stack(anchors) if anchors else np.zeros((0, 0))
        self._betas = np.array(betas, dtype=np.float64)

        novel = registry.classes_in(session) if session > 0 else ()
        self._novel_pos = np.array([self._index[c] for c in novel], dtype=np.int64)
        self._basis = basis if session > 0 and kind == "subspace" else None
        self._target_matrix = None
        if session > 0 and kind in FIXED_TARGET_KINDS:
            missing = [c for c in novel if c not in targets]
            if missing:
                raise MissingTargetError(f"classes {missing} have no regularization target")
            if novel:
                self._target_matrix = np.stack(
                    [np.asarray(targets[c], dtype=np.float64) for c in novel])

        dims = set()
        if self._anchors.size:
            dims.add(self._anchors.shape[1])
        if self._basis is not None:
            dims.add(self._basis.dimension)
        if self._target_matrix is not None:
            dims.add(self._target_matrix.shape[1])
        if len(dims) > 1:
            raise DimensionMismatchError(f"inconsistent component dimensions {sorted(dims)}")
        self._dimension = dims.pop() if dims else None

    def position_of(self, class_id: int) -> int:
        return self._index[class_id]

    def label_positions(self, class_ids: np.ndarray) -> np.ndarray:
        try:
            return np.array([self._index[int(c)] for c in class_ids], dtype=np.int64)
        except KeyError as err:
            raise ValidationError(f"class {err.args[0]} not active in session {self.session}") from None

    def evaluate_dense(self, m: np.ndarray, feats: np.ndarray,
                       label_pos: np.ndarray) -> ObjectiveTerms:
        """Fast path: ``m`` must be aligned to ``self.class_ids``."""
        cfg = self.config
        data_loss, grad = _softmax_ce(m, feats, label_pos)

        rp = float((m * m).sum())
        if cfg.alpha != 0.0:
            grad += (2.0 * cfg.alpha) * m

        ro = 0.0
        if self._old_pos.size:
            diff = m[self._old_pos] - self._anchors
            sq = (diff * diff).sum(axis=1)
            ro = float(self._betas @ sq)
            grad[self._old_pos] += (2.0 * self._betas)[:, None] * diff

        rn = 0.0
        if self._novel_pos.size and cfg.regularizer_kind != "finetune" and self.session > 0:
            mn = m[self._novel_pos]
            if self._basis is not None:
                p = self._basis.matrix
                resid = mn - (mn @ p) @ p.T
            else:
                resid = mn - self._target_matrix
            rn = float((resid * resid).sum())
            if cfg.gamma != 0.0:
                grad[self._novel_pos] += (2.0 * cfg.gamma) * resid

        total = data_loss + cfg.alpha * rp + ro + cfg.gamma * rn
        return ObjectiveTerms(data_loss, rp, ro, rn, total, self.class_ids, grad)

    def evaluate(self, weights: WeightMatrix, batch) -> ObjectiveTerms:
        b = coerce_batch(batch)
        if self._dimension is not None and weights.dimension != self._dimension:
            raise DimensionMismatchError(
                f"weight dimension {weights.dimension} != component dimension {self._dimension}")
        if b.dimension != weights.dimension:
            raise DimensionMismatchError(
                f"batch dimension {b.dimension} != weight dimension {weights.dimension}")
        m = weights.subset(self.class_ids)
        return self.evaluate_dense(m, b.features, self.label_positions(b.class_ids))


def assemble(config: RunConfig, weights: WeightMatrix, batch, registry: ClassRegistry,
             session: int, snapshots: WeightSnapshots,
             basis: OrthonormalBasis | None = None,
             targets: Mapping[int, np.ndarray] | None = None) -> ObjectiveTerms:
    """One-shot evaluation of the full session objective."""
    return Objective(config, registry, session, snapshots, basis, targets).evaluate(weights, batch)
