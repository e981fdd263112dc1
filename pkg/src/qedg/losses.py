"""Generator and substitute objectives.

``generator_loss`` combines cross-entropy against the pseudo labels, the
harmony term (mean per-sample variance of the substitute's probability
vector, zero exactly on uniform rows) and the diversity term (negative mean
pairwise dissimilarity of synthetic features within each pseudo class).
``substitute_loss`` up-weights samples on which the substitute disagreed
with the stored oracle label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5.0  # harmony
    beta: float = 0.7  # diversity
    gamma: float = 5.0  # disputed-sample weight

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")


def _label_indices(labels, k: int) -> np.ndarray:
    labels = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label index out of range [0, {k})")
    return labels


def per_sample_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Cross-entropy of each row against an index (or one-hot) target."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    idx = _label_indices(labels, k)
    if idx.shape[0] != n:
        raise ValueError(f"{idx.shape[0]} labels for {n} logit rows")
    return -T.log_softmax(logits, axis=1)[np.arange(n), idx]


def classification_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy; softmax is applied internally via log-sum-exp."""
    return T.mean(per_sample_cross_entropy(logits, labels))


def harmony_loss(probs: Tensor, tol: float = 1e-4) -> Tensor:
    """Mean population variance of each probability row."""
    if probs.ndim != 2:
        raise ValueError(f"expected N x K probabilities, got {probs.shape}")
    p = probs.data
    if (p < -tol).any() or np.abs(p.sum(axis=1) - 1).max() > tol:
        raise ValueError("harmony_loss expects rows on the probability simplex")
    return T.mean(T.variance(probs, axis=1))


def _raw(labels):
    return labels.data if isinstance(labels, Tensor) else np.asarray(labels)


def _dissimilarity_matrix(features: Tensor, dissimilarity: str) -> Tensor:
    norms = np.linalg.norm(features.data, axis=1)
    if (norms == 0).any():
        raise ValueError("diversity_loss: zero-norm feature (degenerate generator output)")
    unit = features / T.sqrt(T.tsum(features * features, axis=1, keepdims=True))
    sim = unit @ unit.T
    if dissimilarity == "cosine_distance":
        return 1.0 - sim
    if dissimilarity == "cosine_similarity":
        return sim
    raise ValueError(f"unknown dissimilarity '{dissimilarity}'")


def diversity_loss(
    features: Tensor,
    pseudo_labels=None,
    pairing: str = "same_class",
    dissimilarity: str = "cosine_distance",
) -> Tensor:
    """-(2 / (M(M-1))) * sum over ordered pairs i != j of d(x_i, x_j).

    With ``pairing="same_class"`` the sum runs within each pseudo-label
    group of size M >= 2 and the group values are averaged; ``"all"`` uses
    the whole batch as one group.
    """
    if features.ndim != 2:
        raise ValueError(f"features must be N x D, got {features.shape}")
    n = features.shape[0]
    if pairing == "all" or pseudo_labels is None:
        groups = np.zeros(n, dtype=np.int64)
    elif pairing == "same_class":
        groups = _raw(pseudo_labels)
        groups = groups.argmax(axis=1) if groups.ndim == 2 else groups.astype(np.int64)
        if groups.shape != (n,):
            raise ValueError(f"{groups.shape[0]} pseudo labels for {n} features")
    else:
        raise ValueError(f"unknown pairing mode '{pairing}'")
    ids, sizes = np.unique(groups, return_counts=True)
    eligible = ids[sizes >= 2]
    if eligible.size == 0:
        raise ValueError("diversity_loss undefined: every pairing group is a singleton")
    d = _dissimilarity_matrix(features, dissimilarity)
    weights = np.zeros((n, n), dtype=features.dtype)
    for g in eligible:
        members = np.flatnonzero(groups == g)
        m = members.size
        block = np.full((m, m), 2.0 / (m * (m - 1)), dtype=features.dtype)
        np.fill_diagonal(block, 0.0)
        weights[np.ix_(members, members)] = block
    return -T.tsum(d * weights) / float(eligible.size)


@dataclass
class GeneratorLossParts:
    total: Tensor
    clf: float
    harm: float
    div: float


def generator_loss(
    logits: Tensor,
    pseudo_labels,
    probabilities: Tensor | None,
    features: Tensor | None,
    weights: LossWeights,
    pairing: str = "same_class",
    dissimilarity: str = "cosine_distance",
    harmony_on: str = "probs",
) -> GeneratorLossParts:
    """L_clf + alpha * L_harm + beta * L_div, with component values for logging.

    The harmony term measures ``probabilities`` (softmax of ``logits`` when
    None); ``harmony_on="logits"`` measures the raw logits instead.  Terms
    with zero weight are not built into the graph, so alpha = beta = 0 is
    exactly cross-entropy.
    """
    clf = classification_loss(logits, pseudo_labels)
    total = clf
    harm_v = div_v = float("nan")
    if weights.alpha > 0:
        if harmony_on == "logits":
            harm = T.mean(T.variance(logits, axis=1))
        elif harmony_on == "probs":
            if probabilities is None:
                probabilities = T.softmax(logits, axis=1)
            harm = harmony_loss(probabilities)
        else:
            raise ValueError(f"unknown harmony_on '{harmony_on}'")
        harm_v = harm.item()
        total = total + weights.alpha * harm
    if weights.beta > 0:
        div = diversity_loss(features, pseudo_labels, pairing, dissimilarity)
        div_v = div.item()
        total = total + weights.beta * div
    return GeneratorLossParts(total, clf.item(), harm_v, div_v)


def substitute_loss(logits: Tensor, stored_labels, disputed_mask, gamma: float) -> Tensor:
    """Mean per-sample cross-entropy, scaled by gamma where disputed."""
    mask = np.asarray(disputed_mask, dtype=bool)
    if mask.shape != (logits.shape[0],):
        raise ValueError(f"mask of shape {mask.shape} for {logits.shape[0]} samples")
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    w = np.where(mask, gamma, 1.0).astype(logits.dtype)
    return T.mean(per_sample_cross_entropy(logits, stored_labels) * w)
