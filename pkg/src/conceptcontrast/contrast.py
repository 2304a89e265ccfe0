"""InfoNCE over feature embeddings and over concept activation vectors.

For an anchor ``i`` with positive ``p`` (same class) and negatives ``n``
(other classes), with similarity ``s(a, b) = -|a - b|^2 / 2``::

    term(i, p) = -log( e^{s(i,p)} / (e^{s(i,p)} + sum_n e^{s(i,n)}) )

When an anchor has several positives the terms are averaged
(``positives="mean"``); ``positives="first"`` keeps only the lowest-index
positive. The batch loss is the sum over anchors. Concept-level loss runs
the same objective on CAVs ``v = W z`` where row ``i`` of ``W`` holds the
neuron weights of concept cluster ``i``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ConsistencyError, NoConceptsError, NoPositivesError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class ContrastBatch:
    embeddings: np.ndarray
    class_labels: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        z = np.array(self.embeddings, dtype=np.float64)
        y = np.asarray(self.class_labels).astype(np.int64)
        if z.ndim != 2:
            raise ConsistencyError(f"embeddings must be (B, N), got shape {z.shape}")
        if y.shape != (z.shape[0],):
            raise ConsistencyError(f"{y.shape[0]} labels for {z.shape[0]} embeddings")
        if z.shape[0] < 2:
            raise ConsistencyError("a contrast batch needs at least 2 samples")
        if self.normalized:
            norms = np.linalg.norm(z, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ConsistencyError("batch flagged normalized but has rows off the unit sphere")
        object.__setattr__(self, "embeddings", z)
        object.__setattr__(self, "class_labels", y)

    @classmethod
    def from_features(cls, features, class_labels):
        """Unit-normalize raw features and wrap them."""
        u, _ = normalize_rows(features)
        return cls(u, class_labels, normalized=True)


@dataclass(frozen=True)
class LossResult:
    loss: float
    grad_embeddings: np.ndarray
    per_anchor: np.ndarray
    anchors_without_positive: int = 0


@dataclass(frozen=True)
class ConceptActivationVector:
    values: np.ndarray
    source_clusters: object = None


def normalize_rows(x, eps=NORM_EPS):
    """Return ``(x / |x|, |x|)`` row-wise; norms are clamped at ``eps``."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)
    return x / norms, norms


def normalize_backward(u, norms, grad_u):
    """Pull a gradient back through ``u = x / |x|``."""
    return (grad_u - u * np.sum(grad_u * u, axis=-1, keepdims=True)) / norms


def _similarity(z, kind):
    if kind == "distance":
        diff = z[:, None, :] - z[None, :, :]
        return -0.5 * np.maximum(np.einsum("ijk,ijk->ij", diff, diff), 0.0)
    if kind == "inner":
        return z @ z.T
    raise ConfigError(f"unknown similarity {kind!r}")


def _masked_logsumexp(S, mask):
    out = np.full(S.shape[0], -np.inf)
    rows = mask.any(axis=1)
    if rows.any():
        Sm = np.where(mask, S, -np.inf)[rows]
        m = Sm.max(axis=1)
        out[rows] = m + np.log(np.exp(Sm - m[:, None]).sum(axis=1))
    return out


def infonce_loss(batch: ContrastBatch, positives="mean", similarity="distance"):
    """Feature-level InfoNCE with its analytic gradient w.r.t. the embeddings."""
    z, y = batch.embeddings, batch.class_labels
    B = z.shape[0]
    same = y[:, None] == y[None, :]
    pos = same & ~np.eye(B, dtype=bool)
    neg = ~same
    if not pos.any():
        raise NoPositivesError("no two samples in the batch share a class")
    if positives == "first":
        first = np.argmax(pos, axis=1)
        keep = np.zeros_like(pos)
        keep[np.arange(B), first] = True
        pos &= keep
    elif positives != "mean":
        raise ConfigError(f"unknown positives mode {positives!r}")

    S = _similarity(z, similarity)
    lneg = _masked_logsumexp(S, neg)
    denom = np.logaddexp(S, lneg[:, None])
    npos = pos.sum(axis=1)
    scale = np.where(npos > 0, 1.0 / np.maximum(npos, 1), 0.0)

    terms = np.where(pos, denom - S, 0.0)
    per_anchor = terms.sum(axis=1) * scale

    # dL/dS: positives get (softmax - 1), negatives their softmax share
    a = np.where(pos, np.exp(S - denom), 0.0)
    G = np.where(pos, (a - 1.0) * scale[:, None], 0.0)
    coef = np.where(pos, 1.0 - a, 0.0).sum(axis=1) * scale
    has_neg = np.isfinite(lneg)
    negsoft = np.zeros_like(S)
    negsoft[has_neg] = np.where(neg[has_neg], np.exp(S[has_neg] - lneg[has_neg, None]), 0.0)
    G += negsoft * coef[:, None]

    H = G + G.T
    if similarity == "distance":
        grad = H @ z - H.sum(axis=1)[:, None] * z
    else:
        grad = H @ z
    return LossResult(float(per_anchor.sum()), grad, per_anchor, int((npos == 0).sum()))


def compute_cav(z, clusters):
    """Concept activation vector(s): ``v_i = sum_{n in u_i} w_n z_n``.

    ``z`` may be a single feature vector or a ``(B, N)`` batch.
    """
    z = np.asarray(z, dtype=np.float64)
    W = clusters.weight_matrix(z.shape[-1])
    return ConceptActivationVector(z @ W.T, clusters)


def concept_loss(batch: ContrastBatch, clusters, renormalize=True,
                 positives="mean", similarity="distance"):
    """InfoNCE evaluated on CAVs, with gradients chained back to the
    embeddings. Neurons outside every cluster get zero gradient."""
    if clusters is None or len(clusters) == 0:
        raise NoConceptsError("concept loss needs at least one concept cluster")
    W = clusters.weight_matrix(batch.embeddings.shape[1])
    v = batch.embeddings @ W.T
    if renormalize:
        u, norms = normalize_rows(v)
        inner = infonce_loss(ContrastBatch(u, batch.class_labels, normalized=False),
                             positives, similarity)
        grad_v = normalize_backward(u, norms, inner.grad_embeddings)
    else:
        inner = infonce_loss(ContrastBatch(v, batch.class_labels, normalized=False),
                             positives, similarity)
        grad_v = inner.grad_embeddings
    return LossResult(inner.loss, grad_v @ W, inner.per_anchor, inner.anchors_without_positive)


def total_finetune_loss(batch, clusters, base_weight, concept_weight,
                        renormalize=True, positives="mean", similarity="distance"):
    """``base_weight * feature loss + concept_weight * concept loss``.

    A component with weight 0 is not evaluated at all.
    """
    if base_weight < 0 or concept_weight < 0:
        raise ConfigError("loss weights must be non-negative")
    B, N = batch.embeddings.shape
    loss = 0.0
    grad = np.zeros((B, N))
    per_anchor = np.zeros(B)
    missing = 0
    parts = []
    if base_weight:
        parts.append((base_weight, infonce_loss(batch, positives, similarity)))
    if concept_weight:
        parts.append((concept_weight,
                      concept_loss(batch, clusters, renormalize, positives, similarity)))
    for w, r in parts:
        loss += w * r.loss
        grad += w * r.grad_embeddings
        per_anchor += w * r.per_anchor
        missing = max(missing, r.anchors_without_positive)
    return LossResult(loss, grad, per_anchor, missing)


def loss_components(batch, clusters: Optional[object], renormalize=True):
    """Both losses side by side, for reporting."""
    out = {"feature": infonce_loss(batch)}
    if clusters is not None:
        out["concept"] = concept_loss(batch, clusters, renormalize)
    return out
