import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptcontrast.contrast import (
    ContrastBatch,
    compute_cav,
    concept_loss,
    infonce_loss,
    loss_components,
    normalize_rows,
    total_finetune_loss,
)
from conceptcontrast.errors import ConfigError, ConsistencyError, NoConceptsError, NoPositivesError
from conceptcontrast.summarize import ConceptClusters, NeuronCluster, SummarizerConfig


def loop_infonce(z, y, positives="mean"):
    """Direct transcription of the per-anchor objective with plain loops."""
    B = len(z)
    sim = lambda a, b: -0.5 * sum((p - q) ** 2 for p, q in zip(a, b))  # noqa: E731
    total = 0.0
    per = []
    for i in range(B):
        pos = [j for j in range(B) if j != i and y[j] == y[i]]
        neg = [j for j in range(B) if y[j] != y[i]]
        if positives == "first":
            pos = pos[:1]
        terms = []
        for p in pos:
            den = math.exp(sim(z[i], z[p])) + sum(math.exp(sim(z[i], z[n])) for n in neg)
            terms.append(-math.log(math.exp(sim(z[i], z[p])) / den))
        per.append(sum(terms) / len(terms) if terms else 0.0)
        total += per[-1]
    return total, per


def unit_batch(rng, B, N, n_classes=3):
    z, _ = normalize_rows(rng.standard_normal((B, N)))
    y = rng.integers(0, n_classes, B)
    y[1] = y[0]  # at least one positive pair
    return ContrastBatch(z, y)


def make_clusters(member_weights, n_neurons):
    cls = tuple(NeuronCluster(frozenset(mw), dict(mw), frozenset()) for mw in member_weights)
    return ConceptClusters(cls, SummarizerConfig(), 0, n_neurons)


def random_clusters(rng, N, n_clusters=3, leave_out=()):
    pool = [n for n in range(N) if n not in leave_out]
    out = []
    for _ in range(n_clusters):
        members = rng.choice(pool, size=int(rng.integers(1, min(4, len(pool)) + 1)), replace=False)
        out.append({int(n): float(rng.uniform(0.1, 1.0)) for n in members})
    return make_clusters(out, N)


def fd_grad(f, z, h=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        g[idx] = (f(zp) - f(zm)) / (2 * h)
    return g


def tangent(z, g):
    """Drop the radial part of a gradient taken at unit rows ``z``."""
    return g - z * np.sum(g * z, axis=1, keepdims=True)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_two_identical_same_class_zero_loss():
    z = np.array([[1.0, 0.0], [1.0, 0.0]])
    r = infonce_loss(ContrastBatch(z, [0, 0]))
    assert r.loss == 0.0
    assert r.per_anchor.tolist() == [0.0, 0.0]


def test_one_negative_at_squared_distance_two():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    r = infonce_loss(ContrastBatch(z, [0, 0, 1]))
    assert r.per_anchor[0] == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert r.per_anchor[0] == pytest.approx(0.313262, abs=1e-6)
    assert r.per_anchor[2] == 0.0
    assert r.anchors_without_positive == 1


@pytest.mark.parametrize("positives", ["mean", "first"])
@pytest.mark.parametrize("seed", range(5))
def test_infonce_matches_loop_oracle(seed, positives):
    rng = np.random.default_rng(seed)
    b = unit_batch(rng, 9, 4)
    r = infonce_loss(b, positives=positives)
    total, per = loop_infonce(b.embeddings.tolist(), b.class_labels.tolist(), positives)
    assert r.loss == pytest.approx(total, rel=1e-12)
    np.testing.assert_allclose(r.per_anchor, per, rtol=1e-12, atol=1e-14)
    assert r.loss == pytest.approx(r.per_anchor.sum(), rel=1e-12)


def test_infonce_gradient_b8_n5():
    rng = np.random.default_rng(42)
    b = unit_batch(rng, 8, 5)
    r = infonce_loss(b)
    num = fd_grad(lambda z: infonce_loss(ContrastBatch(z, b.class_labels, False)).loss,
                  b.embeddings)
    assert rel_err(r.grad_embeddings, num) < 1e-5


@pytest.mark.parametrize("renormalize", [True, False])
def test_concept_gradient(renormalize):
    rng = np.random.default_rng(7)
    b = unit_batch(rng, 8, 6)
    cl = random_clusters(rng, 6)
    r = concept_loss(b, cl, renormalize)
    num = fd_grad(lambda z: concept_loss(ContrastBatch(z, b.class_labels, False), cl,
                                         renormalize).loss, b.embeddings)
    assert rel_err(r.grad_embeddings, num) < 1e-5


def test_degenerate_equivalence():
    rng = np.random.default_rng(3)
    b = unit_batch(rng, 10, 6)
    ident = make_clusters([{n: 1.0} for n in range(6)], 6)
    for renorm in (True, False):
        c = concept_loss(b, ident, renormalize=renorm)
        f = infonce_loss(b)
        assert abs(c.loss - f.loss) <= 1e-10
        # renormalizing removes the radial component of the gradient
        g = c.grad_embeddings if renorm else tangent(b.embeddings, c.grad_embeddings)
        np.testing.assert_allclose(g, tangent(b.embeddings, f.grad_embeddings), atol=1e-10)


def test_unclustered_neuron_gets_zero_gradient():
    rng = np.random.default_rng(5)
    b = unit_batch(rng, 8, 6)
    cl = random_clusters(rng, 6, leave_out=(2, 4))
    r = concept_loss(b, cl)
    assert np.all(b.embeddings[:, 2] != 0)
    assert np.all(r.grad_embeddings[:, [2, 4]] == 0.0)


def test_no_positives_error():
    z, _ = normalize_rows(np.eye(3))
    with pytest.raises(NoPositivesError):
        infonce_loss(ContrastBatch(z, [0, 1, 2]))


def test_no_concepts_error():
    rng = np.random.default_rng(0)
    with pytest.raises(NoConceptsError):
        concept_loss(unit_batch(rng, 4, 3), make_clusters([], 3))


def test_batch_invariants():
    with pytest.raises(ConsistencyError):
        ContrastBatch(np.ones((1, 2)) / np.sqrt(2), [0])
    with pytest.raises(ConsistencyError):
        ContrastBatch(np.ones((2, 2)), [0, 0])
    ContrastBatch(np.ones((2, 2)), [0, 0], normalized=False)


def test_cav_example_and_zero():
    cl = make_clusters([{1: 0.5, 2: 0.5}], 4)
    z = np.array([0.0, 1.0, 3.0, 9.0])
    assert compute_cav(z, cl).values.tolist() == [2.0]
    assert compute_cav(np.zeros(4), cl).values.tolist() == [0.0]


def test_cav_member_out_of_range():
    cl = make_clusters([{5: 1.0}], 6)
    with pytest.raises(ConsistencyError):
        compute_cav(np.zeros(3), cl)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 5), st.floats(-5, 5))
def test_cav_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    cl = random_clusters(rng, 7)
    x, y = rng.standard_normal(7), rng.standard_normal(7)
    lhs = compute_cav(a * x + b * y, cl).values
    rhs = a * compute_cav(x, cl).values + b * compute_cav(y, cl).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_losses_non_negative_and_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    b = unit_batch(rng, 7, 4)
    cl = random_clusters(rng, 4)
    perm = rng.permutation(7)
    pb = ContrastBatch(b.embeddings[perm], b.class_labels[perm])
    for fn in (infonce_loss, lambda x: concept_loss(x, cl)):
        r, pr = fn(b), fn(pb)
        assert r.loss >= 0.0
        np.testing.assert_allclose(pr.per_anchor, r.per_anchor[perm], atol=1e-12)
        np.testing.assert_allclose(pr.grad_embeddings, r.grad_embeddings[perm], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_inner_product_form_equals_distance_form(seed):
    b = unit_batch(np.random.default_rng(seed), 12, 8)
    a = infonce_loss(b, similarity="distance")
    c = infonce_loss(b, similarity="inner")
    assert abs(a.loss - c.loss) <= 1e-10
    z = b.embeddings
    np.testing.assert_allclose(tangent(z, a.grad_embeddings), tangent(z, c.grad_embeddings),
                               atol=1e-10)


def test_total_loss_composition():
    rng = np.random.default_rng(8)
    b = unit_batch(rng, 8, 5)
    cl = random_clusters(rng, 5)
    f, c = infonce_loss(b), concept_loss(b, cl)
    assert total_finetune_loss(b, cl, 1, 0).loss == f.loss
    assert total_finetune_loss(b, cl, 0, 1).loss == c.loss
    both = total_finetune_loss(b, cl, 1, 1)
    assert both.loss == pytest.approx(f.loss + c.loss, rel=1e-14)
    np.testing.assert_allclose(both.grad_embeddings, f.grad_embeddings + c.grad_embeddings)
    with pytest.raises(ConfigError):
        total_finetune_loss(b, cl, -1, 1)


def test_loss_components_report():
    rng = np.random.default_rng(9)
    b = unit_batch(rng, 6, 4)
    out = loss_components(b, random_clusters(rng, 4))
    assert set(out) == {"feature", "concept"}
    assert set(loss_components(b, None)) == {"feature"}
