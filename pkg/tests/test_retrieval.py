import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dgmp import pooling, retrieval
from dgmp.errors import DegenerateBatch, DimensionMismatch, InvalidInput, NoRelevant, NotEnoughClasses
from dgmp.retrieval import EmbeddingGallery, TripletConfig


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_force_eval(emb, labels, ids):
    """Per-query AP computed straight from the formula, with exact rational arithmetic."""
    aps = {}
    top1 = []
    for q in range(len(ids)):
        others = [i for i in range(len(ids)) if i != q]
        dists = {i: math.sqrt(sum((a - b) ** 2 for a, b in zip(emb[q], emb[i]))) for i in others}
        ranked = sorted(others, key=lambda i: (dists[i], ids[i]))
        rel = [labels[i] == labels[q] for i in ranked]
        r_total = sum(rel)
        if r_total == 0:
            continue
        total = Fraction(0)
        hits = 0
        for rank, is_rel in enumerate(rel, start=1):
            if is_rel:
                hits += 1
                total += Fraction(hits, rank)
        aps[ids[q]] = float(total / r_total)
        top1.append(rel[0])
    return aps, sum(top1) / len(top1)


def random_gallery(seed, s_max=20, n_classes=3):
    rng = np.random.default_rng(seed)
    s = int(rng.integers(4, s_max + 1))
    labels = [f"k{int(c)}" for c in rng.integers(0, n_classes, s)]
    emb = unit_rows(rng.standard_normal((s, int(rng.integers(2, 6)))))
    return EmbeddingGallery(emb, labels, [f"id{i:02d}" for i in range(s)])


# --- distances -------------------------------------------------------------

def test_pairwise_dist_examples(rng):
    e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    d = retrieval.pairwise_dist(e)
    assert d[0, 1] == 0.0
    assert d[0, 2] == pytest.approx(math.sqrt(2), rel=1e-15)
    g = unit_rows(rng.standard_normal((7, 4)))
    oracle = [[math.dist(a, b) for b in g] for a in g]
    np.testing.assert_allclose(retrieval.pairwise_dist(g), oracle, atol=1e-12)


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_pairwise_dist_symmetric_zero_diagonal(rng, metric):
    d = retrieval.pairwise_dist(unit_rows(rng.standard_normal((9, 3))), metric)
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)


# --- AP --------------------------------------------------------------------

def test_average_precision_examples():
    assert retrieval.average_precision([1, 1, 0], 2) == 1.0
    assert retrieval.average_precision([0, 1], 1) == 0.5
    assert retrieval.average_precision([1, 0, 1, 0, 0], 2) == pytest.approx(5 / 6, abs=1e-15)


def test_average_precision_no_relevant():
    with pytest.raises(NoRelevant):
        retrieval.average_precision([0, 0], 0)


@given(st.lists(st.booleans(), min_size=1, max_size=30).filter(any))
def test_average_precision_bounds(rel):
    ap = retrieval.average_precision(rel, sum(rel))
    assert 0 < ap <= 1
    k = sum(rel)
    assert (ap == 1.0) == all(rel[:k])


# --- evaluate --------------------------------------------------------------

def test_evaluate_separated_clusters():
    emb = unit_rows(np.array([[1, 0.01], [1, -0.01], [0.01, 1], [-0.01, 1]]))
    rep = retrieval.evaluate(EmbeddingGallery(emb, ["a", "a", "b", "b"], [0, 1, 2, 3]))
    assert rep.mAP == 1.0 and rep.top1 == 1.0


def test_evaluate_adversarial_top1_zero():
    # a1 sits next to b1, a2 next to b2; same-class items are far apart
    emb = unit_rows(np.array([[1, 0.05], [-1, 0.05], [1, -0.05], [-1, -0.05]]))
    rep = retrieval.evaluate(EmbeddingGallery(emb, ["a", "a", "b", "b"], [0, 1, 2, 3]))
    assert rep.top1 == 0.0
    assert rep.mAP == pytest.approx(0.5)  # relevant item at rank 2 of 3 for every query


@pytest.mark.parametrize("seed", range(20))
def test_evaluate_matches_brute_force(seed):
    g = random_gallery(seed)
    try:
        aps, top1 = brute_force_eval(g.embeddings.tolist(), g.labels, g.ids)
        rep = retrieval.evaluate(g)
    except NoRelevant:
        pytest.skip("no valid query")
    got = {q: a for q, a in zip(rep.query_ids, rep.ap) if not np.isnan(a)}
    assert got.keys() == aps.keys()
    for q in aps:
        assert got[q] == pytest.approx(aps[q], abs=1e-12)
    assert rep.mAP == pytest.approx(np.mean(list(aps.values())), abs=1e-12)
    assert rep.top1 == pytest.approx(top1, abs=1e-12)


def test_evaluate_ties_broken_by_id():
    emb = unit_rows(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]))
    # both others are at the same distance from the query
    rep = retrieval.evaluate(EmbeddingGallery(emb, ["a", "b", "a"], ["q", "x", "y"]), keep_rankings=True)
    assert rep.rankings[0] == ["x", "y"]
    rep = retrieval.evaluate(EmbeddingGallery(emb, ["a", "b", "a"], ["q", "y", "x"]), keep_rankings=True)
    assert rep.rankings[0] == ["x", "y"]


def test_evaluate_excludes_singletons(caplog):
    emb = unit_rows(np.array([[1, 0.1], [1, -0.1], [-1, 0.0]]))
    rep = retrieval.evaluate(EmbeddingGallery(emb, ["a", "a", "b"], [0, 1, 2]))
    assert rep.excluded == [2]
    assert np.isnan(rep.ap[2])
    assert rep.mAP == 1.0
    assert "excluded" in caplog.text


@given(st.integers(0, 10_000))
def test_evaluate_rotation_invariant(seed):
    g = random_gallery(seed)
    q, _ = np.linalg.qr(np.random.default_rng(seed + 1).standard_normal((g.embeddings.shape[1],) * 2))
    rotated = EmbeddingGallery(unit_rows(g.embeddings @ q.T), g.labels, g.ids)
    try:
        a, b = retrieval.evaluate(g), retrieval.evaluate(rotated)
    except NoRelevant:
        return
    assert abs(a.mAP - b.mAP) <= 1e-12 and abs(a.top1 - b.top1) <= 1e-12


@given(st.integers(0, 10_000))
def test_evaluate_order_invariant(seed):
    g = random_gallery(seed)
    perm = np.random.default_rng(seed).permutation(len(g))
    shuffled = EmbeddingGallery(g.embeddings[perm], [g.labels[i] for i in perm], [g.ids[i] for i in perm])
    try:
        a, b = retrieval.evaluate(g), retrieval.evaluate(shuffled)
    except NoRelevant:
        return
    ap_a = dict(zip(a.query_ids, a.ap.tolist()))
    ap_b = dict(zip(b.query_ids, b.ap.tolist()))
    assert np.allclose([ap_a[k] for k in g.ids], [ap_b[k] for k in g.ids], equal_nan=True, atol=0)
    assert a.mAP == b.mAP


def test_report_serialization():
    emb = unit_rows(np.array([[1, 0.01], [1, -0.01], [0.01, 1], [-0.01, 1]]))
    rep = retrieval.evaluate(EmbeddingGallery(emb, ["a", "a", "b", "b"], ["w", "x", "y", "z"]))
    assert '"mAP": 1.0' in rep.to_json()
    assert rep.to_csv().splitlines()[0] == "id,ap"


def test_gallery_validation():
    with pytest.raises(InvalidInput):
        EmbeddingGallery(np.array([[2.0, 0.0]]), ["a"], [0])
    with pytest.raises(DimensionMismatch):
        EmbeddingGallery(np.eye(2), ["a"], [0, 1])


# --- triplet loss ----------------------------------------------------------

def test_triplet_satisfied_margin():
    emb = np.array([[0.0, 0.2, 1.1, 1.3]])
    loss, g = retrieval.batch_hard_triplet_loss(emb, [0, 0, 1, 1], TripletConfig(margin=0.1, P=2, K=2))
    assert loss == 0.0
    assert not g.any()


def test_triplet_equidistant_batch():
    b = 6
    emb = np.eye(b) * 0.5 / math.sqrt(2)  # all pairwise distances 0.5
    loss, _ = retrieval.batch_hard_triplet_loss(emb, [0, 0, 1, 1, 2, 2], TripletConfig(margin=0.1, P=3, K=2))
    assert loss == pytest.approx(b * 0.1, rel=1e-12)


@pytest.mark.parametrize("distance", ["euclidean", "cosine"])
@pytest.mark.parametrize("seed", range(10))
def test_triplet_gradient_fd(seed, distance):
    from dgmp.grad import finite_diff, relative_error

    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 3)
    cfg = TripletConfig(margin=0.2, P=3, K=3, distance=distance)
    emb = rng.standard_normal((4, 9))
    while retrieval.triplet_selection_margin(emb, labels, cfg) < 1e-3:  # skip selection ties
        emb = rng.standard_normal((4, 9))
    _, g = retrieval.batch_hard_triplet_loss(emb, labels, cfg)
    num = finite_diff(lambda e: retrieval.batch_hard_triplet_loss(e, labels, cfg, with_grad=False)[0], emb)
    assert relative_error(g, num) <= 1e-6


@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.1, 0.5, 2.0]))
def test_triplet_zero_iff_margins_hold(seed, margin):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(2), 3)
    emb = rng.standard_normal((3, 6))
    cfg = TripletConfig(margin=margin, P=2, K=3)
    loss, g = retrieval.batch_hard_triplet_loss(emb, labels, cfg)
    d = retrieval.pairwise_dist(emb.T)
    ok = True
    for a in range(6):
        same = [j for j in range(6) if labels[j] == labels[a] and j != a]
        diff = [j for j in range(6) if labels[j] != labels[a]]
        if min(d[a, diff]) < max(d[a, same]) + margin:
            ok = False
    assert (loss == 0.0) == ok
    assert loss >= 0


def test_triplet_inactive_anchor_gets_no_gradient():
    # anchor 0's hinge is inactive; only the far-apart pair (2, 3) is active
    emb = np.array([[0.0, 0.1, 3.0, 0.6]])
    labels = [0, 0, 1, 1]
    loss, g = retrieval.batch_hard_triplet_loss(emb, labels, TripletConfig(margin=0.1, P=2, K=2))
    assert loss > 0
    d = retrieval.pairwise_dist(emb.T)
    hinge0 = 0.1 + d[0, 1] - min(d[0, 2], d[0, 3])
    assert hinge0 < 0
    # the gradient on item 0 only comes from other anchors' selections
    assert g.shape == emb.shape


def test_triplet_degenerate_batches():
    cfg = TripletConfig(P=2, K=2)
    with pytest.raises(DegenerateBatch):
        retrieval.batch_hard_triplet_loss(np.eye(3), [0, 0, 1], cfg)
    with pytest.raises(DegenerateBatch):
        retrieval.batch_hard_triplet_loss(np.eye(3), [0, 0, 0], cfg)


def test_triplet_config_validation():
    with pytest.raises(InvalidInput):
        TripletConfig(P=1)
    with pytest.raises(InvalidInput):
        TripletConfig(margin=-0.1)


# --- P x K sampler ---------------------------------------------------------

def test_pk_sampler_shapes():
    labels = np.repeat(np.arange(4), 4)
    batches = retrieval.pk_sampler(labels, 2, 2, 0)
    assert len(batches) == 2
    for b in batches:
        assert len(b) == 4
        counts = np.unique(labels[b], return_counts=True)[1]
        assert counts.tolist() == [2, 2]
    covered = {int(labels[i]) for b in batches for i in b}
    assert covered == {0, 1, 2, 3}


def test_pk_sampler_with_replacement_for_small_class():
    labels = ["a", "b", "b", "b"]
    batch = retrieval.pk_sampler(labels, 2, 2, 0)[0]
    assert batch.count(0) == 2


def test_pk_sampler_tops_up_last_batch():
    labels = np.repeat(np.arange(5), 3)
    for b in retrieval.pk_sampler(labels, 2, 2, 1):
        assert len(set(labels[b].tolist())) == 2


def test_pk_sampler_deterministic():
    labels = np.repeat(np.arange(6), 5)
    assert retrieval.pk_sampler(labels, 3, 2, 42) == retrieval.pk_sampler(labels, 3, 2, 42)


def test_pk_sampler_not_enough_classes():
    with pytest.raises(NotEnoughClasses):
        retrieval.pk_sampler([0, 0, 0], 2, 2, 0)


# --- multi-descriptor embedding -------------------------------------------

def _model(ds):
    return pooling.pool(ds, pooling.PoolingConfig(method="avg"))


def test_multi_descriptor_single_set(rng):
    ds = pooling.DescriptorSet(rng.standard_normal((3, 4)))
    np.testing.assert_allclose(retrieval.multi_descriptor_embed([ds], _model).xi, _model(ds).xi, atol=1e-15)
    np.testing.assert_allclose(retrieval.multi_descriptor_embed([ds, ds], _model).xi, _model(ds).xi, atol=1e-15)


def test_multi_descriptor_orthogonal():
    e1 = pooling.DescriptorSet(np.array([[1.0], [0.0]]))
    e2 = pooling.DescriptorSet(np.array([[0.0], [1.0]]))
    out = retrieval.multi_descriptor_embed([e1, e2], _model).xi
    np.testing.assert_allclose(out, [2**-0.5, 2**-0.5], rtol=1e-15)


def test_top1_without_leave_one_out_skips_query_even_on_duplicate():
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    # "a" duplicates "b" exactly and sorts first, so it outranks the query "b"
    g = retrieval.EmbeddingGallery(emb, ["x", "y", "y", "x"], ["b", "a", "c", "d"])
    rep = retrieval.evaluate(g, leave_one_out=False)
    assert rep.top1 == 0.0
