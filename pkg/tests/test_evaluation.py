import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stampkit import evaluation as ev

FOUR = np.array([[0.0, 0.0], [0.0, 0.1], [10.0, 10.0], [10.0, 10.1]])


# -- scalar-loop oracles -------------------------------------------------------
def ari_oracle(a, b):
    n = len(a)
    pairs = list(combinations(range(n), 2))
    same_a = [a[i] == a[j] for i, j in pairs]
    same_b = [b[i] == b[j] for i, j in pairs]
    both = sum(1 for x, y in zip(same_a, same_b) if x and y)
    sa, sb, total = sum(same_a), sum(same_b), len(pairs)
    expected = sa * sb / total
    mx = (sa + sb) / 2
    if mx == expected:
        return 1.0
    return (both - expected) / (mx - expected)


def nmi_oracle(a, b):
    n = len(a)
    ca, cb = sorted(set(a)), sorted(set(b))
    pa = {u: sum(1 for x in a if x == u) / n for u in ca}
    pb = {v: sum(1 for y in b if y == v) / n for v in cb}
    mi = 0.0
    for u in ca:
        for v in cb:
            puv = sum(1 for x, y in zip(a, b) if x == u and y == v) / n
            if puv > 0:
                mi += puv * math.log(puv / (pa[u] * pb[v]))
    ha = -sum(p * math.log(p) for p in pa.values())
    hb = -sum(p * math.log(p) for p in pb.values())
    if ha == 0 or hb == 0:
        return 1.0 if ha == hb else 0.0
    return mi / math.sqrt(ha * hb)


def mse_oracle(p, a):
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            total += (p[i, j] - a[i, j]) ** 2
    return total / p.size


def pcc_oracle(p, a):
    rs = []
    for j in range(p.shape[1]):
        x, y = list(p[:, j]), list(a[:, j])
        mx, my = sum(x) / len(x), sum(y) / len(y)
        sxy = sum((u - mx) * (v - my) for u, v in zip(x, y))
        sxx = sum((u - mx) ** 2 for u in x)
        syy = sum((v - my) ** 2 for v in y)
        if sxx > 0 and syy > 0:
            rs.append(sxy / math.sqrt(sxx * syy))
    return sum(rs) / len(rs)


def silhouette_oracle(x, lab):
    n = len(lab)
    out = []
    for i in range(n):
        own = [j for j in range(n) if lab[j] == lab[i] and j != i]
        if not own:
            out.append(0.0)
            continue
        a = sum(math.dist(x[i], x[j]) for j in own) / len(own)
        b = min(sum(math.dist(x[i], x[j]) for j in range(n) if lab[j] == c) / sum(1 for j in range(n) if lab[j] == c)
                for c in set(lab) if c != lab[i])
        out.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return sum(out) / n


# -- ARI / NMI -------------------------------------------------------------------
def test_hand_case():
    a, b = [0, 0, 1, 1], [0, 1, 0, 1]
    assert ev.adjusted_rand_index(a, b) == -0.5
    assert ev.normalized_mutual_information(a, b) == 0.0


def test_identical_and_constant():
    a = [0, 1, 1, 2, 2, 2]
    assert ev.adjusted_rand_index(a, a) == 1.0
    assert ev.normalized_mutual_information(a, a) == pytest.approx(1.0, abs=1e-15)
    assert ev.normalized_mutual_information([0] * 6, a) == 0.0


def test_partition_length_mismatch():
    with pytest.raises(ValueError):
        ev.adjusted_rand_index([0, 1], [0, 1, 1])


@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_scalar_oracles(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, rng.integers(2, 6), 50).tolist()
    b = rng.integers(0, rng.integers(2, 6), 50).tolist()
    assert abs(ev.adjusted_rand_index(a, b) - ari_oracle(a, b)) < 1e-9
    assert abs(ev.normalized_mutual_information(a, b) - nmi_oracle(a, b)) < 1e-9
    p, t = rng.normal(size=(50, 4)), rng.normal(size=(50, 4))
    assert abs(ev.mse_score(p, t) - mse_oracle(p, t)) < 1e-9
    assert abs(ev.pearson_per_gene(p, t)[0] - pcc_oracle(p, t)) < 1e-9


def test_sklearn_cross_check():
    skm = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.integers(0, 4, 60), rng.integers(0, 3, 60)
        x = rng.normal(size=(60, 3))
        assert ev.adjusted_rand_index(a, b) == pytest.approx(skm.adjusted_rand_score(a, b), abs=1e-12)
        assert ev.normalized_mutual_information(a, b) == pytest.approx(
            skm.normalized_mutual_info_score(a, b, average_method="geometric"), abs=1e-12)
        assert ev.silhouette_score(x, a) == pytest.approx(skm.silhouette_score(x, a), abs=1e-12)
        assert ev.calinski_harabasz(x, a) == pytest.approx(skm.calinski_harabasz_score(x, a), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.integers(0, 2**31))
def test_symmetry_and_relabeling(a, seed):
    rng = np.random.default_rng(seed)
    b = rng.integers(0, 3, len(a))
    relabel = rng.permutation(5)
    a2 = relabel[np.asarray(a)]
    assert ev.adjusted_rand_index(a, b) == pytest.approx(ev.adjusted_rand_index(b, a), abs=1e-12)
    assert ev.adjusted_rand_index(a, b) == pytest.approx(ev.adjusted_rand_index(a2, b), abs=1e-12)
    assert ev.normalized_mutual_information(a, b) == pytest.approx(ev.normalized_mutual_information(b, a), abs=1e-12)
    assert ev.normalized_mutual_information(a, b) == pytest.approx(ev.normalized_mutual_information(a2, b), abs=1e-12)
    assert -1.0 <= ev.adjusted_rand_index(a, b) <= 1.0
    assert 0.0 <= ev.normalized_mutual_information(a, b) <= 1.0


def test_random_partitions_ari_near_zero():
    rng = np.random.default_rng(1)
    vals = [ev.adjusted_rand_index(rng.integers(0, 3, 1000), rng.integers(0, 3, 1000)) for _ in range(100)]
    assert abs(np.mean(vals)) < 0.05


# -- silhouette / CH -------------------------------------------------------------
def test_silhouette_examples():
    assert ev.silhouette_score(FOUR, [0, 0, 1, 1]) > 0.9
    assert ev.silhouette_score(FOUR, [0, 1, 0, 1]) < 0
    # a singleton contributes 0
    x = np.array([[0.0], [1.0], [1.1], [5.0]])
    lab = [0, 1, 1, 2]
    assert ev.silhouette_score(x, lab) == pytest.approx(silhouette_oracle(x, lab), abs=1e-12)


def test_silhouette_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        x, lab = rng.normal(size=(50, 3)), rng.integers(0, 4, 50).tolist()
        assert abs(ev.silhouette_score(x, lab) - silhouette_oracle(x, lab)) < 1e-9


def test_calinski_harabasz_examples():
    assert ev.calinski_harabasz(FOUR, [0, 0, 1, 1]) == pytest.approx(40000.0, rel=1e-9)
    pts = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 1.0], [3.0, 1.0]])
    assert ev.calinski_harabasz(pts, [0, 0, 1, 1]) == math.inf
    rng = np.random.default_rng(3)
    val = ev.calinski_harabasz(rng.normal(size=(40, 3)), rng.integers(0, 3, 40))
    assert 0 < val < math.inf


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100), st.floats(-50, 50))
def test_translation_and_scale_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    x, lab = rng.normal(size=(30, 3)), rng.integers(0, 3, 30)
    if len(set(lab.tolist())) < 2:
        return
    y = x * scale + shift
    assert ev.silhouette_score(y, lab) == pytest.approx(ev.silhouette_score(x, lab), abs=1e-9)
    assert ev.calinski_harabasz(y, lab) == pytest.approx(ev.calinski_harabasz(x, lab), rel=1e-8)


# -- expression metrics ------------------------------------------------------------
def test_pearson_examples():
    a = np.random.default_rng(4).normal(size=(20, 5))
    assert ev.pearson_per_gene(a, a)[0] == pytest.approx(1.0, abs=1e-12)
    assert ev.pearson_per_gene(-a + 4, a)[0] == pytest.approx(-1.0, abs=1e-12)
    assert ev.pearson_per_gene(2 * a + 3, a)[0] == pytest.approx(1.0, abs=1e-12)


def test_pearson_skips_constant_genes():
    a = np.random.default_rng(5).normal(size=(20, 4))
    a[:, 2] = 1.0
    r, skipped = ev.pearson_per_gene(a, a)
    assert r == pytest.approx(1.0) and skipped == 1
    with pytest.raises(ValueError):
        ev.pearson_per_gene(np.ones((5, 2)), np.ones((5, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_pearson_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    p, a = rng.normal(size=(15, 4)), rng.normal(size=(15, 4))
    slope, off = rng.uniform(0.1, 10, 4), rng.normal(size=4)
    assert ev.pearson_per_gene(p * slope + off, a)[0] == pytest.approx(ev.pearson_per_gene(p, a)[0], abs=1e-9)


def test_mse_examples():
    a = np.random.default_rng(6).normal(size=(10, 3))
    assert ev.mse_score(a, a) == 0.0
    assert ev.mse_score(a + 0.5, a) == pytest.approx(0.25, abs=1e-12)
    with pytest.raises(ValueError):
        ev.mse_score(a, a[:, :2])


def test_select_top_genes():
    rng = np.random.default_rng(7)
    x = rng.gamma(1.0, size=(30, 12))
    x[:, 4] = 2.0
    norm = ev.log1p_normalize(x)
    var = [float(np.var(norm[:, j])) for j in range(12)]
    brute = sorted(range(12), key=lambda j: (-var[j], j))
    assert ev.select_top_genes(x, "variable", 12).tolist() == brute
    mean = [float(np.mean(x[:, j])) for j in range(12)]
    assert ev.select_top_genes(x, "expressed", 5).tolist() == sorted(range(12), key=lambda j: (-mean[j], j))[:5]
    const = rng.normal(size=(10, 5))
    const[:, 1] = 3.0
    assert ev.select_top_genes(const, "variable", 5, normalized=True)[-1] == 1
    with pytest.raises(ValueError):
        ev.select_top_genes(x, "variable", 13)


def test_expression_metrics_keys():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(20, 150))
    m = ev.expression_metrics(a + rng.normal(size=a.shape) * 0.1, a)
    assert set(m) == {"pcc_v", "pcc_e", "mse", "pcc_v_skipped", "pcc_e_skipped"}
    assert m["pcc_v"] > 0.9


# -- k-means ---------------------------------------------------------------------------
def test_kmeans_examples():
    x = np.random.default_rng(9).normal(size=(5, 2))
    lab, inertia = ev.kmeans_cluster(x, 5)
    assert sorted(lab.tolist()) == [0, 1, 2, 3, 4] and inertia == 0.0
    rng = np.random.default_rng(10)
    blobs = np.concatenate([rng.normal(0, 0.1, (30, 2)), rng.normal(20, 0.1, (30, 2))])
    truth = [0] * 30 + [1] * 30
    assert ev.adjusted_rand_index(ev.kmeans_cluster(blobs, 2, 3)[0], truth) == 1.0
    a = ev.kmeans_cluster(blobs, 3, 7, n_init=3)[0]
    b = ev.kmeans_cluster(blobs, 3, 7, n_init=3)[0]
    assert a.tolist() == b.tolist()
    with pytest.raises(ValueError):
        ev.kmeans_cluster(x, 6)


def test_kmeans_restarts_never_worse():
    x = np.random.default_rng(11).normal(size=(80, 2))
    assert ev.kmeans_cluster(x, 5, 0, n_init=5)[1] <= ev.kmeans_cluster(x, 5, 0, n_init=1)[1] + 1e-12


# -- linear probe -------------------------------------------------------------------------
def test_probe_separable():
    rng = np.random.default_rng(12)
    x = np.concatenate([rng.normal(-3, 1, (60, 4)), rng.normal(3, 1, (60, 4))])
    y = np.array([0] * 60 + [1] * 60)
    perm = rng.permutation(120)
    tr, te = perm[:80], perm[80:]
    res = ev.linear_probe(x[tr], y[tr], x[te], y[te], epochs=200, lr=1e-2)
    assert res["balanced_accuracy"] >= 0.99
    assert res["weighted_f1"] >= 0.99


def test_probe_permuted_labels_at_chance():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(600, 6))
    y = rng.integers(0, 3, 600)
    res = ev.linear_probe(x[:400], y[:400], x[400:], rng.permutation(y[400:]), epochs=100, lr=1e-2)
    assert abs(res["balanced_accuracy"] - 1 / 3) <= 0.1


def test_probe_unseen_classes_reported():
    x = np.random.default_rng(14).normal(size=(10, 2))
    res = ev.linear_probe(x, [0] * 5 + [1] * 5, x[:3], [0, 1, 2], epochs=5)
    assert res["unseen_test_classes"] == [2]


def test_classification_scores():
    assert ev.balanced_accuracy([0, 0, 0, 1], [0, 0, 0, 0]) == 0.5
    # class 0: P=3/4 R=1 F1=6/7 (support 3); class 1: F1=0 (support 1)
    assert ev.weighted_f1([0, 0, 0, 1], [0, 0, 0, 0]) == pytest.approx(0.75 * 6 / 7)


def test_aggregate_folds():
    out = ev.aggregate_folds([{"a": 1.0, "b": 2.0}, {"a": 3.0, "b": 2.0}])
    assert out == {"a": {"mean": 2.0, "std": 1.0}, "b": {"mean": 2.0, "std": 0.0}}
