"""Clustering and expression-prediction metrics, k-means and linear probing.

k-means stands in for graph-based Leiden clustering, and HVG ranking uses
plain variance of log1p-normalized values rather than a dispersion model.
"""

from __future__ import annotations

import math

import numpy as np

from .optim import AdamW
from .tensor import Tensor, matmul, softmax_cross_entropy


def _labels(x) -> np.ndarray:
    x = np.asarray(x)
    _, inv = np.unique(x, return_inverse=True)
    return inv.reshape(-1)


def contingency(a, b) -> np.ndarray:
    a, b = _labels(a), _labels(b)
    if len(a) != len(b):
        raise ValueError(f"partitions differ in length: {len(a)} vs {len(b)}")
    table = np.zeros((a.max() + 1 if len(a) else 0, b.max() + 1 if len(b) else 0), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def _pairs(n: int) -> int:
    return n * (n - 1) // 2


def adjusted_rand_index(a, b) -> float:
    """Pair-counting ARI, evaluated in exact integer arithmetic up to the
    final division."""
    if len(a) != len(b):
        raise ValueError(f"partitions differ in length: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ValueError("ARI needs at least two samples")
    table = contingency(a, b)
    index = sum(_pairs(int(v)) for v in table.ravel())
    sa = sum(_pairs(int(v)) for v in table.sum(axis=1))
    sb = sum(_pairs(int(v)) for v in table.sum(axis=0))
    total = _pairs(len(a))
    # (index - E) / (max - E) with E = sa*sb/total, scaled by 2*total
    num = 2 * (index * total - sa * sb)
    den = (sa + sb) * total - 2 * sa * sb
    if den == 0:
        # both partitions trivial in the same way
        return 1.0
    return num / den


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def normalized_mutual_information(a, b) -> float:
    """Mutual information over the geometric mean of the two entropies."""
    table = contingency(a, b).astype(np.float64)
    n = table.sum()
    ha = _entropy(table.sum(axis=1), n)
    hb = _entropy(table.sum(axis=0), n)
    if ha == 0 or hb == 0:
        return 1.0 if ha == hb else 0.0
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    return float(min(1.0, max(0.0, mi / math.sqrt(ha * hb))))


def _pairwise_dist(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def silhouette_score(x, labels) -> float:
    x = np.asarray(x, dtype=np.float64)
    lab = _labels(labels)
    k = lab.max() + 1 if len(lab) else 0
    if k < 2:
        raise ValueError("silhouette needs at least two clusters")
    d = _pairwise_dist(x)
    onehot = np.eye(k)[lab]
    sizes = onehot.sum(axis=0)
    sums = d @ onehot  # [n, k] total distance to each cluster
    own = sizes[lab]
    a = sums[np.arange(len(lab)), lab] / np.maximum(own - 1, 1)
    mean_other = sums / sizes
    mean_other[np.arange(len(lab)), lab] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def calinski_harabasz(x, labels) -> float:
    """Between/within dispersion ratio; ``inf`` when clusters are points."""
    x = np.asarray(x, dtype=np.float64)
    lab = _labels(labels)
    n, k = len(lab), (lab.max() + 1 if len(lab) else 0)
    if k < 2 or n <= k:
        raise ValueError(f"Calinski-Harabasz needs 2 <= k < n, got k={k}, n={n}")
    centre = x.mean(axis=0)
    between = within = 0.0
    for c in range(k):
        pts = x[lab == c]
        mu = pts.mean(axis=0)
        between += len(pts) * float(((mu - centre) ** 2).sum())
        within += float(((pts - mu) ** 2).sum())
    if within == 0:
        return math.inf
    return float((between / (k - 1)) / (within / (n - k)))


# -- expression prediction -------------------------------------------------
def log1p_normalize(counts, library: float = 1e4) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    totals[totals == 0] = 1.0
    return np.log1p(counts * (library / totals))


def select_top_genes(expr, mode: str = "variable", top_n: int = 100,
                     normalized: bool = False) -> np.ndarray:
    """Indices of the ``top_n`` most variable / most expressed genes.

    Variable mode ranks by variance of log1p-normalized values (pass
    ``normalized=True`` when ``expr`` already is); ties go to the lower index.
    """
    expr = np.asarray(expr, dtype=np.float64)
    if top_n > expr.shape[1]:
        raise ValueError(f"top_n={top_n} exceeds {expr.shape[1]} genes")
    if mode == "variable":
        vals = (expr if normalized else log1p_normalize(expr)).var(axis=0)
    elif mode == "expressed":
        vals = expr.mean(axis=0)
    else:
        raise ValueError(f"unknown gene selection mode {mode!r}")
    order = np.lexsort((np.arange(len(vals)), -vals))
    return order[:top_n]


def pearson_per_gene(pred, actual, genes=None) -> tuple[float, int]:
    """Mean Pearson correlation across genes and the number skipped for
    zero variance."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {actual.shape}")
    if genes is not None:
        pred, actual = pred[:, genes], actual[:, genes]
    pc = pred - pred.mean(axis=0)
    ac = actual - actual.mean(axis=0)
    sp = np.sqrt((pc * pc).sum(axis=0))
    sa = np.sqrt((ac * ac).sum(axis=0))
    ok = (sp > 0) & (sa > 0)
    if not ok.any():
        raise ValueError("every selected gene has zero variance")
    r = (pc[:, ok] * ac[:, ok]).sum(axis=0) / (sp[ok] * sa[ok])
    return float(r.mean()), int((~ok).sum())


def mse_score(pred, actual, genes=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {actual.shape}")
    if genes is not None:
        pred, actual = pred[:, genes], actual[:, genes]
    return float(((pred - actual) ** 2).mean())


def expression_metrics(pred, actual, top_n: int = 100) -> dict[str, float]:
    """PCC over HVGs and HEGs of ``actual`` plus MSE over their union."""
    top_n = min(top_n, np.asarray(actual).shape[1])
    hvg = select_top_genes(actual, "variable", top_n, normalized=True)
    heg = select_top_genes(actual, "expressed", top_n)
    pcc_v, skip_v = pearson_per_gene(pred, actual, hvg)
    pcc_e, skip_e = pearson_per_gene(pred, actual, heg)
    union = np.union1d(hvg, heg)
    return {"pcc_v": pcc_v, "pcc_e": pcc_e, "mse": mse_score(pred, actual, union),
            "pcc_v_skipped": skip_v, "pcc_e_skipped": skip_e}


# -- clustering ------------------------------------------------------------
def kmeans_cluster(x, k: int, rng_seed: int = 0, max_iter: int = 300, tol: float = 1e-8,
                   n_init: int = 1) -> tuple[np.ndarray, float]:
    """k-means++ seeding and Lloyd iterations; returns (labels, inertia).

    With ``n_init > 1`` the lowest-inertia restart wins.  An emptied
    cluster is re-seeded at the point farthest from its centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples {n}")
    rng = np.random.default_rng(rng_seed)
    best = None
    for _ in range(n_init):
        labels, inertia = _lloyd(x, k, rng, max_iter, tol)
        if best is None or inertia < best[1]:
            best = (labels, inertia)
    return best


def _kmeanspp(x, k, rng):
    n = len(x)
    centres = [x[rng.integers(n)]]
    d2 = ((x - centres[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            i = int(rng.integers(n))
        else:
            i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            i = min(i, n - 1)
        centres.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return np.array(centres)


def _assign(x, centres):
    d2 = ((x[:, None, :] - centres[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(len(x)), labels]


def _lloyd(x, k, rng, max_iter, tol):
    centres = _kmeanspp(x, k, rng)
    labels, dist = _assign(x, centres)
    for _ in range(max_iter):
        new = np.empty_like(centres)
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(dist))
                new[c] = x[far]
                dist[far] = 0.0
        shift = float(np.sqrt(((new - centres) ** 2).sum(axis=1)).max())
        centres = new
        labels, dist = _assign(x, centres)
        if shift < tol:
            break
    return labels, float(dist.sum())


# -- linear probing --------------------------------------------------------
def balanced_accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


def weighted_f1(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    total = 0.0
    for c in np.unique(y_true):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        total += f1 * np.sum(y_true == c)
    return float(total / len(y_true))


def linear_probe(train_x, train_y, test_x, test_y, epochs: int = 100, lr: float = 1e-3,
                 rng_seed: int = 0) -> dict:
    """Train one linear layer with softmax cross-entropy on frozen features.

    Full-batch Adam (no weight decay).  Classes seen only at test time can
    never be predicted; they count as errors and are listed in the result.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    classes = np.unique(train_y)
    cls_index = {c: i for i, c in enumerate(classes)}
    y = np.array([cls_index[c] for c in train_y])
    rng = np.random.default_rng(rng_seed)
    d = train_x.shape[1]
    w = Tensor(rng.normal(0, d ** -0.5 * 0.01, (d, len(classes))), requires_grad=True)
    b = Tensor(np.zeros(len(classes)), requires_grad=True)
    opt = AdamW([w, b], lr=lr, weight_decay=0.0)
    xt = Tensor(train_x)
    for _ in range(epochs):
        opt.zero_grad()
        loss = softmax_cross_entropy(matmul(xt, w) + b, y)
        loss.backward()
        opt.step()
    pred = classes[(test_x @ w.data + b.data).argmax(axis=1)]
    unseen = sorted(set(np.unique(test_y).tolist()) - set(classes.tolist()))
    return {"balanced_accuracy": balanced_accuracy(test_y, pred),
            "weighted_f1": weighted_f1(test_y, pred),
            "unseen_test_classes": unseen}


def aggregate_folds(records: list[dict[str, float]]) -> dict[str, dict[str, float]]:
    """Mean and (population) standard deviation per metric across folds."""
    keys = sorted({k for r in records for k, v in r.items() if isinstance(v, (int, float))})
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in records if k in r], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
