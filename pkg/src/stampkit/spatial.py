"""Spot neighbour indexing and spatially contiguous mini-batch sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_BATCH_SIZE = 9


@dataclass(frozen=True)
class SpatialSlide:
    slide_id: str
    spot_indices: np.ndarray  # global indices into the expression matrix
    coords: np.ndarray  # [n, 2] (row, col)

    def __post_init__(self):
        idx = np.asarray(self.spot_indices, dtype=np.int64)
        xy = np.asarray(self.coords, dtype=np.float64).reshape(len(idx), 2)
        if not np.all(np.isfinite(xy)):
            raise ValueError(f"slide {self.slide_id}: non-finite coordinates")
        if len(np.unique(idx)) != len(idx):
            raise ValueError(f"slide {self.slide_id}: duplicate spot indices")
        object.__setattr__(self, "spot_indices", idx)
        object.__setattr__(self, "coords", xy)

    def __len__(self) -> int:
        return len(self.spot_indices)


@dataclass(frozen=True)
class MiniBatch:
    slide_id: str
    members: tuple[int, ...]

    @property
    def seed(self) -> int:
        return self.members[0]

    @property
    def k(self) -> int:
        return len(self.members)


class NeighborIndex:
    """Exact Euclidean nearest neighbours over one slide.

    Local positions ``0..n-1`` refer to rows of ``slide.coords``; ties in
    distance are broken by ascending global spot index.
    """

    def __init__(self, slide: SpatialSlide):
        if len(slide) < 1:
            raise ValueError("neighbour index needs at least one spot")
        self.slide = slide
        self.coords = slide.coords
        self._tree = cKDTree(slide.coords)

    def __len__(self) -> int:
        return len(self.coords)

    def _sq_dist(self, i: int, cand: np.ndarray) -> np.ndarray:
        d = self.coords[cand] - self.coords[i]
        return (d * d).sum(axis=1)

    def _order(self, i: int, cand: np.ndarray) -> np.ndarray:
        d2 = self._sq_dist(i, cand)
        return cand[np.lexsort((self.slide.spot_indices[cand], d2))]

    def query(self, i: int, k: int) -> np.ndarray:
        """Local positions of the ``k`` nearest other spots to spot ``i``."""
        n = len(self)
        k = min(k, n - 1)
        if k <= 0:
            return np.zeros(0, dtype=np.int64)
        dist, _ = self._tree.query(self.coords[i], k=min(k + 1, n))
        radius = float(np.atleast_1d(dist)[-1])
        # the ball catches every point tied with the k-th distance
        cand = np.asarray(self._tree.query_ball_point(self.coords[i], radius * (1 + 1e-12) + 1e-300),
                          dtype=np.int64)
        cand = cand[cand != i]
        return self._order(i, cand)[:k]

    def nearest_among(self, i: int, candidates: np.ndarray, k: int) -> np.ndarray:
        """The ``k`` nearest of ``candidates`` (local positions) to spot ``i``."""
        cand = np.asarray(candidates, dtype=np.int64)
        cand = cand[cand != i]
        if len(cand) <= k:
            return self._order(i, cand)
        d2 = self._sq_dist(i, cand)
        kth = np.partition(d2, k - 1)[k - 1]
        cand = cand[d2 <= kth]
        return self._order(i, cand)[:k]

    def nearest_unassigned(self, i: int, unassigned: np.ndarray, k: int) -> np.ndarray:
        """The ``k`` nearest spots to ``i`` with ``unassigned`` set, widening
        the tree query until enough are found (same order as ``nearest_among``)."""
        n = len(self)
        m = min(n, 2 * k + 2)
        while True:
            dist, idx = self._tree.query(self.coords[i], k=m)
            dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
            ok = unassigned[idx] & (idx != i)
            if ok.sum() >= k or m == n:
                break
            m = min(n, 4 * m)
        free = idx[ok]
        if len(free) <= k:
            return self._order(i, free)
        radius = dist[ok][k - 1]
        if radius < dist[-1] or m == n:
            cand = free[dist[ok] <= radius]
        else:
            # the k-th distance touches the query horizon: collect every tie
            ball = np.asarray(self._tree.query_ball_point(self.coords[i], radius * (1 + 1e-12) + 1e-300),
                              dtype=np.int64)
            cand = ball[unassigned[ball] & (ball != i)]
        return self.nearest_among(i, cand, k)

    def median_nn_distance(self) -> float:
        if len(self) < 2:
            return 0.0
        dist, _ = self._tree.query(self.coords, k=2)
        return float(np.median(dist[:, 1]))


def build_neighbor_index(slide: SpatialSlide) -> NeighborIndex:
    return NeighborIndex(slide)


def default_d_max(index: NeighborIndex) -> float:
    return 3.0 * index.median_nn_distance()


def max_pairwise_distance(coords: np.ndarray) -> float:
    if len(coords) < 2:
        return 0.0
    diff = coords[:, None, :] - coords[None, :, :]
    return float(np.sqrt((diff * diff).sum(-1)).max())


def medoid_first(coords: np.ndarray) -> int:
    """Position of the member with the smallest summed distance to the rest
    (earliest position on ties)."""
    diff = coords[:, None, :] - coords[None, :, :]
    return int(np.argmin(np.sqrt((diff * diff).sum(-1)).sum(axis=1)))


def sample_spatial_batches(slide: SpatialSlide, k: int = DEFAULT_BATCH_SIZE,
                           d_max: float | None = None, rng_seed=0,
                           index: NeighborIndex | None = None) -> list[MiniBatch]:
    """Greedy seed-and-grow batching of one slide.

    Provisional seeds are taken in order along a random sweep direction
    (random tie order), each batch being filled with the seed's nearest
    still-unassigned neighbours.  Sweeping from one edge keeps the leftover
    fragments small, unlike uniformly random seeds which strand isolated
    spots between batches.  The member closest to all others becomes the
    batch seed and moves to the front.  Batches whose diameter exceeds
    ``d_max`` are discarded afterwards; fewer than ``k`` leftover spots stay
    unbatched.  Members are global spot indices.
    """
    if k < 2:
        raise ValueError("batch size k must be >= 2")
    if len(slide) < k:
        return []
    index = index or build_neighbor_index(slide)
    if d_max is None:
        d_max = default_d_max(index)
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = len(slide)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    key = slide.coords @ np.array([np.cos(angle), np.sin(angle)])
    order = np.lexsort((rng.random(n), key))
    unassigned = np.ones(n, dtype=bool)
    remaining, ptr = n, 0
    batches = []
    while remaining >= k:
        while not unassigned[order[ptr]]:
            ptr += 1
        seed = int(order[ptr])
        unassigned[seed] = False
        nbrs = index.nearest_unassigned(seed, unassigned, k - 1)
        unassigned[nbrs] = False
        remaining -= k
        g = np.concatenate([[seed], nbrs])
        xy = slide.coords[g]
        if max_pairwise_distance(xy) > d_max:
            continue
        c = medoid_first(xy)
        g = np.concatenate([[g[c]], np.delete(g, c)])
        batches.append(MiniBatch(slide.slide_id, tuple(int(x) for x in slide.spot_indices[g])))
    return batches


def neighborhood_of_seed(batch: MiniBatch) -> list[int]:
    return list(batch.members[1:])


# -- file formats ----------------------------------------------------------
def read_coordinates(path, spot_ids: list[str] | None = None) -> list[SpatialSlide]:
    """Read the ``spot_id slide row col`` TSV into slides.

    With ``spot_ids`` the global index of a spot is its position in that
    list (spots missing from it are skipped); otherwise file order.
    """
    lookup = None if spot_ids is None else {s: i for i, s in enumerate(spot_ids)}
    per_slide: dict[str, tuple[list, list]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ["spot_id", "slide", "row", "col"]:
            raise ValueError(f"{path}: header must be 'spot_id\\tslide\\trow\\tcol'")
        for n, rec in enumerate(reader):
            if not rec:
                continue
            spot, slide, row, col = rec
            if lookup is None:
                gidx = n
            elif spot in lookup:
                gidx = lookup[spot]
            else:
                continue
            idx, xy = per_slide.setdefault(slide, ([], []))
            idx.append(gidx)
            xy.append((float(row), float(col)))
    return [SpatialSlide(s, np.array(i, dtype=np.int64), np.array(xy).reshape(-1, 2))
            for s, (i, xy) in per_slide.items()]


def write_coordinates(path, spot_ids, slides_of, coords) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("spot_id\tslide\trow\tcol\n")
        for s, sl, (r, c) in zip(spot_ids, slides_of, coords):
            fh.write(f"{s}\t{sl}\t{r!r}\t{c!r}\n")


def write_batches(path, batches: list[MiniBatch], spot_ids: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in batches:
            fh.write(f"{b.slide_id}\t{spot_ids[b.seed]}\t"
                     + ",".join(spot_ids[m] for m in b.members) + "\n")


def read_batches(path, spot_ids: list[str]) -> list[MiniBatch]:
    lookup = {s: i for i, s in enumerate(spot_ids)}
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        slide, seed, members = line.split("\t")
        ids = tuple(lookup[m] for m in members.split(","))
        if spot_ids[ids[0]] != seed:
            raise ValueError(f"{path}: seed {seed} is not the first member")
        out.append(MiniBatch(slide, ids))
    return out
