"""Planted-structure paired image / expression data on a spot grid.

Each slide is a ``rows x cols`` grid.  Spots are split into spatially
contiguous clusters (Voronoi cells of far-apart centres), and every
cluster into two zones along its principal axis.  A spot expresses its
cluster's core genes and its zone's genes; images carry a cluster colour
and stripe texture, plus a per-spot colour offset that makes individual
patches recognisable inside a region mosaic.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .encoders import CSP_GRID
from .genedata import ExpressionMatrix, GeneVocabulary, write_expression
from .spatial import write_coordinates
from .tensor import load_dtn, save_dtn

PALETTE = np.array([
    [1.0, -0.6, -0.6],
    [-0.6, 1.0, -0.6],
    [-0.6, -0.6, 1.0],
    [1.0, 1.0, -0.8],
    [-0.8, 1.0, 1.0],
    [1.0, -0.8, 1.0],
])


@dataclass
class SyntheticSpec:
    n_spots: int = 600
    n_clusters: int = 3
    n_genes: int = 200
    n_slides: int = 1
    grid_cols: int = 30
    image_side: int = 48
    mini_patch_side: int = 8
    channels: int = 3
    core_genes: int = 8
    zone_genes: int = 10
    zones_per_cluster: int = 4  # 1, 2 (halves) or 4 (quadrants)
    noise: float = 1.0
    leak_rate: float = 0.01
    spot_offset: float = 0.5

    def validate(self) -> None:
        if self.n_clusters < 2:
            raise ValueError("need at least two clusters")
        if self.n_clusters > len(PALETTE):
            raise ValueError(f"at most {len(PALETTE)} clusters are supported")
        if self.n_spots % self.n_slides:
            raise ValueError("n_spots must divide evenly into slides")
        per = self.n_spots // self.n_slides
        if per % self.grid_cols or per // self.grid_cols < CSP_GRID or self.grid_cols < CSP_GRID:
            raise ValueError(f"{per} spots per slide do not fill a grid with "
                             f"{self.grid_cols} columns and at least {CSP_GRID} rows")
        if per < 2 * self.n_clusters:
            raise ValueError("grid too small for the requested clusters")
        if self.zones_per_cluster not in (1, 2, 4):
            raise ValueError("zones_per_cluster must be 1, 2 or 4")
        need = self.n_clusters * (self.core_genes + self.zones_per_cluster * self.zone_genes)
        if need > self.n_genes:
            raise ValueError(f"{need} signature genes do not fit in {self.n_genes} genes")
        if self.image_side % self.mini_patch_side:
            raise ValueError("image side must be divisible by the mini-patch side")
        if not 0 <= self.leak_rate <= 0.5:
            raise ValueError("leak_rate must lie in [0, 0.5]")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")

    @property
    def grid_rows(self) -> int:
        return self.n_spots // self.n_slides // self.grid_cols


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    vocab: GeneVocabulary
    counts: np.ndarray  # [n, G] dense
    spot_ids: list[str]
    slides: list[str]
    grid: np.ndarray  # [n, 2] integer (row, col)
    labels: np.ndarray  # planted cluster ids; evaluation only
    zones: np.ndarray
    images: np.ndarray  # [n, C, H, W]
    regions: np.ndarray  # [n, C, H, W]
    pos: np.ndarray  # [n] position of the spot's patch inside its region

    def expression(self) -> ExpressionMatrix:
        return ExpressionMatrix.from_dense(self.counts, self.spot_ids)


def block_resize(img: np.ndarray, side: int) -> np.ndarray:
    """Area-average ``[..., H, W]`` down to ``side x side`` (H divisible)."""
    h = img.shape[-1]
    if h % side:
        raise ValueError(f"cannot block-resize {h} to {side}")
    f = h // side
    lead = img.shape[:-2]
    return img.reshape(*lead, side, f, side, f).mean(axis=(-3, -1))


def reference_patch(img: np.ndarray, mini_patch_side: int) -> np.ndarray:
    return block_resize(img, mini_patch_side)


def _farthest_points(pts: np.ndarray, k: int, rng) -> np.ndarray:
    chosen = [int(rng.integers(len(pts)))]
    d = ((pts - pts[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, ((pts - pts[nxt]) ** 2).sum(1))
    return pts[chosen]


def _plant_layout(rows: int, cols: int, n_clusters: int, rng, zones_per_cluster: int = 4):
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    centres = _farthest_points(grid, n_clusters, rng) + rng.normal(0, 0.25, (n_clusters, 2))
    labels = ((grid[:, None, :] - centres[None]) ** 2).sum(-1).argmin(1)
    zones = np.zeros(len(grid), dtype=np.int64)
    for c in range(n_clusters):
        sel = np.flatnonzero(labels == c)
        pts = grid[sel] - grid[sel].mean(0)
        if len(sel) > 1 and zones_per_cluster > 1:
            # halves split on the principal axis, quadrants on both axes
            _, _, vt = np.linalg.svd(pts, full_matrices=False)
            for axis in range(zones_per_cluster // 2):
                proj = pts @ vt[axis]
                zones[sel] += (proj > np.median(proj)).astype(np.int64) << axis
    return grid.astype(np.int64), labels, zones


def _expression(spec: SyntheticSpec, labels, zones, rng) -> np.ndarray:
    g = spec.n_genes
    genes = rng.permutation(g)
    per = spec.core_genes + spec.zones_per_cluster * spec.zone_genes
    rates = rng.uniform(5.0, 30.0, g)
    n = len(labels)
    lam = np.zeros((n, g))
    signature = np.zeros(g, dtype=bool)
    for c in range(spec.n_clusters):
        block = genes[c * per:(c + 1) * per]
        core = block[:spec.core_genes]
        zone_sets = np.split(block[spec.core_genes:], spec.zones_per_cluster)
        signature[block] = True
        rows = labels == c
        lam[np.ix_(rows, core)] = rates[core]
        for z, zg in enumerate(zone_sets):
            lam[np.ix_(rows & (zones == z), zg)] = rates[zg]
    if spec.noise == 0:
        return np.round(lam)
    counts = rng.poisson(lam).astype(np.float64)
    # sparse low-level leakage of every gene, scaled by noise
    leak = rng.random((n, g)) < min(0.5, spec.leak_rate * spec.noise)
    counts[leak] += rng.poisson(2.0, leak.sum()) + 1
    return counts


def _texture(side: int, theta: float, freq: float, phase: float) -> np.ndarray:
    y, x = np.mgrid[0:side, 0:side] / side
    return np.sin(2 * np.pi * freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)


def _images(spec: SyntheticSpec, labels, zones, rng) -> np.ndarray:
    n = len(labels)
    side, ch = spec.image_side, spec.channels
    thetas = np.linspace(0, np.pi, spec.n_clusters, endpoint=False) + rng.uniform(0, 0.3)
    freqs = rng.uniform(2.0, 4.0, spec.n_clusters)
    out = np.empty((n, ch, side, side))
    for i in range(n):
        c = labels[i]
        colour = PALETTE[c, :ch]
        amp = 0.6 + 0.1 * zones[i]
        tex = amp * _texture(side, thetas[c], freqs[c], rng.uniform(0, 2 * np.pi))
        offset = rng.normal(0.0, spec.spot_offset, ch)
        img = colour[:, None, None] + offset[:, None, None] + tex[None] * 0.5
        img += rng.normal(0.0, 0.3 * spec.noise, (ch, side, side))
        out[i] = img
    return out


def region_for(images_by_cell: dict, r: int, c: int, pos: int, side: int) -> np.ndarray:
    """Mosaic of the 3x3 cell neighbourhood placing (r, c) at ``pos``,
    area-resized back to ``side``."""
    pr, pc = divmod(pos, CSP_GRID)
    top, left = r - pr, c - pc
    tiles = [[images_by_cell[(top + i, left + j)] for j in range(CSP_GRID)]
             for i in range(CSP_GRID)]
    mosaic = np.concatenate([np.concatenate(row, axis=-1) for row in tiles], axis=-2)
    return block_resize(mosaic, side)


def feasible_positions(r: int, c: int, rows: int, cols: int) -> list[int]:
    out = []
    for pr in range(CSP_GRID):
        for pc in range(CSP_GRID):
            top, left = r - pr, c - pc
            if 0 <= top and top + CSP_GRID <= rows and 0 <= left and left + CSP_GRID <= cols:
                out.append(pr * CSP_GRID + pc)
    return out


def make_csp_tuples(images: np.ndarray, grid: np.ndarray, slides, rows: int, cols: int,
                    spots, rng, mini_patch_side: int):
    """Build (region, ref, pos) for ``spots``; each spot's position is drawn
    uniformly among placements that keep the region on the grid."""
    side = images.shape[-1]
    cells = {}
    for i, (sl, (r, c)) in enumerate(zip(slides, grid)):
        cells.setdefault(sl, {})[(int(r), int(c))] = images[i]
    regions, refs, pos = [], [], []
    for i in spots:
        r, c = int(grid[i, 0]), int(grid[i, 1])
        choices = feasible_positions(r, c, rows, cols)
        p = int(choices[rng.integers(len(choices))])
        regions.append(region_for(cells[slides[i]], r, c, p, side))
        refs.append(reference_patch(images[i], mini_patch_side))
        pos.append(p)
    return np.array(regions), np.array(refs), np.array(pos, dtype=np.int64)


def generate_synthetic(spec: SyntheticSpec | None = None, rng_seed: int = 0) -> SyntheticDataset:
    spec = spec or SyntheticSpec()
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    rows, cols = spec.grid_rows, spec.grid_cols
    grids, labels, zones, slides = [], [], [], []
    for s in range(spec.n_slides):
        grid, lab, zon = _plant_layout(rows, cols, spec.n_clusters, rng, spec.zones_per_cluster)
        grids.append(grid)
        labels.append(lab)
        zones.append(zon)
        slides += [f"slide{s}"] * len(grid)
    grid = np.concatenate(grids)
    labels = np.concatenate(labels)
    zones = np.concatenate(zones)
    counts = _expression(spec, labels, zones, rng)
    images = _images(spec, labels, zones, rng)
    regions, _, pos = make_csp_tuples(images, grid, slides, rows, cols, range(len(grid)), rng,
                                      spec.mini_patch_side)
    vocab = GeneVocabulary(tuple(f"ENSGSYN{i:011d}" for i in range(1, spec.n_genes + 1)))
    spot_ids = [f"{sl}_r{r:03d}_c{c:03d}" for sl, (r, c) in zip(slides, grid)]
    return SyntheticDataset(spec, vocab, counts, spot_ids, slides, grid, labels, zones,
                            images, regions, pos)


# -- on-disk layout --------------------------------------------------------
SPOT_SPACING = 100.0  # array units between grid neighbours


def write_dataset(ds: SyntheticDataset, out_dir, rng_seed: int) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.vocab.save(out / "vocab.txt")
    write_expression(out / "expression.tsv", ds.expression(), ds.vocab)
    write_coordinates(out / "coords.tsv", ds.spot_ids, ds.slides,
                      [(float(r) * SPOT_SPACING, float(c) * SPOT_SPACING) for r, c in ds.grid])
    save_dtn(out / "images.dtn", ds.images)
    save_dtn(out / "regions.dtn", ds.regions)
    with open(out / "images.tsv", "w", encoding="utf-8") as fh:
        fh.write("spot_id\tpos\n")
        for s, p in zip(ds.spot_ids, ds.pos):
            fh.write(f"{s}\t{int(p)}\n")
    with open(out / "labels.tsv", "w", encoding="utf-8") as fh:
        fh.write("spot_id\tcluster\tzone\n")
        for s, c, z in zip(ds.spot_ids, ds.labels, ds.zones):
            fh.write(f"{s}\t{int(c)}\t{int(z)}\n")
    manifest = {"spec": asdict(ds.spec), "seed": rng_seed, "n_spots": len(ds.spot_ids),
                "grid_rows": ds.spec.grid_rows, "grid_cols": ds.spec.grid_cols,
                "files": ["vocab.txt", "expression.tsv", "coords.tsv", "images.dtn",
                          "regions.dtn", "images.tsv", "labels.tsv"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return manifest


def read_images(directory):
    """(spot ids, images, regions, pos) from an image directory."""
    directory = Path(directory)
    images = load_dtn(directory / "images.dtn")
    regions = load_dtn(directory / "regions.dtn")
    ids, pos = [], []
    lines = (directory / "images.tsv").read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != ["spot_id", "pos"]:
        raise ValueError(f"{directory}/images.tsv: header must be 'spot_id\\tpos'")
    for line in lines[1:]:
        if line.strip():
            s, p = line.split("\t")
            ids.append(s)
            pos.append(int(p))
    if len(ids) != len(images) or regions.shape != images.shape:
        raise ValueError(f"{directory}: image, region and index counts disagree")
    return ids, images, regions, np.array(pos, dtype=np.int64)


def read_labels(path) -> dict[str, int]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = {}
    for line in lines[1:]:
        if line.strip():
            parts = line.split("\t")
            out[parts[0]] = int(parts[1])
    return out
