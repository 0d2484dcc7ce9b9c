"""Gene vocabulary, sparse expression ingestion, rank tokenization, masking."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
DEFAULT_SEQ_LEN = 1500
DEFAULT_MASK_RATE = 0.15
LIBRARY_SIZE = 10_000.0
MIN_DETECTED_GENES = 100


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class GeneVocabulary:
    names: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for i, name in enumerate(self.names):
            if name in index:
                raise DataError(f"duplicate gene identifier {name!r} at line {i + 1}")
            index[name] = i + 1
        if not index:
            raise DataError("empty vocabulary")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def mask_id(self) -> int:
        return len(self.names) + 1

    @property
    def n_tokens(self) -> int:
        """Embedding table rows: PAD, V genes, MASK."""
        return len(self.names) + 2

    def lookup(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"unknown gene identifier {name!r}") from None

    def name_of(self, token_id: int) -> str:
        if not 1 <= token_id <= self.size:
            raise DataError(f"token id {token_id} is not a gene id")
        return self.names[token_id - 1]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def save(self, path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")


def load_vocabulary(path) -> GeneVocabulary:
    names = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        name = line.strip()
        if not name:
            continue
        if name in seen:
            raise DataError(f"{path}:{lineno}: duplicate gene identifier {name!r} "
                            f"(first seen on line {seen[name]})")
        seen[name] = lineno
        names.append(name)
    if not names:
        raise DataError(f"{path}: vocabulary file is empty")
    return GeneVocabulary(tuple(names))


@dataclass
class ExpressionMatrix:
    """Sparse spot x gene counts in triplet form.  Gene ids are token ids
    (1..V); absent entries are zero."""

    n_spots: int
    n_genes: int
    spot_idx: np.ndarray
    gene_ids: np.ndarray
    counts: np.ndarray
    spot_ids: list[str]

    def __post_init__(self):
        self.spot_idx = np.asarray(self.spot_idx, dtype=np.int64)
        self.gene_ids = np.asarray(self.gene_ids, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if not (len(self.spot_idx) == len(self.gene_ids) == len(self.counts)):
            raise DataError("triplet arrays differ in length")
        if len(self.spot_ids) != self.n_spots:
            raise DataError(f"{len(self.spot_ids)} spot ids for {self.n_spots} spots")
        if len(self.counts):
            if np.any(self.counts <= 0) or not np.all(np.isfinite(self.counts)):
                raise DataError("sparse counts must be finite and > 0")
            if self.gene_ids.min() < 1 or self.gene_ids.max() > self.n_genes:
                raise DataError(f"gene ids must lie in 1..{self.n_genes}")
            if self.spot_idx.min() < 0 or self.spot_idx.max() >= self.n_spots:
                raise DataError(f"spot index out of range [0, {self.n_spots})")

    @classmethod
    def from_dense(cls, dense: np.ndarray, spot_ids=None) -> "ExpressionMatrix":
        """Column ``j`` of ``dense`` is gene token id ``j + 1``."""
        dense = np.nan_to_num(np.asarray(dense, dtype=np.float64), nan=0.0)
        s, g = np.nonzero(dense > 0)
        ids = list(spot_ids) if spot_ids is not None else [f"spot{i}" for i in range(dense.shape[0])]
        return cls(dense.shape[0], dense.shape[1], s, g + 1, dense[s, g], ids)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_spots, self.n_genes))
        np.add.at(out, (self.spot_idx, self.gene_ids - 1), self.counts)
        return out

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(gene_ids, counts) of spot ``i``."""
        sel = self.spot_idx == i
        return self.gene_ids[sel], self.counts[sel]

    def rows(self):
        """Yield (gene_ids, counts) per spot in spot order, one pass."""
        order = np.argsort(self.spot_idx, kind="stable")
        bounds = np.searchsorted(self.spot_idx[order], np.arange(self.n_spots + 1))
        for i in range(self.n_spots):
            sel = order[bounds[i]:bounds[i + 1]]
            yield self.gene_ids[sel], self.counts[sel]

    def detected_per_spot(self) -> np.ndarray:
        return np.bincount(self.spot_idx, minlength=self.n_spots)

    def subset(self, keep) -> "ExpressionMatrix":
        keep = np.asarray(keep, dtype=np.int64)
        remap = np.full(self.n_spots, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        sel = remap[self.spot_idx] >= 0
        return ExpressionMatrix(len(keep), self.n_genes, remap[self.spot_idx[sel]],
                                self.gene_ids[sel], self.counts[sel],
                                [self.spot_ids[i] for i in keep])


def filter_spots(mat: ExpressionMatrix, min_genes: int = MIN_DETECTED_GENES):
    """Drop spots with fewer than ``min_genes`` detected genes.

    Returns the filtered matrix and the kept original indices."""
    keep = np.flatnonzero(mat.detected_per_spot() >= min_genes)
    return mat.subset(keep), keep


def read_expression(path, vocab: GeneVocabulary) -> ExpressionMatrix:
    """Parse the ``#spots <n> genes <V>`` triplet text format."""
    spot_index: dict[str, int] = {}
    s_idx, g_ids, vals = [], [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "#spots" or header[2] != "genes":
            raise DataError(f"{path}: bad header, expected '#spots <n> genes <V>'")
        n_spots, n_genes = int(header[1]), int(header[3])
        if n_genes != vocab.size:
            raise DataError(f"{path}: header declares {n_genes} genes, vocabulary has {vocab.size}")
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            spot, gene, count = parts
            try:
                value = float(count)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad count {count!r}") from None
            if not np.isfinite(value) or value < 0:
                raise DataError(f"{path}:{lineno}: count must be a nonnegative real")
            i = spot_index.setdefault(spot, len(spot_index))
            if value == 0:
                continue
            s_idx.append(i)
            g_ids.append(vocab.lookup(gene))
            vals.append(value)
    if len(spot_index) != n_spots:
        raise DataError(f"{path}: header declares {n_spots} spots, found {len(spot_index)}")
    return ExpressionMatrix(n_spots, n_genes, s_idx, g_ids, vals, list(spot_index))


def write_expression(path, mat: ExpressionMatrix, vocab: GeneVocabulary) -> None:
    order = np.lexsort((mat.gene_ids, mat.spot_idx))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#spots {mat.n_spots} genes {mat.n_genes}\n")
        for k in order:
            fh.write(f"{mat.spot_ids[mat.spot_idx[k]]}\t{vocab.name_of(int(mat.gene_ids[k]))}"
                     f"\t{float(mat.counts[k])!r}\n")


# -- statistics and tokenization ------------------------------------------
def compute_nonzero_means(mat: ExpressionMatrix) -> np.ndarray:
    """Per-gene mean over nonzero entries, indexed by ``gene_id - 1``.

    Genes never observed get 1.0 so dividing by them is a no-op.
    """
    sums = np.bincount(mat.gene_ids - 1, weights=mat.counts, minlength=mat.n_genes)
    # one triplet per (spot, gene) is the norm; count distinct pairs to be safe
    pairs = np.unique(np.stack([mat.spot_idx, mat.gene_ids]), axis=1) if len(mat.counts) else \
        np.zeros((2, 0), dtype=np.int64)
    nnz = np.bincount(pairs[1] - 1, minlength=mat.n_genes)
    means = np.ones(mat.n_genes)
    seen = nnz > 0
    means[seen] = sums[seen] / nnz[seen]
    return means


def tokenize_spot(gene_ids, counts, means: np.ndarray, seq_len: int = DEFAULT_SEQ_LEN) -> np.ndarray:
    """Rank a spot's expressed genes by library-normalized deviation from
    their corpus means and return the top ``seq_len`` ids, PAD-filled.

    Ties are broken by ascending gene id.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    gene_ids = np.asarray(gene_ids, dtype=np.int64)
    counts = np.nan_to_num(np.asarray(counts, dtype=np.float64), nan=0.0)
    out = np.full(seq_len, PAD_ID, dtype=np.int64)
    if len(gene_ids) and len(np.unique(gene_ids)) != len(gene_ids):
        # duplicate triplets for one gene are summed
        gene_ids, inv = np.unique(gene_ids, return_inverse=True)
        counts = np.bincount(inv, weights=counts)
    nz = counts > 0
    gene_ids, v = gene_ids[nz], counts[nz]
    if len(v) == 0:
        return out
    total = v.sum()
    v = v * (LIBRARY_SIZE / total)
    v = v / means[gene_ids - 1]
    order = np.lexsort((gene_ids, -v))
    top = min(seq_len, len(order))
    out[:top] = gene_ids[order[:top]]
    return out


def tokenize_matrix(mat: ExpressionMatrix, means: np.ndarray,
                    seq_len: int = DEFAULT_SEQ_LEN) -> np.ndarray:
    """One token row per spot, ``[n_spots, seq_len]``."""
    out = np.full((mat.n_spots, seq_len), PAD_ID, dtype=np.int64)
    for i, (g, c) in enumerate(mat.rows()):
        out[i] = tokenize_spot(g, c, means, seq_len)
    return out


def n_tokens(seq: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(seq) != PAD_ID))


@dataclass(frozen=True)
class MaskedSequence:
    ids: np.ndarray
    mask_positions: np.ndarray
    targets: np.ndarray


def mask_count(n_tok: int, rate: float) -> int:
    # round-half-even matches Python's round; rule floor is one mask
    return max(1, int(round(rate * n_tok)))


def mask_sequence(seq, mask_id: int, rate: float = DEFAULT_MASK_RATE,
                  rng_seed: int | np.random.Generator = 0) -> MaskedSequence:
    seq = np.asarray(seq, dtype=np.int64)
    if not 0 < rate < 1:
        raise ValueError(f"mask rate must lie in (0, 1), got {rate}")
    n_tok = n_tokens(seq)
    if n_tok == 0:
        raise DataError("cannot mask an all-PAD sequence")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    positions = np.sort(rng.choice(n_tok, size=mask_count(n_tok, rate), replace=False))
    ids = seq.copy()
    targets = seq[positions].copy()
    ids[positions] = mask_id
    return MaskedSequence(ids, positions, targets)


# -- STK1 token container --------------------------------------------------
_STK_MAGIC = b"STK1"


def save_tokens(path, tokens: np.ndarray) -> None:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("token array must be [n_spots, N]")
    with open(path, "wb") as fh:
        fh.write(_STK_MAGIC)
        fh.write(struct.pack("<II", *tokens.shape))
        fh.write(np.ascontiguousarray(tokens, dtype="<u4").tobytes())


def load_tokens(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _STK_MAGIC:
        raise DataError(f"{path}: not an STK1 token file")
    n, seq_len = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + 4 * n * seq_len:
        raise DataError(f"{path}: payload size does not match {n}x{seq_len}")
    return np.frombuffer(raw, dtype="<u4", offset=12).reshape(n, seq_len).astype(np.int64)
