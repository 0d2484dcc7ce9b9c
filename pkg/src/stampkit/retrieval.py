"""Query-reference expression prediction and the residual adapter."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, load_dtn, matmul, save_dtn

DEFAULT_TOP_K = 50
ADAPTER_ALPHA = 0.2


@dataclass(frozen=True)
class ReferenceIndex:
    embeddings: np.ndarray  # [R, d], unit rows
    expressions: np.ndarray  # [R, G]
    gene_names: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return len(self.embeddings)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_dtn(directory / "embeddings.dtn", self.embeddings)
        save_dtn(directory / "expressions.dtn", self.expressions)
        manifest = {"R": self.size, "d": int(self.embeddings.shape[1]),
                    "G_target": int(self.expressions.shape[1]), "genes": list(self.gene_names)}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                                 encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "ReferenceIndex":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        emb = load_dtn(directory / "embeddings.dtn")
        expr = load_dtn(directory / "expressions.dtn")
        if emb.shape != (manifest["R"], manifest["d"]) or expr.shape != (manifest["R"], manifest["G_target"]):
            raise ValueError(f"{directory}: tensor shapes disagree with manifest")
        return build_reference_index(emb, expr, manifest.get("genes", ()))


def build_reference_index(embeddings, expressions, gene_names=()) -> ReferenceIndex:
    emb = np.array(embeddings, dtype=np.float64, ndmin=2)
    expr = np.array(expressions, dtype=np.float64, ndmin=2)
    if len(emb) != len(expr):
        raise ValueError(f"{len(emb)} embeddings but {len(expr)} expression profiles")
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm reference embedding at row {int(np.argmin(norms))}")
    emb = emb / norms[:, None]
    emb.setflags(write=False)
    expr.setflags(write=False)
    return ReferenceIndex(emb, expr, tuple(gene_names))


def top_k_weights(h, index: ReferenceIndex, k: int = DEFAULT_TOP_K,
                  positive_only: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Selected reference ids and their normalized weights for one query."""
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(h)
    if norm == 0:
        raise ValueError("query embedding has zero norm")
    if not 1 <= k <= index.size:
        raise ValueError(f"K={k} must lie in 1..{index.size}")
    hq = h / norm
    sims = index.embeddings @ hq
    order = np.lexsort((np.arange(index.size), -sims))
    if positive_only:
        order = order[sims[order] > 0]
    sel = order[:k]
    dots = sims[sel]
    total = dots.sum()
    if len(sel) == 0 or total == 0:
        raise ValueError("degenerate query: selected similarities sum to zero")
    return sel, dots / total


def predict_expression(h, index: ReferenceIndex, k: int = DEFAULT_TOP_K,
                       positive_only: bool = False) -> np.ndarray:
    """Similarity-weighted sum of the top-``k`` reference profiles.

    Weights are the query's dot products with the (unit) references over
    their sum, so a negative similarity keeps its sign unless
    ``positive_only`` restricts selection to positive matches.
    """
    sel, w = top_k_weights(h, index, k, positive_only)
    if len(sel) == 1:
        return index.expressions[sel[0]].copy()
    return w @ index.expressions[sel]


def predict_many(queries, index: ReferenceIndex, k: int = DEFAULT_TOP_K,
                 positive_only: bool = False) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    return np.stack([predict_expression(q, index, k, positive_only) for q in queries])


class Adapter:
    """Residual bottleneck: ``y = a * MLP(x) + (1 - a) * x`` with a
    ``d -> d/2 -> d`` ReLU MLP."""

    def __init__(self, dim: int, alpha: float = ADAPTER_ALPHA, seed: int = 0,
                 zero_init: bool = False):
        if dim % 2:
            raise ValueError(f"adapter input dimension must be even, got {dim}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        rng = np.random.default_rng(seed)
        half = dim // 2
        scale = 0.0 if zero_init else 1.0
        self.dim = dim
        self.alpha = alpha
        self.params = {
            "w1": Tensor(rng.normal(0, dim ** -0.5, (dim, half)) * scale, requires_grad=True),
            "b1": Tensor(np.zeros(half), requires_grad=True),
            "w2": Tensor(rng.normal(0, half ** -0.5, (half, dim)) * scale, requires_grad=True),
            "b2": Tensor(np.zeros(dim), requires_grad=True),
        }

    def __call__(self, x: Tensor) -> Tensor:
        return adapter_forward(x, self)


def adapter_forward(x, adapter: Adapter) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != adapter.dim:
        raise ValueError(f"adapter expects dimension {adapter.dim}, got {x.shape[-1]}")
    single = x.ndim == 1
    h = x.reshape(1, -1) if single else x
    p = adapter.params
    mlp = matmul((matmul(h, p["w1"]) + p["b1"]).relu(), p["w2"]) + p["b2"]
    y = mlp * adapter.alpha + h * (1.0 - adapter.alpha)
    return y.reshape(-1) if single else y
