"""Training objectives for gene pretraining and multimodal alignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, as_tensor, cosine_similarity_matrix, l2_normalize, matmul,
                     softmax_cross_entropy, stack)

TAU_INIT = 10.0
TAU_MIN, TAU_MAX = 1.0, 100.0

LOSS_TERMS = ("igr", "cgr", "csp", "p_s", "r_s", "p_r")


@dataclass
class LossBundle:
    """Named loss terms; ``total`` is their plain sum."""

    terms: dict[str, Tensor] = field(default_factory=dict)

    def add(self, name: str, value: Tensor) -> None:
        if name not in LOSS_TERMS:
            raise KeyError(f"unknown loss term {name!r}")
        self.terms[name] = value

    @property
    def total(self) -> Tensor:
        if not self.terms:
            raise ValueError("no loss terms enabled")
        out = None
        for name in LOSS_TERMS:
            if name in self.terms:
                out = self.terms[name] if out is None else out + self.terms[name]
        return out

    def values(self) -> dict[str, float]:
        out = {k: float(v.data) for k, v in self.terms.items()}
        out["total"] = float(self.total.data) if self.terms else 0.0
        return out


def clamp_temperature(tau: Tensor) -> None:
    tau.data = np.clip(tau.data, TAU_MIN, TAU_MAX)


# -- gene reconstruction ---------------------------------------------------
def igr_loss(hidden: Tensor, masked, decode) -> Tensor:
    """Masked-token NLL from each spot's own final hidden states.

    ``hidden`` is ``[B, N, D]`` (or ``[N, D]`` for one spot), ``masked`` the
    matching MaskedSequence (or list), ``decode`` maps ``[M, D]`` hidden
    vectors to vocabulary logits.  Per-spot means are averaged over spots.
    """
    if hidden.ndim == 2:
        hidden = hidden.reshape(1, *hidden.shape)
    seqs = masked if isinstance(masked, (list, tuple)) else [masked]
    if len(seqs) != hidden.shape[0]:
        raise ValueError(f"{len(seqs)} masked sequences for {hidden.shape[0]} hidden rows")
    rows, cols, targets, weights = [], [], [], []
    for b, m in enumerate(seqs):
        k = len(m.mask_positions)
        if k == 0:
            raise ValueError(f"sequence {b} has an empty mask set")
        rows.extend([b] * k)
        cols.extend(m.mask_positions.tolist())
        targets.extend(m.targets.tolist())
        weights.extend([1.0 / (k * len(seqs))] * k)
    h = hidden[np.asarray(rows), np.asarray(cols)]
    return softmax_cross_entropy(decode(h), np.asarray(targets), np.asarray(weights))


def neighborhood_context(neighbor_pooled) -> Tensor:
    """Average of the neighbours' pooled states, ``[K, D] -> [D]``."""
    if isinstance(neighbor_pooled, (list, tuple)):
        if not neighbor_pooled:
            raise ValueError("CGR needs at least one neighbour")
        neighbor_pooled = stack(list(neighbor_pooled), axis=0)
    if neighbor_pooled.shape[0] == 0:
        raise ValueError("CGR needs at least one neighbour")
    return neighbor_pooled.mean(axis=0)


def cgr_loss_from_context(context: Tensor, masked, decode) -> Tensor:
    """Score every masked target of each seed with one logit vector
    decoded from that seed's neighbourhood context ``[S, D]``."""
    if context.ndim == 1:
        context = context.reshape(1, -1)
    seqs = masked if isinstance(masked, (list, tuple)) else [masked]
    if len(seqs) != context.shape[0]:
        raise ValueError(f"{len(seqs)} seeds for {context.shape[0]} context vectors")
    logits = decode(context)
    rows, targets, weights = [], [], []
    for s, m in enumerate(seqs):
        k = len(m.targets)
        if k == 0:
            raise ValueError(f"seed {s} has an empty mask set")
        rows.extend([s] * k)
        targets.extend(m.targets.tolist())
        weights.extend([1.0 / (k * len(seqs))] * k)
    return softmax_cross_entropy(logits[np.asarray(rows)], np.asarray(targets), np.asarray(weights))


def cgr_loss(neighbor_pooled, masked_seed, decode) -> Tensor:
    return cgr_loss_from_context(neighborhood_context(neighbor_pooled), masked_seed, decode)


def gene_pretrain_loss(igr: Tensor | None, cgr: Tensor | None = None) -> Tensor:
    if igr is None and cgr is None:
        raise ValueError("at least one gene loss term is required")
    if cgr is None:
        return as_tensor(igr)
    if igr is None:
        return as_tensor(cgr)
    return as_tensor(igr) + as_tensor(cgr)


# -- alignment -------------------------------------------------------------
def csp_logits(z_pool: Tensor, z_ref: Tensor) -> Tensor:
    """Cosine similarity of each of the 9 pooled bins with the reference."""
    if z_pool.ndim == 2:
        z_pool = z_pool.reshape(1, *z_pool.shape)
        z_ref = z_ref.reshape(1, -1)
    b, g, d = z_pool.shape
    ref = l2_normalize(z_ref, "z_ref row").reshape(b, d, 1)
    pool = l2_normalize(z_pool, "pooled bin")
    return matmul(pool, ref).reshape(b, g)


def csp_loss(z_pool: Tensor, z_ref: Tensor, pos) -> Tensor:
    """Cross-entropy of the patch position over unscaled cosine logits."""
    pos = np.atleast_1d(np.asarray(pos, dtype=np.int64))
    logits = csp_logits(z_pool, z_ref)
    if pos.min() < 0 or pos.max() >= logits.shape[1]:
        raise ValueError(f"position label out of range [0, {logits.shape[1]})")
    return softmax_cross_entropy(logits, pos)


def _paired_logits(a: Tensor, b: Tensor, tau) -> Tensor:
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"contrastive inputs must be matching [M, d], got {a.shape} and {b.shape}")
    tau = tau if isinstance(tau, Tensor) else Tensor(float(tau))
    return matmul(a, b.swap_last()) * tau


def infonce_symmetric(a: Tensor, b: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE over in-batch negatives; rows are unit vectors."""
    logits = _paired_logits(a, b, tau)
    diag = np.arange(a.shape[0])
    return (softmax_cross_entropy(logits, diag) * 0.5
            + softmax_cross_entropy(logits.swap_last(), diag) * 0.5)


def intra_modal_loss(p: Tensor, r: Tensor, tau) -> Tensor:
    """Patch-to-region InfoNCE, one direction, keeping the 1/(2M) factor."""
    logits = _paired_logits(p, r, tau)
    return softmax_cross_entropy(logits, np.arange(p.shape[0])) * 0.5


def align_total_loss(csp=None, p_s=None, r_s=None, p_r=None) -> Tensor:
    terms = [t for t in (csp, p_s, r_s, p_r) if t is not None]
    if not terms:
        raise ValueError("at least one alignment loss term is required")
    out = as_tensor(terms[0])
    for t in terms[1:]:
        out = out + t
    return out


__all__ = [
    "LossBundle", "clamp_temperature", "igr_loss", "cgr_loss", "cgr_loss_from_context",
    "neighborhood_context", "gene_pretrain_loss", "csp_logits", "csp_loss",
    "infonce_symmetric", "intra_modal_loss", "align_total_loss", "cosine_similarity_matrix",
]
