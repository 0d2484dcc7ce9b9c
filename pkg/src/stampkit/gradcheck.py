"""Finite-difference checks of every training objective on small random inputs.

Each check perturbs one input tensor that feeds the whole computation
(embedded tokens, patch tokens, features or a head weight) and compares
the analytic gradient with central differences.
"""

from __future__ import annotations

import numpy as np

from . import genedata as gd
from .encoders import GeneEncoder, GeneEncoderConfig, Heads, VisionEncoder, VisionEncoderConfig, grid_pool
from .losses import (align_total_loss, cgr_loss_from_context, csp_loss, igr_loss,
                     infonce_symmetric, intra_modal_loss)
from .tensor import Tensor, finite_difference_check, l2_normalize

GRADCHECK_TOLERANCE = 1e-4


def _gene_setup(rng, batch: int, seq_len: int = 10, vocab: int = 30, dim: int = 16):
    enc = GeneEncoder(GeneEncoderConfig(vocab_size=vocab + 2, dim=dim, n_layers=2, n_heads=2,
                                        ffn_dim=32, max_len=seq_len), seed=int(rng.integers(2**31)))
    tokens = np.zeros((batch, seq_len), dtype=np.int64)
    for b in range(batch):
        n = int(rng.integers(4, seq_len + 1))
        tokens[b, :n] = rng.choice(np.arange(1, vocab + 1), size=n, replace=False)
    masked = [gd.mask_sequence(t, enc.mask_id, 0.3, rng) for t in tokens]
    ids = np.stack([m.ids for m in masked])
    x0, mask = enc.embed(ids)
    return enc, masked, x0, mask


def _vision_setup(rng, batch: int):
    # 4 tokens per side so the 3x3 pooling has unequal bins
    cfg = VisionEncoderConfig(image_side=16, mini_patch_side=4, channels=3, dim=16, n_layers=2,
                              n_heads=2, ffn_dim=32)
    return VisionEncoder(cfg, seed=int(rng.integers(2**31))), cfg


def check_igr(rng, eps: float) -> float:
    enc, masked, x0, mask = _gene_setup(rng, 2)
    return finite_difference_check(
        lambda x: igr_loss(enc.encode(x, mask)[0], masked, enc.decode), x0.detach(), eps)


def check_cgr(rng, eps: float) -> float:
    enc, masked, x0, mask = _gene_setup(rng, 4)
    seed = masked[:1]

    def f(x):
        _, pooled = enc.encode(x, mask)
        return cgr_loss_from_context(pooled[1:].mean(axis=0, keepdims=True), seed, enc.decode)
    return finite_difference_check(f, x0.detach(), eps)


def check_csp(rng, eps: float) -> float:
    vis, cfg = _vision_setup(rng, 2)
    heads = Heads(cfg.dim, 8, 8, seed=1)
    regions = rng.normal(size=(2, 3, cfg.image_side, cfg.image_side))
    refs = rng.normal(size=(2, 3, cfg.mini_patch_side, cfg.mini_patch_side))
    pos = rng.integers(0, 9, 2)
    tokens = vis.patchify(regions).detach()

    def f(t):
        _, tok, pre = vis.forward(None, refs, tokens=t)
        return csp_loss(heads.csp(grid_pool(tok, cfg.tokens_per_side)), heads.csp(pre), pos)
    return finite_difference_check(f, tokens, eps)


def _contrastive_setup(rng, m: int = 5, d_in: int = 12, d: int = 8):
    heads = Heads(d_in, d_in, d, seed=int(rng.integers(2**31)))
    a = Tensor(rng.normal(size=(m, d_in)))
    b = Tensor(rng.normal(size=(m, d_in)))
    return heads, a, b


def check_p_s(rng, eps: float) -> float:
    heads, p, g = _contrastive_setup(rng)
    gz = l2_normalize(heads.gene(g))
    return max(
        finite_difference_check(lambda x: infonce_symmetric(l2_normalize(heads.image(x)), gz, heads.tau),
                                p, eps),
        finite_difference_check(
            lambda t: infonce_symmetric(l2_normalize(heads.image(p)), gz, t), heads.tau.detach(), eps),
    )


def check_r_s(rng, eps: float) -> float:
    heads, r, g = _contrastive_setup(rng)
    rz = l2_normalize(heads.image(r))
    return finite_difference_check(
        lambda x: infonce_symmetric(rz, l2_normalize(heads.gene(x)), heads.tau), g, eps)


def check_p_r(rng, eps: float) -> float:
    heads, p, r = _contrastive_setup(rng)
    rz = l2_normalize(heads.image(r))
    return finite_difference_check(
        lambda x: intra_modal_loss(l2_normalize(heads.image(x)), rz, heads.tau), p, eps)


def check_align(rng, eps: float) -> float:
    """All four alignment terms through both encoders, perturbing the image
    projection (shared by patches and regions) and the gene embeddings."""
    m = 3
    enc, _, x0, mask = _gene_setup(rng, m)
    vis, cfg = _vision_setup(rng, m)
    heads = Heads(cfg.dim, enc.config.dim, 8, seed=3)
    images = rng.normal(size=(m, 3, cfg.image_side, cfg.image_side))
    regions = rng.normal(size=(m, 3, cfg.image_side, cfg.image_side))
    refs = rng.normal(size=(m, 3, cfg.mini_patch_side, cfg.mini_patch_side))
    pos = rng.integers(0, 9, m)

    def total(x_gene):
        _, pooled = enc.encode(x_gene, mask)
        g = l2_normalize(heads.gene(pooled))
        cls, _, _ = vis.forward(images)
        cls_r, tok_r, pre_r = vis.forward(regions, refs)
        p = l2_normalize(heads.image(cls))
        r = l2_normalize(heads.image(cls_r))
        csp = csp_loss(heads.csp(grid_pool(tok_r, cfg.tokens_per_side)), heads.csp(pre_r), pos)
        return align_total_loss(csp, infonce_symmetric(p, g, heads.tau),
                                infonce_symmetric(r, g, heads.tau), intra_modal_loss(p, r, heads.tau))

    err_gene = finite_difference_check(total, x0.detach(), eps)
    original = heads.params["img_proj_w"]

    def via_proj(w):
        heads.params["img_proj_w"] = w
        try:
            return total(x0.detach())
        finally:
            heads.params["img_proj_w"] = original
    return max(err_gene, finite_difference_check(via_proj, original.detach(), eps))


GRADCHECKS = {
    "igr": check_igr,
    "cgr": check_cgr,
    "csp": check_csp,
    "p_s": check_p_s,
    "r_s": check_r_s,
    "p_r": check_p_r,
    "align": check_align,
}


def run_gradchecks(seed: int = 0, eps: float = 1e-5, names=None) -> dict[str, float]:
    """Max relative error per objective."""
    out = {}
    for name in names or GRADCHECKS:
        out[name] = GRADCHECKS[name](np.random.default_rng([seed, len(name), ord(name[0])]), eps)
    return out
