import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stampkit import encoders as E
from stampkit.tensor import Tensor, finite_difference_check


def small_gene(layers=2, seed=0, **kw):
    cfg = E.GeneEncoderConfig(vocab_size=22, dim=16, n_layers=layers, n_heads=2, ffn_dim=24, max_len=8, **kw)
    return E.GeneEncoder(cfg, seed=seed)


def small_vision(layers=2, side=24, patch=4, seed=0):
    cfg = E.VisionEncoderConfig(image_side=side, mini_patch_side=patch, dim=16, n_layers=layers,
                                n_heads=2, ffn_dim=24)
    return E.VisionEncoder(cfg, seed=seed)


# -- gene encoder ------------------------------------------------------------------
def test_full_scale_config():
    c = E.GeneEncoderConfig.full_scale()
    assert (c.dim, c.n_layers, c.n_heads, c.ffn_dim, c.max_len) == (512, 12, 16, 1024, 1500)
    assert c.vocab_size == 20_312 and c.ln_eps == 1e-12


def test_config_rejects_bad_heads():
    with pytest.raises(ValueError):
        E.GeneEncoderConfig(vocab_size=10, dim=10, n_heads=3)


def test_embed_rejects_out_of_range():
    enc = small_gene()
    with pytest.raises(ValueError):
        enc.embed([[1, 22]])
    with pytest.raises(ValueError):
        enc.embed(np.ones((1, 9), dtype=int))


def test_all_pad_rejected():
    with pytest.raises(ValueError):
        small_gene().forward([[0, 0, 0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31))
def test_pad_content_never_changes_pooled(n, seed):
    rng = np.random.default_rng(seed)
    enc = small_gene()
    ids = np.zeros((1, 8), dtype=int)
    ids[0, :n] = rng.choice(np.arange(1, 21), n, replace=False)
    x0, mask = enc.embed(ids)
    junk = x0.numpy().copy()
    junk[0, n:] = rng.normal(size=(8 - n, 16)) * 10
    _, a = enc.encode(x0, mask)
    _, b = enc.encode(Tensor(junk), mask)
    np.testing.assert_allclose(a.numpy(), b.numpy(), rtol=0, atol=1e-12)


def test_zero_layers_pool_is_masked_mean_of_embeddings():
    enc = small_gene(layers=0)
    ids = np.array([[3, 5, 7, 0, 0, 0, 0, 0]])
    x0, mask = enc.embed(ids)
    _, pooled = enc.encode(x0, mask)
    np.testing.assert_allclose(pooled.numpy()[0], x0.numpy()[0, :3].mean(axis=0), atol=1e-15)


def test_permutation_equivariance_without_positions():
    enc = small_gene()
    enc.params["pos_emb"].data[:] = 0.0
    ids = np.array([[4, 9, 2, 11, 6, 0, 0, 0]])
    perm = np.array([3, 0, 4, 1, 2, 5, 6, 7])
    h, pooled = enc.forward(ids)
    hp, pooled_p = enc.forward(ids[:, perm])
    np.testing.assert_allclose(hp.numpy()[0, :5], h.numpy()[0, perm[:5]], atol=1e-12)
    np.testing.assert_allclose(pooled_p.numpy(), pooled.numpy(), atol=1e-12)


def test_pooled_gradient_wrt_embedding_table():
    enc = small_gene()
    ids = np.array([[4, 9, 2, 0, 0, 0, 0, 0], [1, 3, 5, 7, 8, 10, 0, 0]])
    w = Tensor(np.random.default_rng(0).normal(size=(2, 16)))
    original = enc.params["tok_emb"]

    def f(table):
        enc.params["tok_emb"] = table
        try:
            return (enc.forward(ids)[1] * w).sum()
        finally:
            enc.params["tok_emb"] = original
    assert finite_difference_check(f, original.detach()) < 1e-4


def test_decoder_is_tied():
    enc = small_gene()
    h = Tensor(np.random.default_rng(1).normal(size=(3, 16)))
    logits = enc.decode(h).numpy()
    np.testing.assert_allclose(logits, h.numpy() @ enc.params["tok_emb"].numpy().T, atol=1e-12)
    assert logits.shape == (3, 22)
    assert enc.mask_id == 21


def test_forward_deterministic_without_dropout():
    ids = np.array([[4, 9, 2, 11, 0, 0, 0, 0]])
    a = small_gene(seed=3).forward(ids)[1].numpy()
    b = small_gene(seed=3).forward(ids)[1].numpy()
    assert a.tobytes() == b.tobytes()


def test_dropout_only_with_rng():
    enc = small_gene(dropout=0.5)
    ids = np.array([[4, 9, 2, 11, 0, 0, 0, 0]])
    a = enc.forward(ids)[1].numpy()
    assert a.tobytes() == enc.forward(ids)[1].numpy().tobytes()
    assert not np.allclose(a, enc.forward(ids, np.random.default_rng(0))[1].numpy())


# -- vision encoder ------------------------------------------------------------------
@pytest.mark.parametrize("side,patch,n", [(48, 8, 36), (224, 16, 196)])
def test_patch_counts(side, patch, n):
    assert E.patchify_images(np.zeros((1, 3, side, side)), patch).shape == (1, n, 3 * patch * patch)
    assert E.VisionEncoderConfig(image_side=side, mini_patch_side=patch).n_tokens == n


def test_patchify_row_major():
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    p = E.patchify_images(img, 2)
    assert p[0, 1].tolist() == [2, 3, 6, 7]
    assert p[0, 2].tolist() == [8, 9, 12, 13]


def test_indivisible_rejected():
    with pytest.raises(ValueError):
        E.VisionEncoderConfig(image_side=50, mini_patch_side=8)
    with pytest.raises(ValueError):
        E.patchify_images(np.zeros((1, 3, 10, 10)), 4)


def test_constant_image_identical_tokens():
    vis = small_vision()
    tok = vis.patchify(np.full((1, 3, 24, 24), 0.7)).numpy()[0]
    assert np.all(tok == tok[0])


def test_sequence_layout_and_shared_weights():
    vis = small_vision()
    imgs = np.random.default_rng(2).normal(size=(2, 3, 24, 24))
    refs = np.random.default_rng(3).normal(size=(2, 3, 4, 4))
    cls, tok, pre = vis.forward(imgs)
    cls_r, tok_r, pre_r = vis.forward(imgs, refs)
    assert vis.params["pos_emb"].shape[0] == 36 + 2
    assert cls.shape == (2, 16) and tok.shape == (2, 36, 16) and pre.shape == (2, 16)
    assert tok_r.shape == tok.shape
    # the reference patch changes every output through attention
    assert not np.allclose(cls.numpy(), cls_r.numpy())
    with pytest.raises(ValueError):
        vis.forward(imgs, np.zeros((2, 3, 8, 8)))


def test_identity_blocks_cls_is_input_embedding():
    vis = small_vision(layers=0)
    cls, _, pre = vis.forward(np.random.default_rng(4).normal(size=(1, 3, 24, 24)))
    p = vis.params
    np.testing.assert_allclose(cls.numpy()[0], p["cls"].numpy() + p["pos_emb"].numpy()[0], atol=1e-15)
    np.testing.assert_allclose(pre.numpy()[0], p["pretext"].numpy() + p["pos_emb"].numpy()[1], atol=1e-15)


# -- grid pooling ------------------------------------------------------------------------
@pytest.mark.parametrize("n,bins", [(3, [1, 1, 1]), (4, [2, 1, 1]), (5, [2, 2, 1]),
                                    (6, [2, 2, 2]), (14, [5, 5, 4])])
def test_grid_bins(n, bins):
    assert E.grid_bins(n) == bins
    assert sum(bins) == n


def test_grid_bins_rejects_small():
    with pytest.raises(ValueError):
        E.grid_bins(2)


def test_grid_pool_examples():
    const = Tensor(np.full((36, 5), 2.5))
    np.testing.assert_allclose(E.grid_pool(const, 6).numpy(), 2.5)
    x = np.random.default_rng(5).normal(size=(36, 5))
    out = E.grid_pool(Tensor(x), 6).numpy()
    np.testing.assert_allclose(out[0], x[[0, 1, 6, 7]].mean(axis=0), atol=1e-15)


@pytest.mark.parametrize("n", [3, 4, 5, 6, 7, 14])
def test_grid_pool_matches_loop_oracle(n):
    x = np.random.default_rng(n).normal(size=(2, n * n, 3))
    out = E.grid_pool(Tensor(x), n).numpy()
    sizes = E.grid_bins(n)
    edges = np.concatenate([[0], np.cumsum(sizes)])
    counts = np.zeros(n * n, dtype=int)
    for bi in range(3):
        for bj in range(3):
            cells = [r * n + c for r in range(edges[bi], edges[bi + 1]) for c in range(edges[bj], edges[bj + 1])]
            counts[cells] += 1
            np.testing.assert_allclose(out[:, bi * 3 + bj], x[:, cells].mean(axis=1), atol=1e-14)
    # every token lands in exactly one bin
    assert np.all(counts == 1)


def test_grid_pool_rejects_non_square():
    with pytest.raises(ValueError):
        E.grid_pool(Tensor(np.zeros((35, 2))), 6)


# -- heads -----------------------------------------------------------------------------------
def test_identity_projection():
    x = Tensor(np.random.default_rng(6).normal(size=(4, 5)))
    np.testing.assert_allclose(E.project(x, Tensor(np.eye(5))).numpy(), x.numpy())


def test_heads_shapes_and_gradient():
    heads = E.Heads(16, 12, 8, seed=0)
    assert float(heads.tau.numpy()) == 10.0
    x = np.random.default_rng(7).normal(size=(3, 16))
    assert heads.csp(Tensor(x)).shape == (3, 16)
    assert heads.image(Tensor(x)).shape == (3, 8)
    assert heads.gene(Tensor(np.ones((3, 12)))).shape == (3, 8)
    w = Tensor(np.random.default_rng(8).normal(size=(3, 16)))
    assert finite_difference_check(lambda t: (heads.csp(t) * w).sum(), Tensor(x)) < 1e-4


# -- checkpoints ------------------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    enc = small_gene(seed=9)
    E.save_params(tmp_path, {"gene": enc.params}, {"gene": E.config_dict(enc.config)})
    groups, cfg = E.load_params(tmp_path)
    back = E.GeneEncoder(E.GeneEncoderConfig(**cfg["gene"]), params=groups["gene"])
    ids = np.array([[4, 9, 2, 0, 0, 0, 0, 0]])
    assert back.forward(ids)[1].numpy().tobytes() == enc.forward(ids)[1].numpy().tobytes()


def test_checkpoint_shape_mismatch(tmp_path):
    import json
    enc = small_gene()
    E.save_params(tmp_path, {"gene": enc.params}, {})
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["params"]["gene/tok_emb"]["shape"] = [1, 1]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ValueError):
        E.load_params(tmp_path)
