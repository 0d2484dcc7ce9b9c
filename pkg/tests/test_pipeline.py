import copy
import json

import numpy as np
import pytest

from stampkit import pipeline as P
from stampkit.config import AlignConfig, LossToggles, Stage1Config, Stage2Config, load_config
from stampkit.encoders import GeneEncoder, GeneEncoderConfig, Heads, VisionEncoder, VisionEncoderConfig
from stampkit.genedata import DataError
from stampkit.retrieval import Adapter
from stampkit.spatial import SpatialSlide
from stampkit.synthetic import reference_patch


@pytest.fixture(scope="module")
def corpus(tiny_dataset):
    cfg = load_config(tiny_dataset)
    return cfg, P.load_corpus(cfg)


@pytest.fixture
def cfg_copy(corpus):
    return copy.deepcopy(corpus[0])


def small_models(vocab_size, seq_len=32):
    gene = GeneEncoder(GeneEncoderConfig(vocab_size=vocab_size, dim=16, n_layers=1, n_heads=2,
                                         ffn_dim=32, max_len=seq_len), seed=0)
    vision = VisionEncoder(VisionEncoderConfig(image_side=48, mini_patch_side=8, dim=16, n_layers=1,
                                               n_heads=2, ffn_dim=32), seed=1)
    return P.AlignModels(gene, vision, Heads(16, 16, 8, seed=2))


def test_corpus_alignment(corpus):
    cfg, c = corpus
    assert c.tokens.shape == (c.n_spots, 32)
    assert c.images.shape[0] == c.n_spots and c.pos.shape == (c.n_spots,)
    assert sum(len(s) for s in c.slides) == c.n_spots


def test_stage_rng_distinct_and_stable():
    a = P.stage_rng(0, "stage1").random(3)
    assert a.tobytes() == P.stage_rng(0, "stage1").random(3).tobytes()
    assert a.tobytes() != P.stage_rng(0, "stage2").random(3).tobytes()
    assert a.tobytes() != P.stage_rng(1, "stage1").random(3).tobytes()


def test_nan_raises_numeric_error(corpus):
    cfg, c = corpus
    enc = GeneEncoder(P.gene_config(cfg, c.vocab.n_tokens), seed=0)
    enc.params["tok_emb"].data[:] = np.nan
    with pytest.raises(P.NumericError, match="step 0"):
        P.train_stage1(enc, c.tokens, Stage1Config(epochs=1, batch_size=16), 0.15,
                       np.random.default_rng(0))


def test_stage2_without_batches_is_rejected(corpus):
    cfg, c = corpus
    enc = GeneEncoder(P.gene_config(cfg, c.vocab.n_tokens), seed=0)
    tiny = [SpatialSlide("s", np.arange(3), np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))]
    with pytest.raises(DataError, match="no slide"):
        P.train_stage2(enc, c.tokens, tiny, Stage2Config(k=9), 0.15, np.random.default_rng(0))


def test_stage1_lowers_loss(corpus):
    cfg, c = corpus
    enc = GeneEncoder(P.gene_config(cfg, c.vocab.n_tokens), seed=0)
    recs = P.train_stage1(enc, c.tokens, Stage1Config(epochs=6, batch_size=30, lr=3e-3), 0.15,
                          np.random.default_rng(0))
    first = np.mean([r["igr"] for r in recs[:4]])
    last = np.mean([r["igr"] for r in recs[-4:]])
    assert last < first
    assert all(r["csp"] is None and r["tau"] is None for r in recs)


def _grads(models, toggles, batch):
    for group in models.groups().values():
        for t in group.values():
            t.grad = None
    bundle = P.alignment_loss(models, *batch, toggles)
    bundle.total.backward()
    out = {}
    for gname, group in models.groups().items():
        for k, t in group.items():
            out[f"{gname}/{k}"] = None if t.grad is None else t.grad.copy()
    return bundle, out


@pytest.fixture(scope="module")
def align_batch(corpus):
    cfg, c = corpus
    idx = np.arange(6)
    refs = reference_patch(c.images[idx], 8)
    return (c.tokens[idx], c.images[idx], c.regions[idx], refs, c.pos[idx])


def _nonzero(g):
    return g is not None and np.any(g != 0)


def test_disabled_terms_contribute_no_gradient(corpus, align_batch):
    _, c = corpus
    models = small_models(c.vocab.n_tokens)
    terms = ["csp", "p_s", "r_s", "p_r"]
    _, g_all = _grads(models, terms, align_batch)
    singles = {t: _grads(models, [t], align_batch)[1] for t in terms}
    for key, g in g_all.items():
        parts = [singles[t][key] for t in terms if singles[t][key] is not None]
        total = sum(parts) if parts else None
        if total is None:
            assert not _nonzero(g), key
        else:
            np.testing.assert_allclose(g, total, rtol=1e-9, atol=1e-12, err_msg=key)
    # parameters a term never touches get nothing from it
    assert not any(_nonzero(v) for k, v in singles["csp"].items() if k.startswith("gene/"))
    assert not _nonzero(singles["csp"]["heads/tau"])
    assert not any(_nonzero(v) for k, v in singles["p_r"].items() if k.startswith("gene/"))
    assert not _nonzero(singles["p_s"]["heads/csp_w1"])
    assert _nonzero(singles["r_s"]["gene/tok_emb"])


def test_alignment_with_only_csp_leaves_gene_untouched(corpus):
    cfg, c = corpus
    models = small_models(c.vocab.n_tokens)
    before = {k: t.data.copy() for k, t in models.gene.params.items()}
    proj = models.heads.params["gene_proj_w"].data.copy()
    ac = AlignConfig(steps=2, batch_size=8, warmup=0, losses=LossToggles(csp=True, p_s=False, r_s=False, p_r=False))
    recs = P.train_alignment(models, c.tokens, c.images, c.regions, c.pos, ac,
                             np.random.default_rng(0), 8)
    assert all(k in ("csp",) or recs[0][k] is None for k in ("p_s", "r_s", "p_r"))
    assert recs[0]["csp"] is not None
    for k, t in models.gene.params.items():
        assert t.data.tobytes() == before[k].tobytes(), k
    assert models.heads.params["gene_proj_w"].data.tobytes() == proj.tobytes()


def test_freeze_gene(corpus):
    cfg, c = corpus
    models = small_models(c.vocab.n_tokens)
    before = models.gene.params["tok_emb"].data.copy()
    ac = AlignConfig(steps=2, batch_size=8, warmup=0, freeze_gene=True)
    P.train_alignment(models, c.tokens, c.images, c.regions, c.pos, ac, np.random.default_rng(0), 8)
    assert models.gene.params["tok_emb"].data.tobytes() == before.tobytes()


def test_tau_stays_clamped(corpus):
    cfg, c = corpus
    models = small_models(c.vocab.n_tokens)
    ac = AlignConfig(steps=3, batch_size=8, warmup=0, lr=50.0)
    recs = P.train_alignment(models, c.tokens, c.images, c.regions, c.pos, ac, np.random.default_rng(0), 8)
    assert all(1.0 <= r["tau"] <= 100.0 for r in recs)


def test_stage_manifests_echo_config(tmp_path, corpus, cfg_copy):
    cfg, c = cfg_copy, corpus[1]
    cfg.paths.out = str(tmp_path)
    out = P.run_stage1_gene(cfg, c)
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["pipeline"] == cfg.to_dict()
    assert m["config"]["stage"] == "stage1"
    lines = (out / "log.jsonl").read_text().splitlines()
    assert lines and json.loads(lines[0])["step"] == 0
    enc, _ = P.load_gene_encoder(out)
    assert enc.params["tok_emb"].shape == (c.vocab.n_tokens, 16)


def test_stage1_deterministic(tmp_path, corpus, cfg_copy):
    cfg, c = cfg_copy, corpus[1]
    outs = []
    for d in ("a", "b"):
        cfg.paths.out = str(tmp_path / d)
        outs.append(P.run_stage1_gene(cfg, c))
    for f in sorted(outs[0].iterdir()):
        if f.name != "manifest.json":  # echoes the differing output path
            assert f.read_bytes() == (outs[1] / f.name).read_bytes(), f.name
    ma, mb = (json.loads((o / "manifest.json").read_text()) for o in outs)
    assert ma["params"] == mb["params"]


def test_evaluate_cgr_is_repeatable(corpus):
    cfg, c = corpus
    enc = GeneEncoder(P.gene_config(cfg, c.vocab.n_tokens), seed=0)
    groups = P.spatial_minibatches(c.slides, 9, 0.0, np.random.default_rng(0))
    assert groups
    a = P.evaluate_cgr(enc, c.tokens, groups, 0.15, 5)
    assert a == P.evaluate_cgr(enc, c.tokens, groups, 0.15, 5)
    assert np.isfinite(a) and a > 0


def test_finetune_adapter_lowers_loss():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(64, 4))
    vis = z @ rng.normal(size=(4, 16)) + 0.1 * rng.normal(size=(64, 16))
    gen = z @ rng.normal(size=(4, 12)) + 0.1 * rng.normal(size=(64, 12))
    heads = Heads(16, 12, 8, seed=0)
    csp_before = heads.params["csp_w1"].data.copy()
    va, ga, hist = P.finetune_adapter(vis, gen, heads, epochs=30, lr=5e-3, batch_size=16)
    assert hist[-1] < hist[0]
    assert isinstance(va, Adapter) and isinstance(ga, Adapter)
    assert heads.params["csp_w1"].data.tobytes() == csp_before.tobytes()


def test_fold_assignment_balanced():
    f = P.fold_assignment(103, 5, 0)
    counts = np.bincount(f)
    assert counts.max() - counts.min() <= 1
    assert np.array_equal(f, P.fold_assignment(103, 5, 0))


def test_embeddings_drift_detected(tmp_path, corpus):
    from stampkit.tensor import save_dtn
    cfg, c = corpus
    models = small_models(c.vocab.n_tokens)
    emb = P.compute_embeddings(models, c.tokens[:10], c.images[:10])
    assert emb["fused"].shape == (10, 32)
    np.testing.assert_allclose(np.linalg.norm(emb["gene_proj"], axis=1), 1.0, atol=1e-12)
    for k, v in emb.items():
        save_dtn(tmp_path / f"{k}.dtn", v)
    manifest = {"spot_ids": c.spot_ids[:10], "shapes": {k: list(v.shape) for k, v in emb.items()}}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    back, _ = P.load_embeddings(tmp_path)
    assert back["gene"].tobytes() == emb["gene"].tobytes()
    save_dtn(tmp_path / "gene.dtn", emb["gene"][:5])
    with pytest.raises(DataError, match="drifts"):
        P.load_embeddings(tmp_path)
