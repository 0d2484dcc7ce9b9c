"""Training and evaluation stages wired to on-disk artifacts.

Each ``run_*`` function reads what the previous stage wrote and writes a
checkpoint directory (DTN1 tensors + JSON manifest) and a JSON-lines log.
The ``train_*`` functions are the in-memory loops they wrap.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import genedata as gd
from .config import AlignConfig, PipelineConfig, Stage1Config, Stage2Config
from .encoders import (GeneEncoder, GeneEncoderConfig, Heads, VisionEncoder, VisionEncoderConfig,
                       grid_pool, load_params, save_params)
from .evaluation import (adjusted_rand_index, aggregate_folds, calinski_harabasz,
                         expression_metrics, kmeans_cluster, linear_probe, log1p_normalize,
                         normalized_mutual_information, silhouette_score)
from .losses import (LOSS_TERMS, LossBundle, cgr_loss_from_context, clamp_temperature, csp_logits,
                     csp_loss, igr_loss, infonce_symmetric, intra_modal_loss)
from .optim import AdamW, warmup_cosine
from .retrieval import Adapter, build_reference_index, predict_many
from .spatial import SpatialSlide, build_neighbor_index, default_d_max, read_coordinates, \
    sample_spatial_batches
from .synthetic import read_images, read_labels, reference_patch
from .tensor import Tensor, l2_normalize, load_dtn, save_dtn

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A loss became NaN or infinite."""


# -- corpus ------------------------------------------------------------------
@dataclass
class Corpus:
    vocab: gd.GeneVocabulary
    matrix: gd.ExpressionMatrix  # filtered spots
    means: np.ndarray
    tokens: np.ndarray  # [n, N]
    spot_ids: list[str]
    slides: list[SpatialSlide] = field(default_factory=list)
    images: np.ndarray | None = None
    regions: np.ndarray | None = None
    pos: np.ndarray | None = None

    @property
    def n_spots(self) -> int:
        return len(self.spot_ids)


def load_corpus(cfg: PipelineConfig, with_images: bool = True) -> Corpus:
    vocab = gd.load_vocabulary(cfg.paths.vocab)
    raw = gd.read_expression(cfg.paths.expression, vocab)
    mat, _ = gd.filter_spots(raw, cfg.data.min_genes)
    if mat.n_spots == 0:
        raise gd.DataError(f"no spot has >= {cfg.data.min_genes} detected genes")
    if cfg.data.means:
        means = load_dtn(cfg.data.means)
        if means.shape != (vocab.size,):
            raise gd.DataError(f"external means have shape {means.shape}, expected ({vocab.size},)")
    else:
        means = gd.compute_nonzero_means(mat)
    tokens = gd.tokenize_matrix(mat, means, cfg.data.seq_len)
    corpus = Corpus(vocab, mat, means, tokens, list(mat.spot_ids))
    if cfg.paths.coords:
        corpus.slides = read_coordinates(cfg.paths.coords, corpus.spot_ids)
    if with_images and cfg.paths.images:
        ids, images, regions, pos = read_images(cfg.paths.images)
        where = {s: i for i, s in enumerate(ids)}
        missing = [s for s in corpus.spot_ids if s not in where]
        if missing:
            raise gd.DataError(f"{len(missing)} spots have no image, e.g. {missing[0]}")
        order = np.array([where[s] for s in corpus.spot_ids])
        corpus.images, corpus.regions, corpus.pos = images[order], regions[order], pos[order]
    return corpus


def gene_config(cfg: PipelineConfig, vocab_size: int) -> GeneEncoderConfig:
    g = cfg.gene_encoder
    return GeneEncoderConfig(vocab_size=vocab_size, dim=g.dim, n_layers=g.n_layers,
                             n_heads=g.n_heads, ffn_dim=g.ffn_dim, max_len=cfg.data.seq_len,
                             dropout=g.dropout, ln_eps=g.ln_eps)


def vision_config(cfg: PipelineConfig) -> VisionEncoderConfig:
    v = cfg.vision_encoder
    return VisionEncoderConfig(image_side=v.image_side, mini_patch_side=v.mini_patch_side,
                               channels=v.channels, dim=v.dim, n_layers=v.n_layers,
                               n_heads=v.n_heads, ffn_dim=v.ffn_dim)


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([seed, sum(ord(ch) * 131 ** i for i, ch in enumerate(stage)) % 2**32])


# -- logging -------------------------------------------------------------------
class JsonlLog:
    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, step: int, bundle: LossBundle, tau=None, **extra) -> dict:
        vals = bundle.values()
        rec = {"step": step}
        for k in LOSS_TERMS:
            rec[k] = vals.get(k)
        rec["total"] = vals["total"]
        rec["tau"] = None if tau is None else float(tau)
        rec.update(extra)
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _check_finite(value: Tensor, step: int) -> None:
    if not np.isfinite(value.data).all():
        raise NumericError(f"non-finite loss at step {step}")


# -- stage 1: IGR only -----------------------------------------------------------
def mask_batch(tokens: np.ndarray, mask_id: int, rate: float, rng) -> list[gd.MaskedSequence]:
    return [gd.mask_sequence(t, mask_id, rate, rng) for t in tokens]


def train_stage1(encoder: GeneEncoder, tokens: np.ndarray, sc: Stage1Config, rate: float,
                 rng, log_: JsonlLog | None = None) -> list[dict]:
    tokens = tokens[(tokens != gd.PAD_ID).any(axis=1)]
    n = len(tokens)
    bs = min(sc.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    total = sc.epochs * steps_per_epoch
    params = list(encoder.params.values())
    opt = AdamW(params, lr=sc.lr, weight_decay=sc.weight_decay)
    log_ = log_ or JsonlLog()
    step = 0
    for _ in range(sc.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            batch = tokens[order[b * bs:(b + 1) * bs]]
            masked = mask_batch(batch, encoder.mask_id, rate, rng)
            hidden, _ = encoder.forward(np.stack([m.ids for m in masked]), rng)
            bundle = LossBundle()
            bundle.add("igr", igr_loss(hidden, masked, encoder.decode))
            loss = bundle.total
            _check_finite(loss, step)
            opt.zero_grad()
            loss.backward()
            lr = warmup_cosine(step, total, sc.lr, sc.min_lr, sc.warmup)
            opt.step(lr)
            log_.write(step, bundle, lr=lr)
            step += 1
    return log_.records


# -- stage 2: IGR + CGR on spatial mini-batches -------------------------------------
def spatial_minibatches(slides: list[SpatialSlide], k: int, d_max: float, rng,
                        random_neighbors: bool = False):
    out = []
    for slide in slides:
        index = build_neighbor_index(slide)
        dm = d_max if d_max > 0 else default_d_max(index)
        batches = sample_spatial_batches(slide, k, dm, rng, index=index)
        if random_neighbors:
            pool = slide.spot_indices
            shuffled = []
            for b in batches:
                others = pool[pool != b.seed]
                pick = rng.choice(others, size=k - 1, replace=False)
                shuffled.append((b.seed, *[int(x) for x in pick]))
            out.extend(shuffled)
        else:
            out.extend(b.members for b in batches)
    return out


def stage2_step_loss(encoder: GeneEncoder, tokens: np.ndarray, groups, rate: float, rng,
                     use_igr: bool = True) -> LossBundle:
    """IGR on every member and CGR on each group's seed from its neighbours."""
    members = np.array([m for g in groups for m in g])
    k = len(groups[0])
    masked = mask_batch(tokens[members], encoder.mask_id, rate, rng)
    hidden, pooled = encoder.forward(np.stack([m.ids for m in masked]), rng)
    g = len(groups)
    d = pooled.shape[1]
    nbr = pooled.reshape(g, k, d)[:, 1:, :]
    context = nbr.mean(axis=1)
    seeds = [masked[i * k] for i in range(g)]
    bundle = LossBundle()
    if use_igr:
        bundle.add("igr", igr_loss(hidden, masked, encoder.decode))
    bundle.add("cgr", cgr_loss_from_context(context, seeds, encoder.decode))
    return bundle


def train_stage2(encoder: GeneEncoder, tokens: np.ndarray, slides: list[SpatialSlide],
                 sc: Stage2Config, rate: float, rng, log_: JsonlLog | None = None) -> list[dict]:
    opt = AdamW(list(encoder.params.values()), lr=sc.lr, weight_decay=sc.weight_decay)
    log_ = log_ or JsonlLog()
    per_epoch = [spatial_minibatches(slides, sc.k, sc.d_max, rng, sc.random_neighbors)
                 for _ in range(sc.epochs)]
    if not any(per_epoch):
        raise gd.DataError("no slide yields a spatial mini-batch "
                           f"(k={sc.k}, slides={[len(s) for s in slides]})")
    mb = sc.minibatches_per_step
    total = sum(max(1, -(-len(e) // mb)) for e in per_epoch)
    step = 0
    for groups in per_epoch:
        order = rng.permutation(len(groups))
        for start in range(0, len(groups), mb):
            chunk = [groups[i] for i in order[start:start + mb]]
            bundle = stage2_step_loss(encoder, tokens, chunk, rate, rng)
            loss = bundle.total
            _check_finite(loss, step)
            opt.zero_grad()
            loss.backward()
            lr = warmup_cosine(step, total, sc.lr, sc.min_lr, sc.warmup)
            opt.step(lr)
            log_.write(step, bundle, lr=lr)
            step += 1
    return log_.records


def evaluate_cgr(encoder: GeneEncoder, tokens: np.ndarray, groups, rate: float, seed: int) -> float:
    """Held-fixed CGR value over ``groups`` with a fixed masking seed."""
    rng = np.random.default_rng(seed)
    vals = []
    for start in range(0, len(groups), 32):
        chunk = groups[start:start + 32]
        bundle = stage2_step_loss(encoder, tokens, chunk, rate, rng, use_igr=False)
        vals.append(float(bundle.terms["cgr"].data) * len(chunk))
    return sum(vals) / len(groups)


# -- alignment -----------------------------------------------------------------
@dataclass
class AlignModels:
    gene: GeneEncoder
    vision: VisionEncoder
    heads: Heads

    def groups(self) -> dict:
        return {"gene": self.gene.params, "vision": self.vision.params, "heads": self.heads.params}


def alignment_loss(models: AlignModels, tokens, images, regions, refs, pos, toggles) -> LossBundle:
    """All enabled terms of the alignment objective for one batch."""
    enabled = set(toggles)
    bundle = LossBundle()
    need_gene = bool(enabled & {"p_s", "r_s"})
    need_patch = bool(enabled & {"p_s", "p_r"})
    need_region = bool(enabled & {"csp", "r_s", "p_r"})
    h = models.heads
    g = p = r = None
    if need_gene:
        _, pooled = models.gene.forward(tokens)
        g = l2_normalize(h.gene(pooled), "gene embedding")
    if need_patch:
        cls, _, _ = models.vision.forward(images)
        p = l2_normalize(h.image(cls), "patch embedding")
    if need_region:
        cls_r, tok_r, pre_r = models.vision.forward(regions, refs)
        if "csp" in enabled:
            tps = models.vision.config.tokens_per_side
            z_pool = h.csp(grid_pool(tok_r, tps))
            z_ref = h.csp(pre_r)
            bundle.add("csp", csp_loss(z_pool, z_ref, pos))
        r = l2_normalize(h.image(cls_r), "region embedding")
    if "p_s" in enabled:
        bundle.add("p_s", infonce_symmetric(p, g, h.tau))
    if "r_s" in enabled:
        bundle.add("r_s", infonce_symmetric(r, g, h.tau))
    if "p_r" in enabled:
        bundle.add("p_r", intra_modal_loss(p, r, h.tau))
    return bundle


def train_alignment(models: AlignModels, tokens, images, regions, pos, ac: AlignConfig, rng,
                    mini_patch_side: int, log_: JsonlLog | None = None) -> list[dict]:
    toggles = ac.losses.enabled()
    params = list(models.vision.params.values()) + list(models.heads.params.values())
    if not ac.freeze_gene:
        params += list(models.gene.params.values())
    opt = AdamW(params, lr=ac.lr, weight_decay=ac.weight_decay, no_decay=[models.heads.tau])
    log_ = log_ or JsonlLog()
    refs_all = reference_patch(images, mini_patch_side)
    n = len(tokens)
    bs = min(ac.batch_size, n)
    order, cursor = rng.permutation(n), 0
    for step in range(ac.steps):
        opt.zero_grad()
        agg: dict[str, float] = {}
        for _ in range(ac.grad_accum):
            if cursor + bs > n:
                order, cursor = rng.permutation(n), 0
            idx = order[cursor:cursor + bs]
            cursor += bs
            bundle = alignment_loss(models, tokens[idx], images[idx], regions[idx], refs_all[idx],
                                    pos[idx], toggles)
            loss = bundle.total * (1.0 / ac.grad_accum)
            _check_finite(loss, step)
            loss.backward()
            for k, v in bundle.values().items():
                agg[k] = agg.get(k, 0.0) + v / ac.grad_accum
        lr = warmup_cosine(step, ac.steps, ac.lr, ac.min_lr, ac.warmup)
        opt.step(lr)
        clamp_temperature(models.heads.tau)
        summary = LossBundle({k: Tensor(v) for k, v in agg.items() if k != "total"})
        log_.write(step, summary, tau=models.heads.tau.data, lr=lr)
    return log_.records


def csp_accuracy(models: AlignModels, regions, refs, pos, batch: int = 64) -> float:
    hits = 0
    for s in range(0, len(pos), batch):
        _, tok, pre = models.vision.forward(regions[s:s + batch], refs[s:s + batch])
        tps = models.vision.config.tokens_per_side
        logits = csp_logits(models.heads.csp(grid_pool(tok, tps)), models.heads.csp(pre))
        hits += int((logits.data.argmax(axis=1) == pos[s:s + batch]).sum())
    return hits / len(pos)


# -- checkpoints -----------------------------------------------------------------
def save_checkpoint(directory, groups: dict, cfg: PipelineConfig, stage: str, extra=None) -> None:
    conf = {"stage": stage, "pipeline": cfg.to_dict()}
    conf.update(extra or {})
    save_params(directory, groups, conf)


def load_gene_encoder(directory) -> tuple[GeneEncoder, dict]:
    groups, conf = load_params(directory)
    gcfg = GeneEncoderConfig(**conf["gene_encoder"])
    return GeneEncoder(gcfg, params=groups["gene"]), conf


def load_align_models(directory) -> tuple[AlignModels, dict]:
    groups, conf = load_params(directory)
    gene = GeneEncoder(GeneEncoderConfig(**conf["gene_encoder"]), params=groups["gene"])
    vision = VisionEncoder(VisionEncoderConfig(**conf["vision_encoder"]), params=groups["vision"])
    heads = Heads(vision.config.dim, gene.config.dim, conf["shared_dim"], params=groups["heads"])
    return AlignModels(gene, vision, heads), conf


def _out(cfg: PipelineConfig, name: str) -> Path:
    p = Path(cfg.paths.out) / name
    p.mkdir(parents=True, exist_ok=True)
    return p


def run_stage1_gene(cfg: PipelineConfig, corpus: Corpus | None = None) -> Path:
    corpus = corpus or load_corpus(cfg, with_images=False)
    out = _out(cfg, "stage1")
    gcfg = gene_config(cfg, corpus.vocab.n_tokens)
    encoder = GeneEncoder(gcfg, seed=cfg.seed)
    rng = stage_rng(cfg.seed, "stage1")
    log_ = JsonlLog(out / "log.jsonl")
    try:
        train_stage1(encoder, corpus.tokens, cfg.stage1, cfg.data.mask_rate, rng, log_)
    finally:
        log_.close()
    save_checkpoint(out, {"gene": encoder.params}, cfg, "stage1",
                    {"gene_encoder": asdict(gcfg)})
    save_dtn(out / "means.dtn", corpus.means)
    return out


def run_stage2_gene(cfg: PipelineConfig, checkpoint, corpus: Corpus | None = None) -> Path:
    corpus = corpus or load_corpus(cfg, with_images=False)
    if not corpus.slides:
        raise gd.DataError("stage 2 needs spot coordinates")
    encoder, conf = load_gene_encoder(checkpoint)
    out = _out(cfg, "stage2")
    rng = stage_rng(cfg.seed, "stage2")
    log_ = JsonlLog(out / "log.jsonl")
    try:
        train_stage2(encoder, corpus.tokens, corpus.slides, cfg.stage2, cfg.data.mask_rate, rng, log_)
    finally:
        log_.close()
    save_checkpoint(out, {"gene": encoder.params}, cfg, "stage2",
                    {"gene_encoder": conf["gene_encoder"]})
    return out


def run_alignment(cfg: PipelineConfig, gene_checkpoint, corpus: Corpus | None = None) -> Path:
    corpus = corpus or load_corpus(cfg)
    if corpus.images is None:
        raise gd.DataError("alignment needs paired images")
    gene, conf = load_gene_encoder(gene_checkpoint)
    vcfg = vision_config(cfg)
    vision = VisionEncoder(vcfg, seed=cfg.seed + 1)
    heads = Heads(vcfg.dim, gene.config.dim, cfg.align.shared_dim, tau=cfg.align.tau_init,
                  seed=cfg.seed + 2)
    models = AlignModels(gene, vision, heads)
    out = _out(cfg, "align")
    rng = stage_rng(cfg.seed, "align")
    log_ = JsonlLog(out / "log.jsonl")
    try:
        train_alignment(models, corpus.tokens, corpus.images, corpus.regions, corpus.pos,
                        cfg.align, rng, vcfg.mini_patch_side, log_)
    finally:
        log_.close()
    save_checkpoint(out, models.groups(), cfg, "align",
                    {"gene_encoder": conf["gene_encoder"], "vision_encoder": asdict(vcfg),
                     "shared_dim": cfg.align.shared_dim})
    return out


# -- embeddings ------------------------------------------------------------------
EMBEDDING_FILES = ("gene", "vision", "fused", "gene_proj", "vision_proj")


def compute_embeddings(models: AlignModels, tokens, images, batch: int = 64) -> dict[str, np.ndarray]:
    gene, vision, gp, vp = [], [], [], []
    for s in range(0, len(tokens), batch):
        _, pooled = models.gene.forward(tokens[s:s + batch])
        cls, _, _ = models.vision.forward(images[s:s + batch])
        gene.append(pooled.data)
        vision.append(cls.data)
        gp.append(l2_normalize(models.heads.gene(pooled)).data)
        vp.append(l2_normalize(models.heads.image(cls)).data)
    out = {"gene": np.concatenate(gene), "vision": np.concatenate(vision),
           "gene_proj": np.concatenate(gp), "vision_proj": np.concatenate(vp)}
    out["fused"] = np.concatenate([out["gene"], out["vision"]], axis=1)
    return out


def export_embeddings(cfg: PipelineConfig, checkpoint, corpus: Corpus | None = None) -> Path:
    corpus = corpus or load_corpus(cfg)
    models, _ = load_align_models(checkpoint)
    emb = compute_embeddings(models, corpus.tokens, corpus.images)
    out = _out(cfg, "embeddings")
    for name in EMBEDDING_FILES:
        save_dtn(out / f"{name}.dtn", emb[name])
    manifest = {"spot_ids": corpus.spot_ids, "checkpoint": str(checkpoint),
                "shapes": {k: list(emb[k].shape) for k in EMBEDDING_FILES},
                "config": cfg.to_dict()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return out


def load_embeddings(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    out = {}
    for name in EMBEDDING_FILES:
        arr = load_dtn(directory / f"{name}.dtn")
        if list(arr.shape) != manifest["shapes"][name]:
            raise gd.DataError(f"{directory}/{name}.dtn: shape {arr.shape} drifts from manifest "
                               f"{manifest['shapes'][name]}")
        out[name] = arr
    if len(out["gene"]) != len(manifest["spot_ids"]):
        raise gd.DataError(f"{directory}: embedding rows do not match spot ids")
    return out, manifest


# -- prediction and evaluation --------------------------------------------------------
def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    rng = stage_rng(seed, "folds")
    return rng.permutation(n) % folds


def predict_fold(emb: dict, expr: np.ndarray, fold_of: np.ndarray, fold: int, k: int):
    ref = fold_of != fold
    qry = fold_of == fold
    index = build_reference_index(emb["gene_proj"][ref], expr[ref])
    pred = predict_many(emb["vision_proj"][qry], index, min(k, index.size))
    return pred, expr[qry], index


def cross_modal_hit_rate(emb: dict, labels: np.ndarray) -> float:
    """Fraction of image queries whose most similar gene embedding shares
    the query's planted cluster."""
    sims = emb["vision_proj"] @ emb["gene_proj"].T
    nearest = sims.argmax(axis=1)
    return float(np.mean(labels[nearest] == labels))


def clustering_metrics(x: np.ndarray, labels: np.ndarray, seed: int, restarts: int) -> dict:
    k = len(np.unique(labels))
    pred, _ = kmeans_cluster(x, k, rng_seed=seed, n_init=restarts)
    out = {"ari": adjusted_rand_index(labels, pred), "nmi": normalized_mutual_information(labels, pred)}
    if len(np.unique(pred)) >= 2:
        out["silhouette"] = silhouette_score(x, pred)
        out["calinski_harabasz"] = calinski_harabasz(x, pred)
    return out


def evaluate_embeddings(emb: dict, labels: np.ndarray, expr_counts: np.ndarray,
                        cfg: PipelineConfig, dataset: str) -> dict:
    ec = cfg.eval
    report: dict = {"dataset": dataset, "clustering": {}, "records": [], "config": cfg.to_dict()}
    for name in ("gene", "vision", "fused"):
        report["clustering"][name] = clustering_metrics(emb[name], labels, cfg.seed, ec.kmeans_restarts)
    report["cross_modal_hit_rate"] = cross_modal_hit_rate(emb, labels)
    expr = log1p_normalize(expr_counts)
    fold_of = fold_assignment(len(labels), ec.folds, cfg.seed)
    for f in range(ec.folds):
        tr, te = fold_of != f, fold_of == f
        rec: dict = {}
        for name, lr in (("gene", ec.probe_lr_gene), ("vision", ec.probe_lr_vision),
                         ("fused", ec.probe_lr_gene)):
            res = linear_probe(emb[name][tr], labels[tr], emb[name][te], labels[te],
                               ec.probe_epochs, lr, cfg.seed + f)
            rec[f"probe_{name}_bal_acc"] = res["balanced_accuracy"]
            rec[f"probe_{name}_wf1"] = res["weighted_f1"]
        pred, actual, _ = predict_fold(emb, expr, fold_of, f, ec.top_k)
        for k, v in expression_metrics(pred, actual, ec.top_genes).items():
            rec[k] = v
        report["records"].append({"fold": f, "metrics": rec})
    report["aggregate"] = aggregate_folds([r["metrics"] for r in report["records"]])
    return report


def run_evaluate(cfg: PipelineConfig, embeddings_dir, corpus: Corpus | None = None) -> Path:
    emb, manifest = load_embeddings(embeddings_dir)
    corpus = corpus or load_corpus(cfg, with_images=False)
    if manifest["spot_ids"] != corpus.spot_ids:
        raise gd.DataError("embedding spot order differs from the corpus")
    if not cfg.paths.labels:
        raise gd.DataError("evaluation needs a labels file")
    lab = read_labels(cfg.paths.labels)
    labels = np.array([lab[s] for s in corpus.spot_ids])
    report = evaluate_embeddings(emb, labels, corpus.matrix.to_dense(), cfg, cfg.dataset)
    out = _out(cfg, "eval") / "metrics.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def run_predict(cfg: PipelineConfig, embeddings_dir, fold: int, corpus: Corpus | None = None) -> Path:
    emb, manifest = load_embeddings(embeddings_dir)
    corpus = corpus or load_corpus(cfg, with_images=False)
    expr = log1p_normalize(corpus.matrix.to_dense())
    fold_of = fold_assignment(len(expr), cfg.eval.folds, cfg.seed)
    pred, actual, index = predict_fold(emb, expr, fold_of, fold, cfg.eval.top_k)
    out = _out(cfg, f"predict_fold{fold}")
    index.save(out / "reference")
    save_dtn(out / "predicted.dtn", pred)
    save_dtn(out / "actual.dtn", actual)
    ids = [s for s, f in zip(manifest["spot_ids"], fold_of) if f == fold]
    (out / "queries.txt").write_text("".join(s + "\n" for s in ids), encoding="utf-8")
    manifest = {"fold": fold, "n_queries": len(ids), "embeddings": str(embeddings_dir),
                "config": cfg.to_dict()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return out


# -- adapter fine-tuning ---------------------------------------------------------------
def finetune_adapter(vision_feats, gene_feats, heads: Heads, epochs: int = 20, lr: float = 1e-3,
                     batch_size: int = 32, rng_seed: int = 0, alpha: float = 0.2):
    """Train residual adapters on frozen features with the patch-gene
    contrastive loss; only adapters and projection heads update.

    Returns (vision adapter, gene adapter, per-epoch mean loss)."""
    vision_feats = np.asarray(vision_feats)
    gene_feats = np.asarray(gene_feats)
    va = Adapter(vision_feats.shape[1], alpha, seed=rng_seed)
    ga = Adapter(gene_feats.shape[1], alpha, seed=rng_seed + 1)
    hp = heads.params
    trainable = (list(va.params.values()) + list(ga.params.values())
                 + [hp["img_proj_w"], hp["img_proj_b"], hp["gene_proj_w"], hp["gene_proj_b"]])
    opt = AdamW(trainable, lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(rng_seed)
    n = len(vision_feats)
    bs = min(batch_size, n)
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n - bs + 1, bs):
            idx = order[s:s + bs]
            p = l2_normalize(heads.image(va(Tensor(vision_feats[idx]))))
            g = l2_normalize(heads.gene(ga(Tensor(gene_feats[idx]))))
            loss = infonce_symmetric(p, g, Tensor(float(heads.tau.data)))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return va, ga, history
