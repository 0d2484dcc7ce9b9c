"""Command-line entry point: ``stampkit <subcommand> [--config C] [--seed S] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import genedata as gd
from . import pipeline as pl
from .config import ConfigError, PipelineConfig, desk_config, load_config
from .gradcheck import GRADCHECK_TOLERANCE, run_gradchecks
from .spatial import build_neighbor_index, default_d_max, read_coordinates, sample_spatial_batches, \
    write_batches
from .synthetic import SyntheticSpec, generate_synthetic, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("stampkit")


def _config(args) -> PipelineConfig:
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.paths.out = str(Path(args.out).resolve())
    return cfg


def _require_seed(args) -> int:
    if args.seed is None:
        raise ConfigError(f"{args.command} needs --seed (no clock-derived default)")
    return args.seed


def _out_dir(args, cfg: PipelineConfig | None = None) -> Path:
    out = Path(args.out) if args.out else Path(cfg.paths.out if cfg else "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stage_dir(cfg: PipelineConfig, given, name: str) -> Path:
    path = Path(given) if given else Path(cfg.paths.out) / name
    if not (path / "manifest.json").exists():
        raise gd.DataError(f"{path}: no manifest.json (run the earlier stage first or pass a path)")
    return path


# -- subcommands ---------------------------------------------------------------
def cmd_synth(args) -> dict:
    seed = _require_seed(args)
    spec = SyntheticSpec(n_spots=args.n_spots, n_clusters=args.n_clusters, n_genes=args.n_genes,
                         noise=args.noise)
    try:
        ds = generate_synthetic(spec, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args)
    write_dataset(ds, out, seed)
    # a ready-to-use pipeline config with paths relative to the dataset
    cfg = desk_config(seed, ".", "run")
    cfg.dataset = out.name or "synthetic"
    raw = cfg.to_dict()
    raw["paths"] = {"vocab": "vocab.txt", "expression": "expression.tsv", "coords": "coords.tsv",
                    "images": ".", "labels": "labels.tsv", "out": "run"}
    (out / "config.json").write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"dataset": str(out), "n_spots": len(ds.spot_ids), "config": str(out / "config.json")}


def cmd_build_vocab(args) -> dict:
    names: set[str] = set()
    for path in args.expression:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            if not header.startswith("#spots"):
                raise gd.DataError(f"{path}: bad header")
            for lineno, line in enumerate(fh, 2):
                if line.strip():
                    parts = line.rstrip("\n").split("\t")
                    if len(parts) != 3:
                        raise gd.DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
                    names.add(parts[1])
    if not names:
        raise gd.DataError("no gene identifiers found")
    vocab = gd.GeneVocabulary(tuple(sorted(names)))
    out = _out_dir(args) / "vocab.txt"
    vocab.save(out)
    return {"vocab": str(out), "size": vocab.size}


def cmd_tokenize(args) -> dict:
    cfg = _config(args)
    corpus = pl.load_corpus(cfg, with_images=False)
    out = _out_dir(args, cfg)
    gd.save_tokens(out / "tokens.stk", corpus.tokens)
    pl.save_dtn(out / "means.dtn", corpus.means)
    (out / "spot_ids.txt").write_text("".join(s + "\n" for s in corpus.spot_ids), encoding="utf-8")
    return {"tokens": str(out / "tokens.stk"), "n_spots": corpus.n_spots,
            "seq_len": int(corpus.tokens.shape[1])}


def cmd_sample_batches(args) -> dict:
    cfg = _config(args)
    slides = read_coordinates(cfg.paths.coords)
    spot_ids = []
    for line in Path(cfg.paths.coords).read_text(encoding="utf-8").splitlines()[1:]:
        if line.strip():
            spot_ids.append(line.split("\t")[0])
    rng = pl.stage_rng(cfg.seed, "sample-batches")
    batches = []
    for slide in slides:
        index = build_neighbor_index(slide)
        d_max = cfg.stage2.d_max if cfg.stage2.d_max > 0 else default_d_max(index)
        batches += sample_spatial_batches(slide, cfg.stage2.k, d_max, rng, index=index)
    out = _out_dir(args, cfg) / "batches.tsv"
    write_batches(out, batches, spot_ids)
    return {"batches": str(out), "n_batches": len(batches)}


def cmd_pretrain_gene(args) -> dict:
    cfg = _config(args)
    if args.stage == 1:
        ckpt = pl.run_stage1_gene(cfg)
    else:
        ckpt = pl.run_stage2_gene(cfg, _stage_dir(cfg, args.checkpoint, "stage1"))
    return {"checkpoint": str(ckpt)}


def cmd_align(args) -> dict:
    cfg = _config(args)
    return {"checkpoint": str(pl.run_alignment(cfg, _stage_dir(cfg, args.checkpoint, "stage2")))}


def cmd_embed(args) -> dict:
    cfg = _config(args)
    return {"embeddings": str(pl.export_embeddings(cfg, _stage_dir(cfg, args.checkpoint, "align")))}


def cmd_predict(args) -> dict:
    cfg = _config(args)
    if not 0 <= args.fold < cfg.eval.folds:
        raise ConfigError(f"--fold must lie in [0, {cfg.eval.folds})")
    out = pl.run_predict(cfg, _stage_dir(cfg, args.embeddings, "embeddings"), args.fold)
    return {"prediction": str(out)}


def cmd_evaluate(args) -> dict:
    cfg = _config(args)
    return {"metrics": str(pl.run_evaluate(cfg, _stage_dir(cfg, args.embeddings, "embeddings")))}


def cmd_gradcheck(args) -> dict:
    seed = args.seed if args.seed is not None else 0
    errors = run_gradchecks(seed, args.eps)
    worst = max(errors.values())
    if not np.isfinite(worst) or worst >= GRADCHECK_TOLERANCE:
        raise pl.NumericError(f"gradient check failed: {errors}")
    return {"max_rel_error": errors, "tolerance": GRADCHECK_TOLERANCE}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stampkit", parents=[common],
                                     description="Spatial transcriptomics / histology pretraining toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n-spots", type=int, default=600)
    p.add_argument("--n-clusters", type=int, default=3)
    p.add_argument("--n-genes", type=int, default=200)
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-vocab", parents=[common], help="collect gene ids from expression files")
    p.add_argument("expression", nargs="+")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("tokenize", parents=[common], help="write STK1 token sequences")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("sample-batches", parents=[common], help="write spatial mini-batches")
    p.set_defaults(func=cmd_sample_batches)

    p = sub.add_parser("pretrain-gene", parents=[common], help="gene encoder pretraining")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--checkpoint", help="stage-1 checkpoint for stage 2 (default <out>/stage1)")
    p.set_defaults(func=cmd_pretrain_gene)

    p = sub.add_parser("align", parents=[common], help="image-expression alignment training")
    p.add_argument("--checkpoint", help="gene checkpoint (default <out>/stage2)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("embed", parents=[common], help="export per-spot embeddings")
    p.add_argument("--checkpoint", help="alignment checkpoint (default <out>/align)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("predict", parents=[common], help="retrieval-based expression prediction")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--embeddings", help="embedding directory (default <out>/embeddings)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="clustering, probing and prediction metrics")
    p.add_argument("--embeddings", help="embedding directory (default <out>/embeddings)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (gd.DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
