import json

import pytest

from stampkit import cli


def tiny_config_dict(seed: int = 0) -> dict:
    """A full pipeline config small enough to run end to end in seconds."""
    return {
        "seed": seed,
        "dataset": "tiny",
        "paths": {"vocab": "vocab.txt", "expression": "expression.tsv", "coords": "coords.tsv",
                  "images": ".", "labels": "labels.tsv", "out": "run"},
        "data": {"seq_len": 32, "min_genes": 10},
        "gene_encoder": {"dim": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 32},
        "vision_encoder": {"dim": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 32},
        "stage1": {"epochs": 1, "batch_size": 32, "lr": 1e-3},
        "stage2": {"epochs": 1, "minibatches_per_step": 4, "lr": 1e-3},
        "align": {"steps": 3, "batch_size": 16, "lr": 1e-3, "warmup": 1, "shared_dim": 8},
        "eval": {"folds": 2, "top_k": 5, "top_genes": 50, "probe_epochs": 5,
                 "kmeans_restarts": 2},
    }


def make_tiny_dataset(directory, seed: int = 0):
    code = cli.main(["synth", "--seed", str(seed), "--out", str(directory), "--n-spots", "120"])
    assert code == 0
    path = directory / "config.json"
    path.write_text(json.dumps(tiny_config_dict(seed), indent=2))
    return path


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    return make_tiny_dataset(d)
