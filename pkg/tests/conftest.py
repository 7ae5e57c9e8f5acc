"""Shared helpers: tiny desk-scale configs and synthetic training runs."""

import numpy as np
import pytest

from kedd.cli import prepare_training_run
from kedd.data import SyntheticWorldConfig, gen_synthetic

# Small dimensions keep a full training run in the hundreds of milliseconds
# while exercising every architectural piece.
TINY_OVERRIDES = {
    "prone.dim": 8,
    "prone.tsvd_oversampling": 8,
    "attention.heads": 2,
    "attention.k": 4,
    "attention.query_dim": 8,
    "model.gin_layers": 2,
    "model.gin_hidden": 12,
    "model.mcnn_depths": [1, 2, 3],
    "model.mcnn_channels": 6,
    "model.mcnn_kernel": 5,
    "model.mcnn_embedding": 6,
    "model.mcnn_output": 12,
    "model.text_layers": 1,
    "model.text_heads": 2,
    "model.text_model_dim": 12,
    "model.text_ff_dim": 16,
    "model.text_max_tokens": 24,
    "model.sk_feature_dim": 8,
    "model.uk_feature_dim": 8,
    "model.fusion_hidden": [24, 12],
    "model.vocab_min_freq": 2,
    "train.learning_rate": 3e-3,
    "train.batch_size": 16,
    "train.max_epochs": 3,
    "train.patience": 3,
    "train.mask_p": 0.05,
}


def tiny_config(**extra):
    from kedd.cli import resolve_config

    cfg = resolve_config()
    cfg.update(TINY_OVERRIDES)
    cfg.update(extra)
    return cfg


def write_world(tmp_path, seed=0, **world_kwargs):
    defaults = dict(num_drugs=16, num_proteins=10, num_samples=80)
    defaults.update(world_kwargs)
    world = gen_synthetic(SyntheticWorldConfig(**defaults), seed=seed)
    world.write(tmp_path)
    return world


def make_run(tmp_path, cfg, seed=0, task="dti"):
    return prepare_training_run(
        task,
        tmp_path / "drugs.jsonl",
        tmp_path / "proteins.jsonl",
        tmp_path / "kg_edges.tsv",
        tmp_path / "kg_entities.txt",
        tmp_path / "samples.csv",
        cfg,
        seed,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
