"""Operator entry point: embed KGs, generate synthetic worlds, train,
evaluate, predict, and sweep the modality-masking rate.

Configuration is a flat dotted-key JSON file overridable by --set flags
(flags win). Every command writes a manifest with the resolved config, all
derived seeds, and content hashes of its inputs; reruns with the same
manifest reproduce outputs bit-identically. Outputs go through
write-then-rename so partial files never appear.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from .data import (
    AblationFlags,
    SplitSpec,
    SyntheticWorldConfig,
    TaskSpec,
    filter_leakage,
    gen_synthetic,
    link_to_kg,
    load_entities,
    load_samples,
    split_dataset,
)
from .fusion import KeddModel, ModelConfig, SparseAttentionConfig
from .kg import KnowledgeGraph, ProneConfig, embed_graph, save_embedding
from .structure import GinConfig, McnnConfig
from .text import TransformerConfig, Vocabulary
from .train import (
    TrainConfig,
    aggregate_reports,
    config_fingerprint,
    evaluate,
    fit,
    load_model,
    save_checkpoint,
)

__all__ = ["run_cli", "main", "UsageError", "DEFAULT_CONFIG"]

MASK_SWEEP_GRID = (0.0, 0.05, 0.1, 0.2)

DEFAULT_CONFIG = {
    "seed": 0,
    "prone.dim": 64,
    "prone.negative_shift": 1.0,
    "prone.filter_center": 0.2,
    "prone.filter_sharpness": 0.5,
    "prone.chebyshev_order": 10,
    "prone.tsvd_oversampling": 10,
    "prone.tsvd_power_iters": 5,
    "attention.heads": 4,
    "attention.k": 16,
    "attention.query_dim": 64,
    "model.gin_layers": 5,
    "model.gin_hidden": 128,
    "model.gin_readout": "mean",
    "model.mcnn_depths": [2, 4, 6],
    "model.mcnn_channels": 64,
    "model.mcnn_kernel": 7,
    "model.mcnn_embedding": 32,
    "model.mcnn_output": 128,
    "model.protein_max_len": 1024,
    "model.text_layers": 4,
    "model.text_heads": 4,
    "model.text_model_dim": 128,
    "model.text_ff_dim": 256,
    "model.text_max_tokens": 256,
    "model.text_dropout": 0.1,
    "model.sk_feature_dim": 64,
    "model.uk_feature_dim": 128,
    "model.fusion_hidden": [256, 64],
    "model.fusion_dropout": 0.1,
    "model.feature_dropout": 0.1,
    "model.vocab_min_freq": 2,
    "split.mode": "warm",
    "split.ratios": [0.8, 0.1, 0.1],
    "split.folds": 9,
    "train.learning_rate": 1e-4,
    "train.batch_size": 32,
    "train.max_epochs": 100,
    "train.patience": 10,
    "train.mask_p": 0.05,
    "ablations.use_sk": True,
    "ablations.use_uk": True,
    "ablations.use_sparse_attention": True,
}


class UsageError(ValueError):
    """Bad flags, missing files, or invalid config: exit code 2."""


def derive_seed(root, name):
    """Per-component seed stream from one root seed."""
    seq = np.random.SeedSequence(entropy=(int(root), zlib.crc32(name.encode())))
    return int(seq.generate_state(1)[0])


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_text_atomic(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json_atomic(path, obj):
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def resolve_config(config_path=None, overrides=()):
    """defaults <- config file <- --set overrides; unknown keys rejected."""
    cfg = dict(DEFAULT_CONFIG)
    if config_path is not None:
        if not Path(config_path).exists():
            raise UsageError(f"config file not found: {config_path}")
        with open(config_path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        for key, value in loaded.items():
            if key not in cfg:
                raise UsageError(f"unknown config key '{key}'")
            cfg[key] = value
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got '{item}'")
        key, raw = item.split("=", 1)
        if key not in cfg:
            raise UsageError(f"unknown config key '{key}'")
        base = DEFAULT_CONFIG[key]
        try:
            if isinstance(base, bool):
                value = raw.lower() in ("1", "true", "yes")
            elif isinstance(base, int):
                value = int(raw)
            elif isinstance(base, float):
                value = float(raw)
            elif isinstance(base, list):
                value = json.loads(raw) if raw.startswith("[") else [
                    type(base[0])(v) for v in raw.split(",")
                ]
            else:
                value = raw
        except (ValueError, json.JSONDecodeError):
            raise UsageError(f"cannot parse '{raw}' for key '{key}'") from None
        cfg[key] = value
    return cfg


def pick_seed(args_seed, cfg):
    if args_seed is not None:
        return int(args_seed)
    env = os.environ.get("KEDD_SEED")
    if env is not None and cfg["seed"] == DEFAULT_CONFIG["seed"]:
        return int(env)
    return int(cfg["seed"])


def build_prone_config(cfg, seed):
    return ProneConfig(
        dim=cfg["prone.dim"],
        negative_shift=cfg["prone.negative_shift"],
        filter_center=cfg["prone.filter_center"],
        filter_sharpness=cfg["prone.filter_sharpness"],
        chebyshev_order=cfg["prone.chebyshev_order"],
        tsvd_oversampling=cfg["prone.tsvd_oversampling"],
        tsvd_power_iters=cfg["prone.tsvd_power_iters"],
        seed=derive_seed(seed, "prone"),
    )


def build_model_config(cfg):
    return ModelConfig(
        gin=GinConfig(
            num_layers=cfg["model.gin_layers"],
            hidden_dim=cfg["model.gin_hidden"],
            readout=cfg["model.gin_readout"],
        ),
        mcnn=McnnConfig(
            branch_depths=tuple(cfg["model.mcnn_depths"]),
            channels=cfg["model.mcnn_channels"],
            kernel_width=cfg["model.mcnn_kernel"],
            embedding_dim=cfg["model.mcnn_embedding"],
            output_dim=cfg["model.mcnn_output"],
            max_len=cfg["model.protein_max_len"],
        ),
        text=TransformerConfig(
            layers=cfg["model.text_layers"],
            heads=cfg["model.text_heads"],
            model_dim=cfg["model.text_model_dim"],
            ff_dim=cfg["model.text_ff_dim"],
            max_tokens=cfg["model.text_max_tokens"],
            dropout=cfg["model.text_dropout"],
        ),
        attention=SparseAttentionConfig(
            heads=cfg["attention.heads"],
            k=cfg["attention.k"],
            query_dim=cfg["attention.query_dim"],
        ),
        sk_dim=cfg["prone.dim"],
        sk_feature_dim=cfg["model.sk_feature_dim"],
        uk_feature_dim=cfg["model.uk_feature_dim"],
        fusion_hidden=tuple(cfg["model.fusion_hidden"]),
        fusion_dropout=cfg["model.fusion_dropout"],
        feature_dropout=cfg["model.feature_dropout"],
    )


def build_ablations(cfg):
    return AblationFlags(
        use_sk=cfg["ablations.use_sk"],
        use_uk=cfg["ablations.use_uk"],
        use_sparse_attention=cfg["ablations.use_sparse_attention"],
    )


def infer_arity(samples_path):
    with open(samples_path, "r", encoding="utf-8", newline="") as fh:
        header = next(csv.reader(fh), None)
    if not header or header[:2] != ["a", "b"]:
        raise UsageError(f"{samples_path}: header must start with 'a,b'")
    labels = [h for h in header[2:] if h != "group"]
    if not labels:
        raise UsageError(f"{samples_path}: no label columns")
    return len(labels)


def require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise UsageError(f"file not found: {p}")


def prepare_training_run(task_name, drugs, proteins, kg_edges, kg_entities, samples_path, cfg, seed):
    """Shared pipeline: load, split, link, filter leakage, embed, build model.

    The embedding is always computed on the leakage-filtered graph.
    """
    require_files(drugs, proteins, kg_edges, samples_path)
    task = TaskSpec(task_name.upper(), infer_arity(samples_path), build_ablations(cfg))
    entities, ingestion = load_entities(drugs, proteins, cfg["model.protein_max_len"])
    sample_set = load_samples(samples_path, task)
    sample_set.validate_ids(entities)
    kg = KnowledgeGraph.from_files(kg_edges, kg_entities)
    coverage = link_to_kg(entities, kg)

    split = SplitSpec(
        mode=cfg["split.mode"],
        ratios=tuple(cfg["split.ratios"]),
        folds=cfg["split.folds"],
        seed=derive_seed(seed, "split"),
    )
    tagged = split_dataset(sample_set, split)
    if isinstance(tagged, list):
        raise UsageError("fold-producing splits are not supported by 'train'; use warm/cold/precomputed")
    filtered_kg = filter_leakage(kg, tagged, entities)
    prone = build_prone_config(cfg, seed)
    embedding = embed_graph(filtered_kg, prone)

    train_texts = [
        entities[eid].text
        for eid in sorted(tagged.entity_ids("train"))
        if entities[eid].text is not None
    ]
    vocab = Vocabulary.build(train_texts, min_freq=cfg["model.vocab_min_freq"])

    model = KeddModel(
        task,
        build_model_config(cfg),
        vocab,
        embedding,
        seed=derive_seed(seed, "model"),
    )
    train_config = TrainConfig(
        learning_rate=cfg["train.learning_rate"],
        batch_size=cfg["train.batch_size"],
        max_epochs=cfg["train.max_epochs"],
        patience=cfg["train.patience"],
        mask_p=cfg["train.mask_p"],
        seed=derive_seed(seed, "train"),
        ablations=task.ablations,
    )
    return {
        "task": task,
        "entities": entities,
        "samples": tagged,
        "kg": filtered_kg,
        "embedding": embedding,
        "vocab": vocab,
        "model": model,
        "train_config": train_config,
        "ingestion": ingestion,
        "coverage": coverage,
    }


def _make_manifest(command, cfg, seed, inputs, outputs, extra=None):
    manifest = {
        "command": command,
        "config": cfg,
        "seed": seed,
        "derived_seeds": {
            name: derive_seed(seed, name) for name in ("split", "prone", "model", "train")
        },
        "inputs": {str(p): file_sha256(p) for p in inputs if p is not None},
        "outputs": sorted(str(o) for o in outputs),
    }
    if extra:
        manifest.update(extra)
    return manifest


def cmd_embed_kg(args):
    cfg = resolve_config(args.config, args.set or [])
    seed = pick_seed(args.seed, cfg)
    require_files(args.edges, args.entities)
    if args.dim is not None:
        cfg["prone.dim"] = args.dim
    kg = KnowledgeGraph.from_files(args.edges, args.entities)
    prone = build_prone_config(cfg, seed)
    embedding = embed_graph(kg, prone)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    save_embedding(tmp, embedding, prone, kg.content_hash())
    os.replace(tmp, out)
    os.replace(str(tmp) + ".manifest.json", str(out) + ".manifest.json")
    manifest = _make_manifest(
        "embed-kg", cfg, seed, [args.edges, args.entities],
        [out, str(out) + ".manifest.json"],
        extra={"rows": embedding.rows, "dim": embedding.dim},
    )
    write_json_atomic(str(out) + ".run.json", manifest)
    print(f"embedded {embedding.rows} entities at dim {embedding.dim} -> {out}")
    return 0


def cmd_gen_synthetic(args):
    cfg = resolve_config(args.config, args.set or [])
    seed = pick_seed(args.seed, cfg)
    world_config = SyntheticWorldConfig(
        task=args.task.upper(),
        num_drugs=args.drugs,
        num_proteins=args.proteins,
        num_samples=args.samples,
        label_arity=args.arity,
        latent_dim=args.latent_dim,
        clusters=args.clusters,
        w_struct=args.w_struct,
        w_kg=args.w_kg,
        w_text=args.w_text,
        missing_sk_ratio=args.missing_sk,
    )
    world = gen_synthetic(world_config, seed)
    out_dir = Path(args.out)
    world.write(out_dir)
    manifest = _make_manifest(
        "gen-synthetic", cfg, seed, [],
        [out_dir / n for n in ("drugs.jsonl", "proteins.jsonl", "kg_edges.tsv", "kg_entities.txt", "samples.csv")],
        extra={"world": world_config.to_dict(), "content_hash": world.content_hash()},
    )
    write_json_atomic(out_dir / "manifest.json", manifest)
    print(f"wrote synthetic {world_config.task} world to {out_dir} ({world.content_hash()[:12]})")
    return 0


def cmd_train(args):
    cfg = resolve_config(args.config, args.set or [])
    seed = pick_seed(args.seed, cfg)
    run = prepare_training_run(
        args.task, args.drugs, args.proteins, args.kg, args.kg_entities,
        args.samples, cfg, seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = config_fingerprint({"config": cfg, "seed": seed, "task": args.task})
    result = fit(run["model"], run["samples"], run["entities"], run["train_config"])
    result.report.config_fingerprint = fingerprint
    test_metrics = evaluate(run["model"], run["samples"].subset("test"), run["entities"])

    ckpt_tmp = out_dir / "checkpoint.bin.tmp"
    save_checkpoint(ckpt_tmp, run["model"], fingerprint)
    os.replace(ckpt_tmp, out_dir / "checkpoint.bin")
    metrics = {
        "train_report": result.report.to_dict(),
        "test": {k: test_metrics[k] for k in ("auroc", "auprc", "micro_f1")},
        "ingestion": run["ingestion"].to_dict(),
        "coverage": run["coverage"].to_dict(),
    }
    write_json_atomic(out_dir / "metrics.json", metrics)
    manifest = _make_manifest(
        "train", cfg, seed,
        [args.drugs, args.proteins, args.kg, args.kg_entities, args.samples],
        [out_dir / "checkpoint.bin", out_dir / "metrics.json"],
        extra={"task": args.task, "fingerprint": fingerprint},
    )
    write_json_atomic(out_dir / "manifest.json", manifest)
    shown = {k: v for k, v in metrics["test"].items() if v is not None}
    print(f"trained {args.task}: test {shown}")
    return 0


def cmd_eval(args):
    cfg = resolve_config(args.config, args.set or [])
    require_files(args.checkpoint, args.drugs, args.proteins, args.samples)
    model, fingerprint = load_model(args.checkpoint)
    entities, _ = load_entities(args.drugs, args.proteins, cfg["model.protein_max_len"])
    sample_set = load_samples(args.samples, model.task_spec)
    sample_set.validate_ids(entities)
    metrics = evaluate(model, sample_set.samples, entities)
    out = {
        "metrics": {k: metrics[k] for k in ("auroc", "auprc", "micro_f1")},
        "checkpoint_fingerprint": fingerprint,
        "num_samples": len(sample_set),
    }
    write_json_atomic(args.out, out)
    print(json.dumps(out["metrics"], sort_keys=True))
    return 0


def cmd_predict(args):
    require_files(args.checkpoint, args.drugs, args.proteins, args.pairs)
    model, _ = load_model(args.checkpoint)
    entities, _ = load_entities(args.drugs, args.proteins)
    rows = []
    with open(args.pairs, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["a", "b"]:
            raise UsageError(f"{args.pairs}: header must start with 'a,b'")
        for row in reader:
            if row:
                rows.append((row[0], row[1] or None))
    arity = model.task_spec.label_arity
    lines = ["a,b," + ",".join(
        "score" if i == 0 else f"score{i + 1}" for i in range(arity)
    )]
    for a, b in rows:  # output order matches input order exactly
        ent_a = entities[a]
        ent_b = entities[b] if b is not None else None
        probs = model.score(ent_a, ent_b)
        lines.append(f"{a},{b or ''}," + ",".join(repr(float(p)) for p in probs))
    write_text_atomic(args.out, "\n".join(lines) + "\n")
    print(f"scored {len(rows)} pairs -> {args.out}")
    return 0


def cmd_sweep_mask(args):
    cfg = resolve_config(args.config, args.set or [])
    seed = pick_seed(args.seed, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = []
    for p in MASK_SWEEP_GRID:
        run_metrics = []
        for rep in range(args.seeds):
            rep_seed = derive_seed(seed, f"replicate{rep}")
            rep_cfg = dict(cfg)
            rep_cfg["train.mask_p"] = p
            run = prepare_training_run(
                args.task, args.drugs, args.proteins, args.kg, args.kg_entities,
                args.samples, rep_cfg, rep_seed,
            )
            fit(run["model"], run["samples"], run["entities"], run["train_config"])
            test = evaluate(run["model"], run["samples"].subset("test"), run["entities"])
            run_metrics.append(test)
        table.append({"p": p, "metrics": aggregate_reports(run_metrics)})
    result = {"grid": list(MASK_SWEEP_GRID), "rows": table, "seeds": args.seeds}
    write_json_atomic(out_dir / "sweep.json", result)
    manifest = _make_manifest(
        "sweep-mask", cfg, seed,
        [args.drugs, args.proteins, args.kg, args.kg_entities, args.samples],
        [out_dir / "sweep.json"],
        extra={"task": args.task, "grid": list(MASK_SWEEP_GRID)},
    )
    write_json_atomic(out_dir / "manifest.json", manifest)
    print(f"{'p':>6}  {'AUROC':>8}  {'AUPR':>8}")
    for row in table:
        au = row["metrics"]["auroc"]
        ap = row["metrics"]["auprc"]
        print(
            f"{row['p']:>6.2f}  "
            f"{au['mean'] if au else float('nan'):>8.4f}  "
            f"{ap['mean'] if ap else float('nan'):>8.4f}"
        )
    return 0


def _add_common(parser):
    parser.add_argument("--config", help="flat dotted-key JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable; flags win)")
    parser.add_argument("--seed", type=int, help="root seed (default: config, then $KEDD_SEED)")


def _add_data_args(parser):
    parser.add_argument("--task", required=True, choices=["dti", "dp", "ddi", "ppi"])
    parser.add_argument("--drugs", required=True)
    parser.add_argument("--proteins", required=True)
    parser.add_argument("--kg", required=True, help="edge list TSV")
    parser.add_argument("--kg-entities", default=None, help="sidecar entity-id file")
    parser.add_argument("--samples", required=True)
    parser.add_argument("--out", required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="kedd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed-kg", help="embed a knowledge graph")
    _add_common(p)
    p.add_argument("--edges", required=True)
    p.add_argument("--entities", default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed_kg)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic benchmark world")
    _add_common(p)
    p.add_argument("--task", default="dti", choices=["dti", "dp", "ddi", "ppi"])
    p.add_argument("--drugs", type=int, default=60)
    p.add_argument("--proteins", type=int, default=40)
    p.add_argument("--samples", type=int, default=800)
    p.add_argument("--arity", type=int, default=1)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--w-struct", type=float, default=1.0)
    p.add_argument("--w-kg", type=float, default=1.0)
    p.add_argument("--w-text", type=float, default=1.0)
    p.add_argument("--missing-sk", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train a task model")
    _add_common(p)
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a sample file")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--drugs", required=True)
    p.add_argument("--proteins", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score entity pairs with a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--drugs", required=True)
    p.add_argument("--proteins", required=True)
    p.add_argument("--pairs", required=True, help="CSV with header a,b")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep-mask", help="train across masking rates 0/0.05/0.1/0.2")
    _add_common(p)
    _add_data_args(p)
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_sweep_mask)

    return parser


def run_cli(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        # Invalid configs and malformed inputs are usage errors too.
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
