"""Entity and sample ingestion, KG linking, split generation, leakage
removal, and synthetic desk-scale benchmark worlds.

File formats:
  drugs.jsonl    {"id", "atoms": [...], "bonds": [[i,j,order],...], "text"?, "kg_id"?}
  proteins.jsonl {"id", "sequence", "text"?, "kg_id"?}
  kg_edges.tsv   head<TAB>relation<TAB>tail (+ sidecar entity-id file)
  samples.csv    a,b,label[,label2,...][,group] with b empty for DP
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .kg import KnowledgeGraph
from .structure import MolecularGraph, ProteinSequence

__all__ = [
    "EntityRecord",
    "IngestionReport",
    "CoverageReport",
    "Sample",
    "SampleSet",
    "SplitSpec",
    "TaskSpec",
    "AblationFlags",
    "load_entities",
    "save_entities",
    "load_samples",
    "save_samples",
    "link_to_kg",
    "split_dataset",
    "filter_leakage",
    "SyntheticWorldConfig",
    "SyntheticWorld",
    "gen_synthetic",
]

TASKS = ("DTI", "DP", "DDI", "PPI")


@dataclass
class AblationFlags:
    use_sk: bool = True
    use_uk: bool = True
    use_sparse_attention: bool = True

    def to_dict(self):
        return {
            "use_sk": self.use_sk,
            "use_uk": self.use_uk,
            "use_sparse_attention": self.use_sparse_attention,
        }


@dataclass
class TaskSpec:
    """Which prediction task, its entity kinds, and the label arity."""

    task: str
    label_arity: int = 1
    ablations: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task '{self.task}'")
        if self.label_arity < 1:
            raise ValueError("label_arity must be >= 1")
        if self.task != "PPI" and self.label_arity != 1:
            raise ValueError(f"{self.task} is single-label")

    @property
    def entity_kinds(self):
        return {
            "DTI": ("drug", "protein"),
            "DP": ("drug", None),
            "DDI": ("drug", "drug"),
            "PPI": ("protein", "protein"),
        }[self.task]

    @property
    def is_pair_task(self):
        return self.entity_kinds[1] is not None


@dataclass
class EntityRecord:
    """A drug or protein with structure, optional KG link, optional text."""

    id: str
    kind: str
    structure: object
    kg_id: str | None = None
    text: str | None = None

    def __post_init__(self):
        if self.kind == "drug" and not isinstance(self.structure, MolecularGraph):
            raise ValueError(f"entity {self.id}: drug needs a molecular graph")
        if self.kind == "protein" and not isinstance(self.structure, ProteinSequence):
            raise ValueError(f"entity {self.id}: protein needs a sequence")
        if self.kind not in ("drug", "protein"):
            raise ValueError(f"entity {self.id}: unknown kind '{self.kind}'")


@dataclass
class IngestionReport:
    counts: dict = field(default_factory=lambda: {"drug": 0, "protein": 0})
    truncated_sequences: int = 0
    missing_text: dict = field(default_factory=lambda: {"drug": 0, "protein": 0})
    missing_kg: dict = field(default_factory=lambda: {"drug": 0, "protein": 0})

    @property
    def total_issues(self):
        return (
            self.truncated_sequences
            + sum(self.missing_text.values())
            + sum(self.missing_kg.values())
        )

    def to_dict(self):
        return {
            "counts": dict(self.counts),
            "truncated_sequences": self.truncated_sequences,
            "missing_text": dict(self.missing_text),
            "missing_kg": dict(self.missing_kg),
        }


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def load_entities(drugs_path, proteins_path, max_protein_len=1024):
    """Parse and validate both entity files; the report counts truncations
    and missing optional modalities."""
    entities = OrderedDict()
    report = IngestionReport()

    for lineno, obj in _read_jsonl(drugs_path):
        try:
            graph = MolecularGraph(obj["atoms"], [tuple(b) for b in obj.get("bonds", [])])
            record = EntityRecord(
                id=str(obj["id"]),
                kind="drug",
                structure=graph,
                kg_id=obj.get("kg_id"),
                text=obj.get("text"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{drugs_path}:{lineno}: {exc}") from None
        if record.id in entities:
            raise ValueError(f"{drugs_path}:{lineno}: duplicate id '{record.id}'")
        entities[record.id] = record
        report.counts["drug"] += 1
        report.missing_text["drug"] += record.text is None
        report.missing_kg["drug"] += record.kg_id is None

    for lineno, obj in _read_jsonl(proteins_path):
        try:
            seq, truncated = ProteinSequence.from_raw(obj["sequence"], max_protein_len)
            record = EntityRecord(
                id=str(obj["id"]),
                kind="protein",
                structure=seq,
                kg_id=obj.get("kg_id"),
                text=obj.get("text"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{proteins_path}:{lineno}: {exc}") from None
        if record.id in entities:
            raise ValueError(f"{proteins_path}:{lineno}: duplicate id '{record.id}'")
        entities[record.id] = record
        report.counts["protein"] += 1
        report.truncated_sequences += truncated
        report.missing_text["protein"] += record.text is None
        report.missing_kg["protein"] += record.kg_id is None

    return entities, report


def save_entities(entities, drugs_path, proteins_path):
    """Canonical JSONL serialization; load -> save -> load is lossless."""
    with open(drugs_path, "w", encoding="utf-8") as dfh, open(
        proteins_path, "w", encoding="utf-8"
    ) as pfh:
        for record in entities.values():
            obj = {"id": record.id}
            if record.kind == "drug":
                obj["atoms"] = list(record.structure.atoms)
                obj["bonds"] = [list(b) for b in record.structure.bonds]
            else:
                obj["sequence"] = record.structure.residues
            if record.text is not None:
                obj["text"] = record.text
            if record.kg_id is not None:
                obj["kg_id"] = record.kg_id
            line = json.dumps(obj, sort_keys=True) + "\n"
            (dfh if record.kind == "drug" else pfh).write(line)


@dataclass
class Sample:
    a: str
    b: str | None
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError(f"sample ({self.a}, {self.b}): labels must be 0/1")

    def pair_key(self):
        return frozenset((self.a, self.b)) if self.b is not None else frozenset((self.a,))


class SampleSet:
    """Task-typed samples with optional per-sample split tags."""

    def __init__(self, task, samples, tags=None, groups=None):
        self.task = task
        self.samples = list(samples)
        self.tags = list(tags) if tags is not None else [None] * len(self.samples)
        self.groups = list(groups) if groups is not None else None
        if len(self.tags) != len(self.samples):
            raise ValueError("one tag per sample required")
        seen = set()
        for s in self.samples:
            if len(s.labels) != task.label_arity:
                raise ValueError(
                    f"sample ({s.a}, {s.b}): {len(s.labels)} labels for arity {task.label_arity}"
                )
            if (s.b is None) == task.is_pair_task:
                raise ValueError(f"sample ({s.a}, {s.b}): wrong arity for task {task.task}")
            key = s.pair_key()
            if key in seen:
                raise ValueError(f"duplicate pair ({s.a}, {s.b})")
            seen.add(key)

    def __len__(self):
        return len(self.samples)

    def validate_ids(self, entities):
        kind_a, kind_b = self.task.entity_kinds
        for s in self.samples:
            for eid, kind in ((s.a, kind_a), (s.b, kind_b)):
                if eid is None:
                    continue
                if eid not in entities:
                    raise ValueError(f"unknown entity id '{eid}'")
                if entities[eid].kind != kind:
                    raise ValueError(
                        f"entity '{eid}' is a {entities[eid].kind}, expected {kind}"
                    )

    def subset(self, tag):
        return [s for s, t in zip(self.samples, self.tags) if t == tag]

    def with_tags(self, tags):
        return SampleSet(self.task, self.samples, tags, self.groups)

    def entity_ids(self, tag=None):
        ids = set()
        for s, t in zip(self.samples, self.tags):
            if tag is not None and t != tag:
                continue
            ids.add(s.a)
            if s.b is not None:
                ids.add(s.b)
        return ids


def load_samples(path, task):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty samples file") from None
        if header[:2] != ["a", "b"]:
            raise ValueError(f"{path}: header must start with 'a,b'")
        has_group = header[-1] == "group"
        label_cols = header[2 : -1 if has_group else len(header)]
        if not label_cols:
            raise ValueError(f"{path}: no label columns")
        samples, groups = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
            b = row[1] or None
            labels = [int(v) for v in row[2 : 2 + len(label_cols)]]
            samples.append(Sample(row[0], b, labels))
            if has_group:
                groups.append(row[-1])
    return SampleSet(task, samples, groups=groups if has_group else None)


def save_samples(path, sample_set, include_groups=False):
    arity = sample_set.task.label_arity
    header = ["a", "b"] + ["label" if i == 0 else f"label{i + 1}" for i in range(arity)]
    if include_groups:
        header.append("group")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for idx, s in enumerate(sample_set.samples):
            row = [s.a, s.b or ""] + [int(v) for v in s.labels]
            if include_groups:
                row.append(sample_set.groups[idx] if sample_set.groups else "")
            writer.writerow(row)


@dataclass
class CoverageReport:
    linked: dict
    unlinked: dict

    def missing_ratio(self, kind):
        total = self.linked[kind] + self.unlinked[kind]
        return self.unlinked[kind] / total if total else 0.0

    def to_dict(self):
        out = {"linked": dict(self.linked), "unlinked": dict(self.unlinked)}
        out["missing_ratio"] = {
            k: self.missing_ratio(k) for k in ("drug", "protein")
        }
        return out


def link_to_kg(entities, kg):
    """Count linked/unlinked entities per kind; a kg_id that does not resolve
    in the graph is an invariant breach and raises."""
    linked = {"drug": 0, "protein": 0}
    unlinked = {"drug": 0, "protein": 0}
    for record in entities.values():
        if record.kg_id is None:
            unlinked[record.kind] += 1
        elif record.kg_id not in kg.index:
            raise ValueError(f"entity '{record.id}': kg_id '{record.kg_id}' not in graph")
        else:
            linked[record.kind] += 1
    for kind in ("drug", "protein"):
        if unlinked[kind] and not linked[kind]:
            warnings.warn(f"no {kind} is linked to the knowledge graph", stacklevel=2)
    return CoverageReport(linked, unlinked)


@dataclass
class SplitSpec:
    mode: str = "warm"
    ratios: tuple = (0.8, 0.1, 0.1)
    folds: int = 9
    seed: int = 0

    def __post_init__(self):
        modes = ("random", "warm", "cold_drug", "cold_protein", "cold_cluster", "precomputed")
        if self.mode not in modes:
            raise ValueError(f"unknown split mode '{self.mode}'")
        self.ratios = tuple(float(r) for r in self.ratios)
        if abs(sum(self.ratios) - 1.0) > 1e-9 or len(self.ratios) != 3:
            raise ValueError("ratios must be three values summing to 1")
        if self.mode == "cold_cluster":
            root = int(round(np.sqrt(self.folds)))
            if root * root != self.folds:
                raise ValueError(f"cold_cluster needs a perfect-square fold count, got {self.folds}")


def _partition_counts(n, ratios):
    n_train = int(np.floor(ratios[0] * n))
    n_valid = int(np.floor(ratios[1] * n))
    return n_train, n_valid, n - n_train - n_valid


def _chunks(items, k):
    """Near-equal contiguous chunks, first chunks take the remainder."""
    base, extra = divmod(len(items), k)
    out, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append(items[start : start + size])
        start += size
    return out


def split_dataset(sample_set, spec, entities=None):
    """Tag samples train/valid/test (or produce fold list for cold_cluster).

    Cold modes partition entity ids of the held-out kind; DDI pairs that
    straddle buckets are dropped (tagged None) to keep the entity sets
    exactly disjoint. Deterministic under the split seed.
    """
    rng = np.random.default_rng(spec.seed)
    task = sample_set.task
    n = len(sample_set)

    if spec.mode in ("random", "warm"):
        order = rng.permutation(n)
        n_train, n_valid, _ = _partition_counts(n, spec.ratios)
        tags = [None] * n
        for pos, idx in enumerate(order):
            tags[idx] = "train" if pos < n_train else "valid" if pos < n_train + n_valid else "test"
        return sample_set.with_tags(tags)

    if spec.mode in ("cold_drug", "cold_protein"):
        kind = "drug" if spec.mode == "cold_drug" else "protein"
        kinds = task.entity_kinds
        positions = [i for i, k in enumerate(kinds) if k == kind]
        if not positions:
            raise ValueError(f"{spec.mode} infeasible: task {task.task} has no {kind}s")
        ids = sorted(
            {getattr(s, "ab"[p]) for s in sample_set.samples for p in positions}
        )
        n_train, n_valid, n_test = _partition_counts(len(ids), spec.ratios)
        if n_train < 1 or n_test < 1:
            raise ValueError(
                f"{spec.mode} infeasible: {len(ids)} distinct {kind}s cannot fill train and test"
            )
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        bucket = {}
        for pos, eid in enumerate(shuffled):
            bucket[eid] = "train" if pos < n_train else "valid" if pos < n_train + n_valid else "test"
        tags = []
        for s in sample_set.samples:
            tag_set = {bucket[getattr(s, "ab"[p])] for p in positions}
            tags.append(tag_set.pop() if len(tag_set) == 1 else None)
        return sample_set.with_tags(tags)

    if spec.mode == "cold_cluster":
        kind_a, kind_b = task.entity_kinds
        if kind_a == kind_b or kind_b is None:
            raise ValueError("cold_cluster needs a task with two distinct entity kinds")
        groups_per_side = int(round(np.sqrt(spec.folds)))
        a_ids = sorted({s.a for s in sample_set.samples})
        b_ids = sorted({s.b for s in sample_set.samples})
        if len(a_ids) < groups_per_side or len(b_ids) < groups_per_side:
            raise ValueError("cold_cluster infeasible: fewer entities than groups")
        a_groups = _chunks([a_ids[i] for i in rng.permutation(len(a_ids))], groups_per_side)
        b_groups = _chunks([b_ids[i] for i in rng.permutation(len(b_ids))], groups_per_side)
        a_of = {eid: gi for gi, grp in enumerate(a_groups) for eid in grp}
        b_of = {eid: gi for gi, grp in enumerate(b_groups) for eid in grp}
        valid_share = (
            spec.ratios[1] / (spec.ratios[0] + spec.ratios[1])
            if spec.ratios[0] + spec.ratios[1] > 0
            else 0.0
        )
        folds = []
        for gi in range(groups_per_side):
            for gj in range(groups_per_side):
                tags = []
                pool = []
                for idx, s in enumerate(sample_set.samples):
                    in_a, in_b = a_of[s.a] == gi, b_of[s.b] == gj
                    if in_a and in_b:
                        tags.append("test")
                    elif not in_a and not in_b:
                        tags.append("train")
                        pool.append(idx)
                    else:
                        tags.append(None)  # straddles the held-out groups
                n_valid = int(np.floor(valid_share * len(pool)))
                for idx in rng.permutation(len(pool))[:n_valid]:
                    tags[pool[idx]] = "valid"
                folds.append(sample_set.with_tags(tags))
        return folds

    if spec.mode == "precomputed":
        if sample_set.groups is None:
            raise ValueError("precomputed split needs a 'group' column")
        allowed = {"train", "valid", "test"}
        bad = sorted(set(sample_set.groups) - allowed)
        if bad:
            raise ValueError(f"precomputed groups must be train/valid/test, got {bad}")
        return sample_set.with_tags(list(sample_set.groups))

    raise AssertionError(f"unhandled mode {spec.mode}")


def filter_leakage(kg, sample_set, entities):
    """Drop KG edges whose endpoints form a validation- or test-set pair.

    Embeddings must be recomputed on the returned graph. Validation pairs
    are removed alongside test pairs (strictly safer than test-only).
    """
    if all(t is None for t in sample_set.tags):
        raise ValueError("filter_leakage needs split tags; run split_dataset first")
    pairs = set()
    for s, tag in zip(sample_set.samples, sample_set.tags):
        if tag not in ("valid", "test") or s.b is None:
            continue
        ka = entities[s.a].kg_id
        kb = entities[s.b].kg_id
        if ka is not None and kb is not None and ka != kb:
            pairs.add((ka, kb))
    return kg.without_edges(pairs)


# ---------------------------------------------------------------------------
# Synthetic worlds
# ---------------------------------------------------------------------------


@dataclass
class SyntheticWorldConfig:
    """Generator knobs: cluster-structured latents drive labels; each
    modality observes the latent through its own weighted, quantized view."""

    task: str = "DTI"
    num_drugs: int = 60
    num_proteins: int = 40
    num_samples: int = 800
    label_arity: int = 1
    latent_dim: int = 8
    clusters: int = 4
    w_struct: float = 1.0
    w_kg: float = 1.0
    w_text: float = 1.0
    missing_sk_ratio: float = 0.0
    buckets: int = 6
    kg_neighbors: int = 4
    struct_dims: tuple | None = None  # latent slice per modality; None = all
    kg_dims: tuple | None = None
    text_dims: tuple | None = None
    label_dims: tuple | None = None  # latent slice the labels depend on

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task '{self.task}'")
        if self.label_arity < 1:
            raise ValueError("label_arity must be >= 1")
        if self.task != "PPI" and self.label_arity != 1:
            raise ValueError(f"{self.task} is single-label")
        if not 0.0 <= self.missing_sk_ratio <= 1.0:
            raise ValueError("missing_sk_ratio must be in [0, 1]")
        for name in ("num_drugs", "num_proteins", "num_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self):
        out = {}
        for key, val in self.__dict__.items():
            out[key] = list(val) if isinstance(val, tuple) else val
        return out


@dataclass
class SyntheticWorld:
    entities: OrderedDict
    kg: KnowledgeGraph
    samples: SampleSet
    latents: dict
    config: SyntheticWorldConfig
    seed: int

    def content_hash(self):
        blob = {
            "entities": [
                {
                    "id": r.id,
                    "kind": r.kind,
                    "structure": (
                        [r.structure.atoms, r.structure.bonds]
                        if r.kind == "drug"
                        else r.structure.residues
                    ),
                    "kg_id": r.kg_id,
                    "text": r.text,
                }
                for r in self.entities.values()
            ],
            "edges": sorted(self.kg.edges),
            "samples": [
                [s.a, s.b, [int(v) for v in s.labels]] for s in self.samples.samples
            ],
        }
        payload = json.dumps(blob, sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def write(self, out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
        save_entities(self.entities, out_dir / "drugs.jsonl", out_dir / "proteins.jsonl")
        self.kg.save(out_dir / "kg_edges.tsv", out_dir / "kg_entities.txt")
        save_samples(out_dir / "samples.csv", self.samples)


_DIM_MARKERS = "ACDEFGHIK"
_BUCKET_LETTERS = "LMNPQRSTVW"
_RELATIONS = ("r0", "r1", "r2")


def _pick_centers(rng, clusters, dim, label_dims):
    """Unit cluster centers whose pairwise dots over the label slice are
    bounded away from zero and sign-balanced, so pair labels are clean and
    learnable."""
    best = None
    for _ in range(200):
        centers = rng.standard_normal((clusters, dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        sliced = centers[:, list(label_dims)]
        dots = sliced @ sliced.T
        off = dots[~np.eye(clusters, dtype=bool)]
        margin = np.abs(off).min()
        pos_rate = np.mean(off > 0)
        score = margin if 0.25 <= pos_rate <= 0.75 else -1.0
        if best is None or score > best[0]:
            best = (score, centers)
        if score > 0.1:
            break
    return best[1]


def _quantize(rng, z, dims, weight, buckets, latent_dim):
    """Bucketize a weighted mix of the latent slice and fresh noise."""
    y = z[list(dims)] * np.sqrt(latent_dim)  # roughly unit variance per dim
    noise = rng.standard_normal(len(dims))
    v = weight * y + (1.0 - weight) * noise
    return np.clip(((v + 2.0) / 4.0 * buckets).astype(int), 0, buckets - 1)


def _drug_graph(bucket_ids, buckets):
    atoms = [6] + [10 + i * buckets + b for i, b in enumerate(bucket_ids)]
    bonds = [(i, i + 1, 1) for i in range(len(atoms) - 1)]
    return MolecularGraph(atoms, bonds)


def _protein_seq(bucket_ids):
    parts = ["GG"]
    for i, b in enumerate(bucket_ids):
        parts.append(_DIM_MARKERS[i % len(_DIM_MARKERS)] + _BUCKET_LETTERS[b] + "G")
    return ProteinSequence("".join(parts))


def _entity_text(rng, bucket_ids):
    tokens = ["molecule"]
    tokens += [f"d{i}b{b}" for i, b in enumerate(bucket_ids)]
    tokens.append(f"assay{rng.integers(4)}")
    return " ".join(tokens)


def gen_synthetic(config, seed):
    """Deterministic world: latents -> labels, structures, KG, and texts."""
    if config.buckets > len(_BUCKET_LETTERS):
        raise ValueError(f"at most {len(_BUCKET_LETTERS)} buckets supported")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x5EED)))
    h = config.latent_dim
    all_dims = tuple(range(h))
    struct_dims = config.struct_dims or all_dims
    kg_dims = config.kg_dims or all_dims
    text_dims = config.text_dims or all_dims
    if len(struct_dims) > len(_DIM_MARKERS) or len(text_dims) > 9:
        raise ValueError("too many structure/text signal dimensions")

    centers = _pick_centers(rng, config.clusters, h, config.label_dims or all_dims)
    ids, kinds = [], []
    for i in range(config.num_drugs):
        ids.append(f"d{i:04d}")
        kinds.append("drug")
    for i in range(config.num_proteins):
        ids.append(f"p{i:04d}")
        kinds.append("protein")
    assignments = rng.integers(0, config.clusters, size=len(ids))
    latent = centers[assignments] + 0.25 * rng.standard_normal((len(ids), h))
    latent /= np.linalg.norm(latent, axis=1, keepdims=True)
    z_of = {eid: latent[i] for i, eid in enumerate(ids)}

    entities = OrderedDict()
    for i, (eid, kind) in enumerate(zip(ids, kinds)):
        z = latent[i]
        sb = _quantize(rng, z, struct_dims, config.w_struct, config.buckets, h)
        tb = _quantize(rng, z, text_dims, config.w_text, config.buckets, h)
        structure = _drug_graph(sb, config.buckets) if kind == "drug" else _protein_seq(sb)
        entities[eid] = EntityRecord(
            id=eid,
            kind=kind,
            structure=structure,
            kg_id=f"kg:{eid}",
            text=_entity_text(rng, tb),
        )

    # KG edges: each node links to its most similar peers in the KG view.
    view = config.w_kg * latent[:, list(kg_dims)] + (
        1.0 - config.w_kg
    ) * rng.standard_normal((len(ids), len(kg_dims)))
    view /= np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-12)
    sims = view @ view.T
    np.fill_diagonal(sims, -np.inf)
    edge_keys = set()
    edges = []
    for i in range(len(ids)):
        for j in np.argsort(-sims[i])[: config.kg_neighbors]:
            key = (min(i, j), max(i, j))
            if key in edge_keys:
                continue
            edge_keys.add(key)
            rel = _RELATIONS[int(rng.integers(len(_RELATIONS)))]
            edges.append((f"kg:{ids[key[0]]}", rel, f"kg:{ids[key[1]]}"))
    kg = KnowledgeGraph([f"kg:{eid}" for eid in ids], edges)

    # Strip kg links from a deterministic floor-rounded fraction per kind.
    for kind, count in (("drug", config.num_drugs), ("protein", config.num_proteins)):
        kind_ids = [eid for eid in ids if entities[eid].kind == kind]
        n_miss = int(np.floor(config.missing_sk_ratio * count))
        for eid in rng.choice(kind_ids, size=n_miss, replace=False):
            entities[eid] = replace(entities[eid], kg_id=None)

    drug_ids = [eid for eid in ids if entities[eid].kind == "drug"]
    protein_ids = [eid for eid in ids if entities[eid].kind == "protein"]
    task_spec = TaskSpec(config.task, config.label_arity)
    relation_dirs = rng.standard_normal((config.label_arity, h))
    label_dims = list(config.label_dims or all_dims)

    samples = []
    if config.task == "DP":
        if config.num_samples > len(drug_ids):
            raise ValueError("DP worlds cannot have more samples than drugs")
        chosen = drug_ids[: config.num_samples]
        direction = relation_dirs[0]
        for eid in chosen:
            z = z_of[eid][label_dims]
            samples.append(Sample(eid, None, [int(z @ direction[label_dims] > 0)]))
    else:
        if config.task == "DTI":
            left, right = drug_ids, protein_ids
            pool = [(a, b) for a in left for b in right]
        else:
            side = drug_ids if config.task == "DDI" else protein_ids
            pool = [(side[i], side[j]) for i in range(len(side)) for j in range(i + 1, len(side))]
        if config.num_samples > len(pool):
            raise ValueError(
                f"num_samples {config.num_samples} exceeds {len(pool)} possible pairs"
            )
        picked = rng.permutation(len(pool))[: config.num_samples]
        for idx in picked:
            a, b = pool[idx]
            za, zb = z_of[a][label_dims], z_of[b][label_dims]
            if config.task == "PPI":
                labels = [int((za * zb) @ u[label_dims] > 0) for u in relation_dirs]
            else:
                labels = [int(za @ zb > 0)]
            samples.append(Sample(a, b, labels))

    sample_set = SampleSet(task_spec, samples)
    sample_set.validate_ids(entities)
    return SyntheticWorld(entities, kg, sample_set, z_of, config, int(seed))
