"""Data pipeline tests: ingestion, linking, splits, leakage, synthetic worlds."""

import json

import numpy as np
import pytest

from kedd.data import (
    AblationFlags,
    EntityRecord,
    Sample,
    SampleSet,
    SplitSpec,
    SyntheticWorldConfig,
    TaskSpec,
    filter_leakage,
    gen_synthetic,
    link_to_kg,
    load_entities,
    load_samples,
    save_entities,
    save_samples,
    split_dataset,
)
from kedd.kg import KnowledgeGraph, ProneConfig, embed_graph
from kedd.metrics import auroc
from kedd.structure import MolecularGraph, ProteinSequence


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def tiny_drug(i, **extra):
    return {"id": f"d{i}", "atoms": [6, 8], "bonds": [[0, 1, 1]], **extra}


def tiny_protein(i, **extra):
    return {"id": f"p{i}", "sequence": "MKV", **extra}


class TestLoadEntities:
    def test_happy_path_no_issues(self, tmp_path):
        write_jsonl(
            tmp_path / "drugs.jsonl",
            [tiny_drug(i, text="a drug", kg_id=f"kg:d{i}") for i in range(3)],
        )
        write_jsonl(
            tmp_path / "proteins.jsonl",
            [tiny_protein(0, text="a protein", kg_id="kg:p0")],
        )
        entities, report = load_entities(tmp_path / "drugs.jsonl", tmp_path / "proteins.jsonl")
        assert report.counts == {"drug": 3, "protein": 1}
        assert report.total_issues == 0

    def test_invalid_residue_rejected_with_position(self, tmp_path):
        write_jsonl(tmp_path / "drugs.jsonl", [])
        write_jsonl(tmp_path / "proteins.jsonl", [{"id": "p0", "sequence": "MJV"}])
        with pytest.raises(ValueError, match="position 2"):
            load_entities(tmp_path / "drugs.jsonl", tmp_path / "proteins.jsonl")

    def test_missing_kg_id_counted(self, tmp_path):
        write_jsonl(tmp_path / "drugs.jsonl", [tiny_drug(0, text="x")])
        write_jsonl(tmp_path / "proteins.jsonl", [])
        _, report = load_entities(tmp_path / "drugs.jsonl", tmp_path / "proteins.jsonl")
        assert report.missing_kg["drug"] == 1

    def test_duplicate_id_rejected(self, tmp_path):
        write_jsonl(tmp_path / "drugs.jsonl", [tiny_drug(0), tiny_drug(0)])
        write_jsonl(tmp_path / "proteins.jsonl", [])
        with pytest.raises(ValueError, match="duplicate id"):
            load_entities(tmp_path / "drugs.jsonl", tmp_path / "proteins.jsonl")

    def test_malformed_line_reports_number(self, tmp_path):
        (tmp_path / "drugs.jsonl").write_text('{"id": "d0", "atoms": [6]}\nnot json\n')
        write_jsonl(tmp_path / "proteins.jsonl", [])
        with pytest.raises(ValueError, match=":2"):
            load_entities(tmp_path / "drugs.jsonl", tmp_path / "proteins.jsonl")

    def test_truncation_recorded(self, tmp_path):
        write_jsonl(tmp_path / "drugs.jsonl", [])
        write_jsonl(tmp_path / "proteins.jsonl", [{"id": "p0", "sequence": "M" * 2000}])
        entities, report = load_entities(
            tmp_path / "drugs.jsonl", tmp_path / "proteins.jsonl"
        )
        assert report.truncated_sequences == 1
        assert entities["p0"].structure.length == 1024

    def test_roundtrip_lossless(self, tmp_path):
        write_jsonl(
            tmp_path / "drugs.jsonl",
            [tiny_drug(0, kg_id="kg:d0"), tiny_drug(1, text="t")],
        )
        write_jsonl(tmp_path / "proteins.jsonl", [tiny_protein(0, text="p")])
        entities, _ = load_entities(tmp_path / "drugs.jsonl", tmp_path / "proteins.jsonl")
        save_entities(entities, tmp_path / "d2.jsonl", tmp_path / "p2.jsonl")
        reloaded, _ = load_entities(tmp_path / "d2.jsonl", tmp_path / "p2.jsonl")
        save_entities(reloaded, tmp_path / "d3.jsonl", tmp_path / "p3.jsonl")
        assert (tmp_path / "d2.jsonl").read_bytes() == (tmp_path / "d3.jsonl").read_bytes()
        assert (tmp_path / "p2.jsonl").read_bytes() == (tmp_path / "p3.jsonl").read_bytes()


class TestLinkToKg:
    def make_entities(self, n_linked, n_total):
        entities = {}
        for i in range(n_total):
            kg_id = f"kg:d{i}" if i < n_linked else None
            entities[f"d{i}"] = EntityRecord(
                f"d{i}", "drug", MolecularGraph([6], []), kg_id=kg_id
            )
        return entities

    def test_full_coverage(self):
        entities = self.make_entities(4, 4)
        kg = KnowledgeGraph([f"kg:d{i}" for i in range(4)], [("kg:d0", "r", "kg:d1")])
        report = link_to_kg(entities, kg)
        assert report.missing_ratio("drug") == 0.0

    def test_yamanishi_style_ratio(self):
        # 488 of 791 drugs linked: missing ratio 1 - 488/791.
        entities = self.make_entities(488, 791)
        kg = KnowledgeGraph([f"kg:d{i}" for i in range(488)], [])
        report = link_to_kg(entities, kg)
        assert report.missing_ratio("drug") == pytest.approx(1 - 488 / 791, abs=1e-12)
        assert round(report.missing_ratio("drug"), 3) == 0.383

    def test_none_linked_warns(self):
        entities = self.make_entities(0, 3)
        kg = KnowledgeGraph(["kg:x"], [])
        with pytest.warns(UserWarning, match="no drug"):
            report = link_to_kg(entities, kg)
        assert report.missing_ratio("drug") == 1.0

    def test_unresolvable_kg_id_is_hard_error(self):
        entities = self.make_entities(1, 1)
        kg = KnowledgeGraph(["kg:other"], [])
        with pytest.raises(ValueError, match="not in graph"):
            link_to_kg(entities, kg)


def dti_samples(drugs, proteins, rng=None, arity=1):
    task = TaskSpec("DTI", arity)
    rng = rng or np.random.default_rng(0)
    samples = [
        Sample(d, p, rng.integers(0, 2, arity)) for d in drugs for p in proteins
    ]
    return SampleSet(task, samples)


class TestSplits:
    def test_warm_ratio_arithmetic(self):
        ss = dti_samples([f"d{i}" for i in range(25)], [f"p{i}" for i in range(40)])
        tagged = split_dataset(ss, SplitSpec(mode="warm", seed=3))
        counts = {t: tagged.tags.count(t) for t in ("train", "valid", "test")}
        assert counts == {"train": 800, "valid": 100, "test": 100}

    def test_cold_drug_disjoint(self):
        ss = dti_samples([f"d{i}" for i in range(1, 5)], ["p1", "p2"])
        tagged = split_dataset(ss, SplitSpec(mode="cold_drug", seed=1))
        test_drugs = {s.a for s in tagged.subset("test")}
        train_drugs = {s.a for s in tagged.subset("train")}
        assert len(test_drugs) == 1 and not (test_drugs & train_drugs)

    def test_cold_drug_infeasible_with_one_drug(self):
        ss = dti_samples(["d1"], ["p1", "p2"])
        with pytest.raises(ValueError, match="infeasible"):
            split_dataset(ss, SplitSpec(mode="cold_drug"))

    def test_cold_protein_disjoint(self):
        ss = dti_samples([f"d{i}" for i in range(3)], [f"p{i}" for i in range(10)])
        tagged = split_dataset(ss, SplitSpec(mode="cold_protein", seed=5))
        assert not (
            {s.b for s in tagged.subset("test")} & {s.b for s in tagged.subset("train")}
        )

    def test_cold_ddi_straddlers_dropped(self):
        task = TaskSpec("DDI")
        drugs = [f"d{i}" for i in range(6)]
        samples = [
            Sample(drugs[i], drugs[j], [1])
            for i in range(6)
            for j in range(i + 1, 6)
        ]
        tagged = split_dataset(SampleSet(task, samples), SplitSpec(mode="cold_drug", seed=2))
        test_ids = {e for s in tagged.subset("test") for e in (s.a, s.b)}
        train_ids = {e for s in tagged.subset("train") for e in (s.a, s.b)}
        assert not (test_ids & train_ids)
        assert None in tagged.tags  # some pairs straddle and are dropped

    def test_cold_cluster_tiles_grid_exactly_once(self):
        drugs = [f"d{i}" for i in range(6)]
        proteins = [f"p{i}" for i in range(6)]
        ss = dti_samples(drugs, proteins)
        folds = split_dataset(ss, SplitSpec(mode="cold_cluster", folds=9, seed=7))
        assert len(folds) == 9
        # Exhaustive oracle over the 36-pair grid.
        cover = {}
        for fold in folds:
            test = fold.subset("test")
            assert len(test) == 4  # 2x2 block
            test_drugs = {s.a for s in test}
            test_prots = {s.b for s in test}
            for s in fold.subset("train"):
                assert s.a not in test_drugs and s.b not in test_prots
            for s in test:
                cover[(s.a, s.b)] = cover.get((s.a, s.b), 0) + 1
        assert len(cover) == 36 and set(cover.values()) == {1}

    def test_cold_cluster_rejected_for_single_kind(self):
        task = TaskSpec("DDI")
        samples = [Sample("d0", "d1", [1]), Sample("d1", "d2", [0])]
        with pytest.raises(ValueError, match="distinct entity kinds"):
            split_dataset(SampleSet(task, samples), SplitSpec(mode="cold_cluster", folds=4))

    def test_precomputed_groups(self):
        task = TaskSpec("DP")
        samples = [Sample(f"d{i}", None, [i % 2]) for i in range(4)]
        ss = SampleSet(task, samples, groups=["train", "train", "valid", "test"])
        tagged = split_dataset(ss, SplitSpec(mode="precomputed"))
        assert tagged.tags == ["train", "train", "valid", "test"]

    def test_deterministic_under_seed(self):
        ss = dti_samples([f"d{i}" for i in range(8)], [f"p{i}" for i in range(5)])
        a = split_dataset(ss, SplitSpec(mode="warm", seed=11)).tags
        b = split_dataset(ss, SplitSpec(mode="warm", seed=11)).tags
        assert a == b

    def test_folds_must_be_perfect_square(self):
        with pytest.raises(ValueError, match="perfect-square"):
            SplitSpec(mode="cold_cluster", folds=8)


class TestSampleSetValidation:
    def test_duplicate_unordered_pair_rejected(self):
        task = TaskSpec("DDI")
        with pytest.raises(ValueError, match="duplicate pair"):
            SampleSet(task, [Sample("a", "b", [1]), Sample("b", "a", [0])])

    def test_arity_mismatch_rejected(self):
        with pytest.raises(ValueError, match="arity"):
            SampleSet(TaskSpec("PPI", 3), [Sample("p1", "p2", [1, 0])])

    def test_dp_must_not_have_b(self):
        with pytest.raises(ValueError, match="arity"):
            SampleSet(TaskSpec("DP"), [Sample("d1", "d2", [1])])

    def test_csv_roundtrip(self, tmp_path):
        task = TaskSpec("PPI", 2)
        ss = SampleSet(task, [Sample("p1", "p2", [1, 0]), Sample("p1", "p3", [0, 0])])
        save_samples(tmp_path / "s.csv", ss)
        loaded = load_samples(tmp_path / "s.csv", task)
        assert [(s.a, s.b, list(s.labels)) for s in loaded.samples] == [
            ("p1", "p2", [1, 0]),
            ("p1", "p3", [0, 0]),
        ]

    def test_csv_group_column(self, tmp_path):
        (tmp_path / "s.csv").write_text("a,b,label,group\nd1,,1,train\nd2,,0,test\n")
        loaded = load_samples(tmp_path / "s.csv", TaskSpec("DP"))
        assert loaded.groups == ["train", "test"]


class TestFilterLeakage:
    def build_world(self):
        entities = {}
        for i in range(3):
            entities[f"d{i}"] = EntityRecord(
                f"d{i}", "drug", MolecularGraph([6], []), kg_id=f"kg:d{i}"
            )
            entities[f"p{i}"] = EntityRecord(
                f"p{i}", "protein", ProteinSequence("MK"), kg_id=f"kg:p{i}"
            )
        nodes = [e.kg_id for e in entities.values()]
        edges = [
            ("kg:d0", "binds", "kg:p0"),
            ("kg:d1", "binds", "kg:p1"),
            ("kg:d2", "binds", "kg:p2"),
            ("kg:d0", "assoc", "kg:d1"),
        ]
        kg = KnowledgeGraph(nodes, edges)
        task = TaskSpec("DTI")
        samples = SampleSet(
            task,
            [Sample("d0", "p0", [1]), Sample("d1", "p1", [1]), Sample("d2", "p2", [0])],
            tags=["test", "train", "valid"],
        )
        return entities, kg, samples

    def test_test_pair_edge_removed_train_retained(self):
        entities, kg, samples = self.build_world()
        filtered = filter_leakage(kg, samples, entities)
        remaining = {(h, t) for h, _, t in filtered.edges}
        assert ("kg:d0", "kg:p0") not in remaining  # test pair
        assert ("kg:d2", "kg:p2") not in remaining  # valid pair, treated like test
        assert ("kg:d1", "kg:p1") in remaining  # train pair retained
        assert ("kg:d0", "kg:d1") in remaining  # not a sample pair at all

    def test_idempotent(self):
        entities, kg, samples = self.build_world()
        once = filter_leakage(kg, samples, entities)
        twice = filter_leakage(once, samples, entities)
        assert once.edges == twice.edges

    def test_reembedding_differs_after_removal(self):
        entities, kg, samples = self.build_world()
        filtered = filter_leakage(kg, samples, entities)
        config = ProneConfig(dim=2, seed=0)
        before = embed_graph(kg, config).values
        after = embed_graph(filtered, config).values
        assert not np.array_equal(before, after)

    def test_requires_tags(self):
        entities, kg, samples = self.build_world()
        untagged = samples.with_tags([None, None, None])
        with pytest.raises(ValueError, match="tags"):
            filter_leakage(kg, untagged, entities)


class TestGenSynthetic:
    def test_same_seed_same_hash(self):
        config = SyntheticWorldConfig(num_drugs=12, num_proteins=8, num_samples=30)
        a = gen_synthetic(config, seed=5)
        b = gen_synthetic(config, seed=5)
        assert a.content_hash() == b.content_hash()
        c = gen_synthetic(config, seed=6)
        assert a.content_hash() != c.content_hash()

    def test_missing_ratio_floor(self):
        config = SyntheticWorldConfig(
            num_drugs=200, num_proteins=100, num_samples=50, missing_sk_ratio=0.3
        )
        world = gen_synthetic(config, seed=1)
        unlinked_drugs = sum(
            1 for e in world.entities.values() if e.kind == "drug" and e.kg_id is None
        )
        unlinked_prots = sum(
            1 for e in world.entities.values() if e.kind == "protein" and e.kg_id is None
        )
        assert unlinked_drugs == 60 and unlinked_prots == 30

    def test_write_and_reload(self, tmp_path):
        config = SyntheticWorldConfig(num_drugs=6, num_proteins=5, num_samples=12)
        world = gen_synthetic(config, seed=2)
        world.write(tmp_path)
        entities, _ = load_entities(tmp_path / "drugs.jsonl", tmp_path / "proteins.jsonl")
        assert set(entities) == set(world.entities)
        kg = KnowledgeGraph.from_files(tmp_path / "kg_edges.tsv", tmp_path / "kg_entities.txt")
        assert kg.edges == world.kg.edges
        loaded = load_samples(tmp_path / "samples.csv", world.samples.task)
        assert len(loaded) == 12

    def test_kg_dominant_world_probe_oracle(self):
        # With w_kg=1 and w_struct=w_text=0 a logistic probe on hadamard
        # KG-embedding features must rank pairs well while structure
        # histograms stay near chance. Thresholds derived over 3 seeds.
        from sklearn.linear_model import LogisticRegression

        kg_scores, struct_scores = [], []
        for seed in (0, 1, 2):
            config = SyntheticWorldConfig(
                num_drugs=40,
                num_proteins=30,
                num_samples=400,
                w_kg=1.0,
                w_struct=0.0,
                w_text=0.0,
            )
            world = gen_synthetic(config, seed=seed)
            emb = embed_graph(world.kg, ProneConfig(dim=16, seed=seed))

            def kg_feat(s):
                return emb.row(world.entities[s.a].kg_id) * emb.row(
                    world.entities[s.b].kg_id
                )

            def struct_feat(s):
                da = np.bincount(world.entities[s.a].structure.atoms, minlength=64)
                sb = world.entities[s.b].structure.residues
                pb = np.bincount([ord(c) - 65 for c in sb], minlength=26)
                return np.concatenate([da, pb]).astype(float)

            labels = np.array([s.labels[0] for s in world.samples.samples])
            rng = np.random.default_rng(seed)
            order = rng.permutation(len(labels))
            cut = int(0.7 * len(labels))
            train, test = order[:cut], order[cut:]
            for feat_fn, scores in ((kg_feat, kg_scores), (struct_feat, struct_scores)):
                feats = np.array([feat_fn(s) for s in world.samples.samples])
                clf = LogisticRegression(max_iter=2000).fit(feats[train], labels[train])
                prob = clf.predict_proba(feats[test])[:, 1]
                scores.append(auroc(prob, labels[test]))
        assert np.mean(kg_scores) > 0.85
        assert np.mean(struct_scores) < 0.65

    def test_dp_world(self):
        config = SyntheticWorldConfig(task="DP", num_drugs=20, num_proteins=1, num_samples=20)
        world = gen_synthetic(config, seed=3)
        assert all(s.b is None for s in world.samples.samples)
        labels = [int(s.labels[0]) for s in world.samples.samples]
        assert 0 < sum(labels) < len(labels)

    def test_ppi_world_arity(self):
        config = SyntheticWorldConfig(
            task="PPI", label_arity=3, num_drugs=1, num_proteins=15, num_samples=40
        )
        world = gen_synthetic(config, seed=4)
        assert all(len(s.labels) == 3 for s in world.samples.samples)
