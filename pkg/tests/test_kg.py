"""Spectral embedding tests against dense linear-algebra oracles."""

import numpy as np
import pytest
from scipy import sparse

from kedd.kg import (
    EmbeddingMatrix,
    KnowledgeGraph,
    ProneConfig,
    band_pass_modulator,
    build_sparse_matrices,
    chebyshev_apply,
    chebyshev_coefficients,
    embed_graph,
    factorize_tsvd,
    load_embedding,
    log_ratio_matrix,
    save_embedding,
    spectral_propagate,
    truncated_svd,
)


def random_graph(rng, n, p=0.35, prefix="e"):
    ids = [f"{prefix}{i}" for i in range(n)]
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.append((ids[i], "r0", ids[j]))
    # chain fallback keeps every node connected
    for i in range(n - 1):
        edges.append((ids[i], "r1", ids[i + 1]))
    return KnowledgeGraph(ids, edges)


def dense_filter_oracle(kg, base_values, config):
    """Exact band-pass filtering through a dense eigendecomposition."""
    transition, laplacian, _ = build_sparse_matrices(kg)
    rescaled = laplacian.toarray() - np.eye(kg.num_entities)
    lam, vecs = np.linalg.eigh(rescaled)
    g = band_pass_modulator(config.filter_center, config.filter_sharpness)
    filtered = vecs @ np.diag(g(lam)) @ vecs.T @ base_values
    propagated = transition.toarray() @ filtered
    centered = propagated - propagated.mean(axis=0, keepdims=True)
    return centered / np.maximum(centered.std(axis=0, keepdims=True), 1e-12)


class TestSparseMatrices:
    def test_single_edge_transition(self):
        kg = KnowledgeGraph(["a", "b"], [("a", "binds", "b")])
        transition, _, degrees = build_sparse_matrices(kg)
        np.testing.assert_array_equal(transition.toarray(), [[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(degrees, [1.0, 1.0])

    def test_triangle_rows(self):
        ids = ["a", "b", "c"]
        kg = KnowledgeGraph(ids, [("a", "r", "b"), ("b", "r", "c"), ("a", "r", "c")])
        transition, _, _ = build_sparse_matrices(kg)
        dense = transition.toarray()
        np.testing.assert_allclose(np.sort(dense, axis=1), [[0.0, 0.5, 0.5]] * 3)

    def test_laplacian_spectrum(self):
        kg = random_graph(np.random.default_rng(5), 8)
        _, laplacian, _ = build_sparse_matrices(kg)
        eigs = np.linalg.eigvalsh(laplacian.toarray())
        assert eigs.min() > -1e-10 and eigs.max() < 2 + 1e-10
        assert abs(eigs.min()) < 1e-10

    def test_rows_normalized(self):
        kg = random_graph(np.random.default_rng(6), 10)
        transition, _, _ = build_sparse_matrices(kg)
        np.testing.assert_allclose(
            np.asarray(transition.sum(axis=1)).reshape(-1), 1.0, atol=1e-12
        )

    def test_isolated_nodes_get_self_loop(self):
        kg = KnowledgeGraph(["a", "b", "lone"], [("a", "r", "b")])
        transition, _, degrees = build_sparse_matrices(kg)
        assert degrees[2] == 1.0
        assert transition[2, 2] == 1.0

    def test_empty_graph_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_sparse_matrices(KnowledgeGraph([], []))

    def test_multiplicity_becomes_weight(self):
        kg = KnowledgeGraph(
            ["a", "b", "c"],
            [("a", "r0", "b"), ("b", "r1", "a"), ("a", "r0", "c")],
        )
        adj = kg.adjacency().toarray()
        assert adj[0, 1] == 2.0 and adj[0, 2] == 1.0


class TestTruncatedSvd:
    def test_full_rank_exact(self):
        kg = random_graph(np.random.default_rng(1), 4)
        m = log_ratio_matrix(kg, 1.0)
        u, s, vt = truncated_svd(m, 4, rng=np.random.default_rng(0))
        np.testing.assert_allclose(
            np.linalg.norm(m.toarray() - (u * s) @ vt), 0.0, atol=1e-8
        )

    def test_rank2_matches_best_rank2(self):
        rng = np.random.default_rng(2)
        m = np.abs(rng.standard_normal((6, 2))) @ np.abs(rng.standard_normal((2, 6)))
        u, s, vt = truncated_svd(sparse.csr_matrix(m), 2, rng=rng)
        ours = np.linalg.norm(m - (u * s) @ vt)
        du, ds, dvt = np.linalg.svd(m)
        best = np.linalg.norm(m - (du[:, :2] * ds[:2]) @ dvt[:2])
        assert abs(ours - best) < 1e-6

    def test_isomorphic_components_have_matching_row_norms(self):
        rng = np.random.default_rng(3)
        half = random_graph(rng, 5, prefix="x")
        mirrored = [(h.replace("x", "y"), r, t.replace("x", "y")) for h, r, t in half.edges]
        kg = KnowledgeGraph(
            half.entity_ids + [e.replace("x", "y") for e in half.entity_ids],
            half.edges + mirrored,
        )
        # Full-rank factorization: row norms equal diag((M M^T)^(1/2)), which
        # is invariant under the component-swap symmetry.
        emb = factorize_tsvd(kg, ProneConfig(dim=10, seed=4))
        norms = np.linalg.norm(emb.values, axis=1)
        np.testing.assert_allclose(
            np.sort(norms[:5]), np.sort(norms[5:]), atol=1e-6
        )

    def test_dim_larger_than_graph_rejected(self):
        kg = KnowledgeGraph(["a", "b"], [("a", "r", "b")])
        with pytest.raises(ValueError, match="exceeds"):
            factorize_tsvd(kg, ProneConfig(dim=3))


class TestSpectralPropagate:
    def test_identity_modulator_is_neighbor_average(self):
        kg = KnowledgeGraph(["a", "b"], [("a", "r", "b")])
        transition, laplacian, _ = build_sparse_matrices(kg)
        rescaled = laplacian - sparse.identity(2)
        r = np.array([[1.0], [2.0]])
        filtered = chebyshev_apply(rescaled, np.array([1.0]), r)
        np.testing.assert_array_equal(filtered, r)
        np.testing.assert_array_equal(transition @ filtered, [[2.0], [1.0]])

    def test_chebyshev_matches_dense_oracle(self):
        rng = np.random.default_rng(11)
        kg = random_graph(rng, 8)
        config = ProneConfig(dim=4, seed=7)
        base = factorize_tsvd(kg, config)
        ours = spectral_propagate(base, kg, config).values
        oracle = dense_filter_oracle(kg, base.values, config)
        rel = np.linalg.norm(ours - oracle) / np.linalg.norm(oracle)
        assert rel < 1e-3

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        kg = random_graph(rng, 7)
        config = ProneConfig(dim=3, seed=1)
        base = factorize_tsvd(kg, config)
        out = spectral_propagate(base, kg, config).values

        perm = rng.permutation(7)
        kg_p = KnowledgeGraph(
            [kg.entity_ids[i] for i in perm],
            kg.edges,
        )
        base_p = EmbeddingMatrix(base.values[perm], [kg.entity_ids[i] for i in perm])
        out_p = spectral_propagate(base_p, kg_p, config).values
        np.testing.assert_allclose(out_p, out[perm], atol=1e-9)

    def test_row_count_mismatch_rejected(self):
        kg = KnowledgeGraph(["a", "b"], [("a", "r", "b")])
        bad = EmbeddingMatrix(np.zeros((3, 2)), ["a", "b", "c"])
        with pytest.raises(ValueError, match="match"):
            spectral_propagate(bad, kg, ProneConfig(dim=2))


class TestEmbedGraph:
    def test_same_seed_bit_identical(self):
        kg = random_graph(np.random.default_rng(17), 9)
        config = ProneConfig(dim=4, seed=21)
        a = embed_graph(kg, config)
        b = embed_graph(kg, config)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.frozen

    def test_output_shape(self):
        kg = random_graph(np.random.default_rng(19), 70, p=0.1)
        emb = embed_graph(kg, ProneConfig(dim=64, seed=0))
        assert emb.values.shape == (70, 64)

    def test_two_cluster_cosine_structure(self):
        rng = np.random.default_rng(23)
        ids = [f"n{i}" for i in range(16)]
        edges = []
        for block in (range(8), range(8, 16)):
            block = list(block)
            for i in block:
                for j in block:
                    if i < j and rng.random() < 0.8:
                        edges.append((ids[i], "r", ids[j]))
        edges.append((ids[0], "r", ids[8]))  # single bridge
        kg = KnowledgeGraph(ids, edges)
        emb = embed_graph(kg, ProneConfig(dim=4, seed=3))
        unit = emb.values / np.linalg.norm(emb.values, axis=1, keepdims=True)
        sims = unit @ unit.T
        intra, inter = [], []
        for i in range(16):
            for j in range(i + 1, 16):
                (intra if (i < 8) == (j < 8) else inter).append(sims[i, j])
        assert np.mean(intra) > np.mean(inter)

    def test_relation_labels_do_not_matter(self):
        rng = np.random.default_rng(29)
        kg = random_graph(rng, 8)
        relabeled = KnowledgeGraph(
            kg.entity_ids,
            [(h, f"rel{rng.integers(5)}", t) for h, _, t in kg.edges],
        )
        config = ProneConfig(dim=3, seed=5)
        np.testing.assert_array_equal(
            embed_graph(kg, config).values, embed_graph(relabeled, config).values
        )

    def test_finite_and_unit_variance(self):
        kg = random_graph(np.random.default_rng(31), 12)
        emb = embed_graph(kg, ProneConfig(dim=5, seed=9))
        assert np.isfinite(emb.values).all()
        var = emb.values.var(axis=0)
        assert np.all(var >= 0.5) and np.all(var <= 2.0)

    def test_edge_removal_changes_embedding(self):
        kg = random_graph(np.random.default_rng(37), 10)
        config = ProneConfig(dim=4, seed=2)
        before = embed_graph(kg, config)
        head, _, tail = kg.edges[0]
        after = embed_graph(kg.without_edges([(head, tail)]), config)
        assert not np.array_equal(before.values, after.values)


class TestEmbeddingIo:
    def test_roundtrip_bit_identical(self, tmp_path):
        kg = random_graph(np.random.default_rng(41), 6)
        config = ProneConfig(dim=3, seed=8)
        emb = embed_graph(kg, config)
        path = tmp_path / "emb.bin"
        save_embedding(path, emb, config, kg.content_hash())
        loaded = load_embedding(path)
        np.testing.assert_array_equal(loaded.values, emb.values)
        assert loaded.entity_ids == emb.entity_ids
        assert loaded.frozen

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_embedding(path)

    def test_tsv_roundtrip(self, tmp_path):
        kg = KnowledgeGraph(
            ["a", "b", "c"], [("a", "binds", "b"), ("c", "assoc", "a")]
        )
        kg.save(tmp_path / "edges.tsv", tmp_path / "entities.txt")
        loaded = KnowledgeGraph.from_files(
            tmp_path / "edges.tsv", tmp_path / "entities.txt"
        )
        assert loaded.entity_ids == kg.entity_ids
        assert loaded.edges == kg.edges

    def test_malformed_line_reports_number(self, tmp_path):
        bad = tmp_path / "edges.tsv"
        bad.write_text("a\tr\tb\nbroken line\n")
        with pytest.raises(ValueError, match=":2"):
            KnowledgeGraph.from_files(bad)
