"""Knowledge-graph embeddings via two-stage spectral factorization.

Stage 1 factorizes a sparse log-ratio matrix with a randomized truncated
SVD. Stage 2 smooths the factors with a band-pass spectral filter of the
normalized graph Laplacian, evaluated through a Chebyshev series so only
sparse matrix products are needed. Relation types never enter the math:
the graph is treated as weighted undirected, with duplicate endpoint pairs
collapsed into edge multiplicities.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

__all__ = [
    "KnowledgeGraph",
    "EmbeddingMatrix",
    "ProneConfig",
    "build_sparse_matrices",
    "truncated_svd",
    "factorize_tsvd",
    "band_pass_modulator",
    "chebyshev_coefficients",
    "chebyshev_apply",
    "spectral_propagate",
    "embed_graph",
    "save_embedding",
    "load_embedding",
]

_MAGIC = b"KGEMAT01"


class KnowledgeGraph:
    """Entity index plus a typed edge list, embedded as weighted undirected."""

    def __init__(self, entity_ids, edges):
        self.entity_ids = list(entity_ids)
        if len(set(self.entity_ids)) != len(self.entity_ids):
            raise ValueError("duplicate entity ids")
        self.index = {e: i for i, e in enumerate(self.entity_ids)}
        self.edges = []
        for head, rel, tail in edges:
            if head not in self.index or tail not in self.index:
                raise ValueError(f"edge endpoint not in entity list: ({head}, {tail})")
            self.edges.append((head, str(rel), tail))

    @property
    def num_entities(self):
        return len(self.entity_ids)

    @classmethod
    def from_files(cls, edges_path, entities_path=None):
        """Load from a head<TAB>relation<TAB>tail TSV, with an optional
        sidecar file fixing entity order (one id per line)."""
        edges = []
        with open(edges_path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{edges_path}:{lineno}: expected 3 tab-separated fields")
                edges.append((parts[0], parts[1], parts[2]))
        if entities_path is not None:
            with open(entities_path, "r", encoding="utf-8") as fh:
                entity_ids = [ln.rstrip("\n") for ln in fh if ln.rstrip("\n")]
        else:
            entity_ids = sorted({e[0] for e in edges} | {e[2] for e in edges})
        return cls(entity_ids, edges)

    def save(self, edges_path, entities_path):
        with open(entities_path, "w", encoding="utf-8") as fh:
            for e in self.entity_ids:
                fh.write(e + "\n")
        with open(edges_path, "w", encoding="utf-8") as fh:
            for head, rel, tail in self.edges:
                fh.write(f"{head}\t{rel}\t{tail}\n")

    def weighted_pairs(self):
        """Collapsed undirected (i, j, weight) with i <= j; weight = multiplicity."""
        counts = {}
        for head, _, tail in self.edges:
            i, j = self.index[head], self.index[tail]
            key = (i, j) if i <= j else (j, i)
            counts[key] = counts.get(key, 0) + 1
        return sorted((i, j, w) for (i, j), w in counts.items())

    def adjacency(self):
        """Symmetric weighted adjacency; isolated nodes get a unit self-loop
        so row normalization stays defined."""
        n = self.num_entities
        if n == 0:
            raise ValueError("empty graph")
        rows, cols, vals = [], [], []
        for i, j, w in self.weighted_pairs():
            if i == j:
                rows.append(i)
                cols.append(j)
                vals.append(float(w))
            else:
                rows.extend((i, j))
                cols.extend((j, i))
                vals.extend((float(w), float(w)))
        adj = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        degrees = np.asarray(adj.sum(axis=1)).reshape(-1)
        isolated = np.nonzero(degrees == 0)[0]
        if isolated.size:
            loop = sparse.csr_matrix(
                (np.ones(isolated.size), (isolated, isolated)), shape=(n, n)
            )
            adj = (adj + loop).tocsr()
        return adj

    def without_edges(self, pairs):
        """Copy with every edge between the given unordered id pairs removed."""
        banned = {frozenset(p) for p in pairs}
        kept = [
            e for e in self.edges if frozenset((e[0], e[2])) not in banned
        ]
        return KnowledgeGraph(self.entity_ids, kept)

    def content_hash(self):
        payload = json.dumps(
            {"entities": self.entity_ids, "edges": sorted(self.edges)},
            sort_keys=True,
        ).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass
class ProneConfig:
    """Both embedding stages; all internals are deterministic under seed."""

    dim: int = 64
    negative_shift: float = 1.0  # lambda in the log-ratio matrix
    filter_center: float = 0.2  # mu of the band-pass modulator
    filter_sharpness: float = 0.5  # theta of the band-pass modulator
    chebyshev_order: int = 10
    tsvd_oversampling: int = 10
    tsvd_power_iters: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.chebyshev_order < 0:
            raise ValueError("chebyshev_order must be >= 0")
        if self.negative_shift <= 0:
            raise ValueError("negative_shift must be positive")

    def to_dict(self):
        return {
            "dim": self.dim,
            "negative_shift": self.negative_shift,
            "filter_center": self.filter_center,
            "filter_sharpness": self.filter_sharpness,
            "chebyshev_order": self.chebyshev_order,
            "tsvd_oversampling": self.tsvd_oversampling,
            "tsvd_power_iters": self.tsvd_power_iters,
            "seed": self.seed,
        }


@dataclass
class EmbeddingMatrix:
    """One row per KG entity; frozen matrices never receive gradients."""

    values: np.ndarray
    entity_ids: list = field(default_factory=list)
    frozen: bool = False

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if not np.isfinite(self.values).all():
            raise ValueError("embedding matrix contains non-finite values")
        if self.entity_ids and len(self.entity_ids) != self.values.shape[0]:
            raise ValueError("row count does not match entity count")
        self._index = {e: i for i, e in enumerate(self.entity_ids)}

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def row(self, entity_id):
        return self.values[self._index[entity_id]]

    def row_index(self, entity_id):
        return self._index[entity_id]


def build_sparse_matrices(kg):
    """Row-normalized transition matrix, symmetric normalized Laplacian
    (eigenvalues in [0, 2]), and the degree vector."""
    adj = kg.adjacency()
    degrees = np.asarray(adj.sum(axis=1)).reshape(-1)
    inv_deg = sparse.diags(1.0 / degrees)
    transition = (inv_deg @ adj).tocsr()
    inv_sqrt = sparse.diags(1.0 / np.sqrt(degrees))
    laplacian = (sparse.identity(kg.num_entities) - inv_sqrt @ adj @ inv_sqrt).tocsr()
    return transition, laplacian, degrees


def truncated_svd(matrix, rank, oversampling=10, power_iters=5, rng=None):
    """Randomized truncated SVD with subspace (power) iterations.

    Returns (U, S, Vt) with U of shape (n_rows, rank). Exact up to roundoff
    whenever rank + oversampling covers the matrix rank.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n_rows, n_cols = matrix.shape
    if rank < 1 or rank > min(n_rows, n_cols):
        raise ValueError(f"rank {rank} out of range for shape {matrix.shape}")
    probe = min(rank + oversampling, n_cols)
    sample = rng.standard_normal((n_cols, probe))
    basis, _ = np.linalg.qr(matrix @ sample)
    for _ in range(power_iters):
        co_basis, _ = np.linalg.qr(matrix.T @ basis)
        basis, _ = np.linalg.qr(matrix @ co_basis)
    small = basis.T @ matrix
    if sparse.issparse(small):
        small = small.toarray()
    u_small, s, vt = np.linalg.svd(np.asarray(small), full_matrices=False)
    u = basis @ u_small
    return u[:, :rank], s[:rank], vt[:rank]


def log_ratio_matrix(kg, negative_shift):
    """Sparse M with M_ij = max(0, ln p_ij - ln(lambda * d_j / vol)) on the
    nonzeros of the adjacency."""
    transition, _, degrees = build_sparse_matrices(kg)
    coo = transition.tocoo()
    volume = degrees.sum()
    shifted = np.log(coo.data) - np.log(negative_shift * degrees[coo.col] / volume)
    vals = np.maximum(0.0, shifted)
    return sparse.csr_matrix(
        (vals, (coo.row, coo.col)), shape=transition.shape
    )


def factorize_tsvd(kg, config):
    """Stage 1: rank-d factorization of the log-ratio matrix; rows are
    U_d * sqrt(S_d)."""
    if config.dim > kg.num_entities:
        raise ValueError(
            f"dim {config.dim} exceeds entity count {kg.num_entities}"
        )
    matrix = log_ratio_matrix(kg, config.negative_shift)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 0x7501)))
    u, s, _ = truncated_svd(
        matrix,
        config.dim,
        oversampling=config.tsvd_oversampling,
        power_iters=config.tsvd_power_iters,
        rng=rng,
    )
    return EmbeddingMatrix(u * np.sqrt(s), list(kg.entity_ids), frozen=False)


def band_pass_modulator(center, sharpness):
    """g(x) = exp(-((x - mu)^2 - 1) * theta / 2) on the rescaled spectrum
    [-1, 1] of (L - I)."""

    def g(x):
        return np.exp(-0.5 * ((x - center) ** 2 - 1.0) * sharpness)

    return g


def chebyshev_coefficients(fn, order, quad_nodes=1024):
    """Project fn onto Chebyshev polynomials T_0..T_order over [-1, 1] by
    Gauss-Chebyshev quadrature."""
    theta = np.pi * (np.arange(quad_nodes) + 0.5) / quad_nodes
    samples = fn(np.cos(theta))
    coeffs = np.empty(order + 1)
    for j in range(order + 1):
        scale = (1.0 if j == 0 else 2.0) / quad_nodes
        coeffs[j] = scale * np.sum(samples * np.cos(j * theta))
    return coeffs


def chebyshev_apply(operator, coeffs, matrix):
    """Sum_j c_j T_j(operator) @ matrix via the three-term recurrence."""
    t_prev = matrix
    acc = coeffs[0] * t_prev
    if len(coeffs) == 1:
        return acc
    t_curr = operator @ matrix
    acc = acc + coeffs[1] * t_curr
    for c in coeffs[2:]:
        t_next = 2.0 * (operator @ t_curr) - t_prev
        acc = acc + c * t_next
        t_prev, t_curr = t_curr, t_next
    return acc


def spectral_propagate(base, kg, config):
    """Stage 2: filter the factors with the band-pass modulator of the
    rescaled Laplacian, average over neighbors, then standardize per
    dimension (zero mean, unit variance)."""
    if base.rows != kg.num_entities:
        raise ValueError(
            f"embedding rows {base.rows} do not match entity count {kg.num_entities}"
        )
    transition, laplacian, _ = build_sparse_matrices(kg)
    rescaled = (laplacian - sparse.identity(kg.num_entities)).tocsr()
    g = band_pass_modulator(config.filter_center, config.filter_sharpness)
    coeffs = chebyshev_coefficients(g, config.chebyshev_order)
    filtered = chebyshev_apply(rescaled, coeffs, base.values)
    propagated = transition @ filtered
    centered = propagated - propagated.mean(axis=0, keepdims=True)
    std = centered.std(axis=0, keepdims=True)
    normalized = centered / np.maximum(std, 1e-12)
    return EmbeddingMatrix(normalized, list(base.entity_ids), frozen=base.frozen)


def embed_graph(kg, config):
    """Full pipeline: factorize, propagate, freeze. Deterministic under seed."""
    base = factorize_tsvd(kg, config)
    out = spectral_propagate(base, kg, config)
    out.frozen = True
    return out


def save_embedding(path, emb, config, graph_hash):
    """Binary layout: 8-byte magic, u64 rows, u64 dim, row-major little-endian
    float64. A JSON manifest with config, seed and graph hash sits alongside."""
    payload = struct.pack("<8sQQ", _MAGIC, emb.rows, emb.dim)
    payload += emb.values.astype("<f8").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(payload)
    manifest = {
        "format": _MAGIC.decode("ascii"),
        "rows": emb.rows,
        "dim": emb.dim,
        "config": config.to_dict(),
        "seed": config.seed,
        "graph_hash": graph_hash,
        "entity_ids": emb.entity_ids,
    }
    with open(str(path) + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_embedding(path):
    with open(path, "rb") as fh:
        header = fh.read(24)
        magic, rows, dim = struct.unpack("<8sQQ", header)
        if magic != _MAGIC:
            raise ValueError(f"bad magic in {path}")
        data = np.frombuffer(fh.read(rows * dim * 8), dtype="<f8").reshape(rows, dim)
    entity_ids = []
    try:
        with open(str(path) + ".manifest.json", "r", encoding="utf-8") as fh:
            entity_ids = json.load(fh).get("entity_ids", [])
    except FileNotFoundError:
        pass
    return EmbeddingMatrix(data.copy(), entity_ids, frozen=True)
