"""Structure encoders: GIN over molecular graphs, multi-scale CNN over
protein sequences.

The GIN update is MLP((1 + eps) * h_v + sum_{u in N(v)} h_u) with bond
orders contributing one-hot edge features to the neighbor messages. The
protein encoder embeds residues and runs three convolutional branches of
distinct depths, each globally max-pooled, concatenated and projected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, apply, constant
from .nn import Embedding, LayerNorm, Linear, Module, Parameter, kaiming_uniform

__all__ = [
    "MolecularGraph",
    "ProteinSequence",
    "GinConfig",
    "McnnConfig",
    "gin_aggregate",
    "GinLayer",
    "GinEncoder",
    "Conv1d",
    "McnnEncoder",
    "AMINO_ACIDS",
]

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWYBXZUO"  # 20 standard + BXZUO
_RESIDUE_INDEX = {ch: i + 1 for i, ch in enumerate(AMINO_ACIDS)}  # 0 is padding
MAX_BOND_ORDER = 4  # 1, 2, 3, 4=aromatic
_ATOM_VOCAB = 128  # indexed directly by atomic number


@dataclass
class MolecularGraph:
    """Undirected molecular graph: atomic numbers plus typed bonds."""

    atoms: list
    bonds: list

    def __post_init__(self):
        if len(self.atoms) < 1:
            raise ValueError("molecular graph needs at least one atom")
        for a in self.atoms:
            if not 1 <= int(a) < _ATOM_VOCAB:
                raise ValueError(f"atomic number out of range: {a}")
        self.atoms = [int(a) for a in self.atoms]
        n = len(self.atoms)
        seen = set()
        cleaned = []
        for i, j, order in self.bonds:
            i, j, order = int(i), int(j), int(order)
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bond index out of range: ({i}, {j}) for {n} atoms")
            if i == j:
                raise ValueError(f"self loop on atom {i}")
            if not 1 <= order <= MAX_BOND_ORDER:
                raise ValueError(f"bond order must be 1..4, got {order}")
            key = (min(i, j), max(i, j))
            if key in seen:
                continue
            seen.add(key)
            cleaned.append((key[0], key[1], order))
        self.bonds = cleaned

    @property
    def num_atoms(self):
        return len(self.atoms)

    def adjacency(self):
        adj = np.zeros((self.num_atoms, self.num_atoms))
        for i, j, _ in self.bonds:
            adj[i, j] = 1.0
            adj[j, i] = 1.0
        return adj

    def bond_feature_sums(self, dim):
        """Per node, the summed one-hot bond-order features of incident
        edges, laid into the first min(4, dim) feature slots."""
        feats = np.zeros((self.num_atoms, dim))
        for i, j, order in self.bonds:
            slot = order - 1
            if slot < dim:
                feats[i, slot] += 1.0
                feats[j, slot] += 1.0
        return feats


@dataclass
class ProteinSequence:
    """Amino-acid sequence over the 25-letter alphabet."""

    residues: str

    def __post_init__(self):
        if len(self.residues) < 1:
            raise ValueError("protein sequence must be non-empty")
        for pos, ch in enumerate(self.residues, start=1):
            if ch not in _RESIDUE_INDEX:
                raise ValueError(f"invalid residue {ch!r} at position {pos}")

    @classmethod
    def from_raw(cls, raw, max_len=1024):
        """Validate and truncate from the right; reports whether truncation
        happened so ingestion can record it."""
        truncated = len(raw) > max_len
        return cls(raw[:max_len]), truncated

    @property
    def length(self):
        return len(self.residues)

    def token_ids(self):
        return np.array([_RESIDUE_INDEX[ch] for ch in self.residues], dtype=np.int64)


@dataclass
class GinConfig:
    num_layers: int = 5
    hidden_dim: int = 128
    readout: str = "mean"

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ValueError("num_layers and hidden_dim must be >= 1")
        if self.readout not in ("mean", "sum"):
            raise ValueError(f"unknown readout '{self.readout}'")


@dataclass
class McnnConfig:
    branch_depths: tuple = (2, 4, 6)
    channels: int = 64
    kernel_width: int = 7
    embedding_dim: int = 32
    output_dim: int = 128
    max_len: int = 1024

    def __post_init__(self):
        self.branch_depths = tuple(int(d) for d in self.branch_depths)
        if len(self.branch_depths) != 3 or len(set(self.branch_depths)) != 3:
            raise ValueError("need exactly 3 pairwise-distinct branch depths")
        if min(self.branch_depths) < 1:
            raise ValueError("branch depths must be >= 1")


def gin_aggregate(node_feats, graph, epsilon):
    """(1 + eps) * h_v + sum over neighbors of (h_u + bond one-hot)."""
    n, dim = node_feats.shape
    if n != graph.num_atoms:
        raise ValueError(f"{n} feature rows for {graph.num_atoms} atoms")
    neighbor = apply("matmul", [constant(graph.adjacency()), node_feats])
    scaled = apply("mul", [node_feats, apply("add", [epsilon, constant(1.0)])])
    merged = apply("add", [neighbor, scaled])
    return apply("add", [merged, constant(graph.bond_feature_sums(dim))])


class GinLayer(Module):
    """One GIN update; the MLP is linear-relu-linear-layernorm, or the
    identity when disabled (used to test the bare aggregation)."""

    def __init__(self, dim, rng, use_mlp=True):
        super().__init__()
        self.epsilon = Parameter(np.zeros(()), init_spec="zeros")
        self.use_mlp = use_mlp
        if use_mlp:
            self.lin1 = Linear(dim, dim, rng)
            self.lin2 = Linear(dim, dim, rng)
            self.norm = LayerNorm(dim)

    def __call__(self, node_feats, graph):
        agg = gin_aggregate(node_feats, graph, self.epsilon.tensor)
        if not self.use_mlp:
            return agg
        hidden = apply("relu", [self.lin1(agg)])
        return self.norm(self.lin2(hidden))


class GinEncoder(Module):
    """Stacked GIN layers with a permutation-invariant readout."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        self.atom_embedding = Embedding(_ATOM_VOCAB, config.hidden_dim, rng)
        for i in range(config.num_layers):
            setattr(self, f"layer{i}", GinLayer(config.hidden_dim, rng))

    def node_embeddings(self, graph):
        h = self.atom_embedding(graph.atoms)
        for i in range(self.config.num_layers):
            h = getattr(self, f"layer{i}")(h, graph)
        return h

    def encode(self, graph):
        h = self.node_embeddings(graph)
        n = graph.num_atoms
        weight = 1.0 / n if self.config.readout == "mean" else 1.0
        pooled = apply("matmul", [constant(np.full(n, weight)), h])
        return pooled

    @property
    def output_dim(self):
        return self.config.hidden_dim


class Conv1d(Module):
    """Fully padded 1-D convolution on (channels_in, length).

    Padding of kernel-1 keeps every partial-overlap window, so appending
    zero-embedded residues is indistinguishable from the implicit padding
    and max-pooled features stay fixed.
    """

    def __init__(self, c_in, c_out, kernel, rng):
        super().__init__()
        self.padding = kernel - 1
        self.weight = Parameter(
            kaiming_uniform(rng, c_in * kernel, (c_out, c_in, kernel)),
            init_spec=f"kaiming_uniform(fan_in={c_in * kernel})",
        )
        self.bias = Parameter(np.zeros((c_out, 1)), init_spec="zeros")

    def __call__(self, x):
        out = apply(
            "conv1d",
            [x, self.weight.tensor],
            {"stride": 1, "padding": self.padding},
        )
        return apply("add", [out, self.bias.tensor])


class _ConvBranch(Module):
    def __init__(self, depth, c_in, channels, kernel, rng):
        super().__init__()
        self.depth = depth
        for i in range(depth):
            setattr(self, f"conv{i}", Conv1d(c_in if i == 0 else channels, channels, kernel, rng))

    def __call__(self, x):
        for i in range(self.depth):
            x = apply("relu", [getattr(self, f"conv{i}")(x)])
        return apply("maxpool1d", [x], {"kernel": None})


class McnnEncoder(Module):
    """Three convolutional branches of distinct depths over embedded residues."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        self.residue_embedding = Embedding(len(AMINO_ACIDS) + 1, config.embedding_dim, rng)
        for b, depth in enumerate(config.branch_depths):
            setattr(
                self,
                f"branch{b}",
                _ConvBranch(depth, config.embedding_dim, config.channels, config.kernel_width, rng),
            )
        self.project = Linear(3 * config.channels, config.output_dim, rng)

    def encode(self, seq):
        embedded = self.residue_embedding(seq.token_ids())  # (L, emb)
        x = apply("transpose", [embedded])  # (emb, L)
        pooled = [getattr(self, f"branch{b}")(x) for b in range(3)]
        merged = apply("concat", pooled, {"axis": 0})
        return self.project(merged)

    @property
    def output_dim(self):
        return self.config.output_dim
