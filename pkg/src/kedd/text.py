"""Text encoder for unstructured knowledge: a small transformer whose [CLS]
state summarizes one document or a [SEP]-joined pair of documents."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .autodiff import apply, constant
from .nn import Dropout, Embedding, LayerNorm, Linear, Module

__all__ = [
    "PAD",
    "UNK",
    "CLS",
    "SEP",
    "MASKTOK",
    "NUM_RESERVED",
    "Vocabulary",
    "TextDocument",
    "TransformerConfig",
    "tokenize",
    "truncate_pair",
    "build_sequence",
    "TextEncoder",
    "UkHead",
]

PAD, UNK, CLS, SEP, MASKTOK = 0, 1, 2, 3, 4
NUM_RESERVED = 5
_RESERVED_NAMES = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASKTOK]"]
_WORD_RE = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Token table with five fixed reserved ids at the front."""

    def __init__(self, tokens=()):
        self.id_to_token = list(_RESERVED_NAMES)
        self.token_to_id = {}
        for tok in tokens:
            if tok in self.token_to_id:
                raise ValueError(f"duplicate token {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)

    def __len__(self):
        return len(self.id_to_token)

    def lookup(self, token):
        return self.token_to_id.get(token, UNK)

    @classmethod
    def build(cls, corpus, min_freq=2):
        """Corpus-driven vocabulary: words kept at min frequency, ordered by
        descending count then alphabetically for determinism."""
        counts = Counter()
        for raw in corpus:
            counts.update(_WORD_RE.findall(raw.lower()))
        kept = sorted(
            (tok for tok, c in counts.items() if c >= min_freq),
            key=lambda tok: (-counts[tok], tok),
        )
        return cls(kept)

    def save(self, path):
        """One non-reserved token per line; line number = id - reserved count."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token[NUM_RESERVED:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls([ln.rstrip("\n") for ln in fh if ln.rstrip("\n")])


@dataclass
class TextDocument:
    raw: str
    tokens: list

    def __post_init__(self):
        for t in self.tokens:
            if t < NUM_RESERVED:
                raise ValueError("documents must not contain reserved token ids")


def tokenize(raw, vocab):
    """Lowercase, split on whitespace/punctuation boundaries, map OOV to UNK."""
    words = _WORD_RE.findall(raw.lower())
    ids = []
    for w in words:
        tid = vocab.lookup(w)
        ids.append(tid if tid >= NUM_RESERVED else UNK)
    # The UNK id is reserved, so bypass the TextDocument reserved-id guard by
    # construction: UNK entries are the one reserved id allowed in content.
    doc = TextDocument.__new__(TextDocument)
    doc.raw = raw
    doc.tokens = ids
    return doc


@dataclass
class TransformerConfig:
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    ff_dim: int = 256
    max_tokens: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )


def truncate_pair(tokens_a, tokens_b, max_tokens):
    """Fit both documents plus markers into max_tokens, trimming the second
    document first, then the first. Returns the trimmed lists and a count of
    dropped tokens."""
    overhead = 2 if tokens_b is None else 3  # [CLS] ... [SEP] (... [SEP])
    budget = max(max_tokens - overhead, 0)
    a = list(tokens_a)
    b = None if tokens_b is None else list(tokens_b)
    dropped = 0
    if b is not None:
        over = len(a) + len(b) - budget
        if over > 0:
            cut = min(over, len(b))
            b = b[: len(b) - cut]
            dropped += cut
    limit = budget if b is None else budget - len(b)
    if len(a) > limit:
        dropped += len(a) - limit
        a = a[:limit]
    return a, b, dropped


def build_sequence(doc_a, doc_b, max_tokens):
    """[CLS] a [SEP] for one document, [CLS] a [SEP] b [SEP] for a pair."""
    tokens_b = None if doc_b is None else doc_b.tokens
    a, b, dropped = truncate_pair(doc_a.tokens, tokens_b, max_tokens)
    ids = [CLS] + a + [SEP]
    if b is not None:
        ids += b + [SEP]
    return np.array(ids, dtype=np.int64), dropped


class _AttentionBlock(Module):
    def __init__(self, config, rng):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.model_dim // config.heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.norm_attn = LayerNorm(config.model_dim)
        self.norm_ff = LayerNorm(config.model_dim)
        for h in range(config.heads):
            setattr(self, f"q{h}", Linear(config.model_dim, self.head_dim, rng, bias=False))
            setattr(self, f"k{h}", Linear(config.model_dim, self.head_dim, rng, bias=False))
            setattr(self, f"v{h}", Linear(config.model_dim, self.head_dim, rng, bias=False))
        self.out = Linear(config.model_dim, config.model_dim, rng)
        self.ff1 = Linear(config.model_dim, config.ff_dim, rng)
        self.ff2 = Linear(config.ff_dim, config.model_dim, rng)
        self.drop = Dropout(config.dropout)

    def __call__(self, x, pad_mask, rng, collect_attention=None):
        h = self.norm_attn(x)
        contexts = []
        for i in range(self.heads):
            q = getattr(self, f"q{i}")(h)
            k = getattr(self, f"k{i}")(h)
            v = getattr(self, f"v{i}")(h)
            scores = apply("mul", [apply("matmul", [q, apply("transpose", [k])]), constant(self.scale)])
            if pad_mask.any():
                scores = apply(
                    "masked_fill",
                    [scores],
                    {"mask": pad_mask[None, :], "value": -np.inf},
                )
            weights = apply("softmax_lastdim", [scores])
            if collect_attention is not None:
                collect_attention.append(weights.values.copy())
            contexts.append(apply("matmul", [weights, v]))
        merged = self.out(apply("concat", contexts, {"axis": 1}))
        x = apply("add", [x, self.drop(merged, rng)])
        f = self.ff2(apply("gelu", [self.ff1(self.norm_ff(x))]))
        return apply("add", [x, self.drop(f, rng)])


class TextEncoder(Module):
    """Pre-norm transformer over token + learned positional embeddings."""

    def __init__(self, config, vocab_size, rng):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        self.token_embedding = Embedding(vocab_size, config.model_dim, rng)
        self.position_embedding = Embedding(config.max_tokens, config.model_dim, rng)
        for i in range(config.layers):
            setattr(self, f"block{i}", _AttentionBlock(config, rng))
        self.final_norm = LayerNorm(config.model_dim)
        self.truncated_tokens = 0

    def encode(self, doc_a, doc_b=None, rng=None, collect_attention=None):
        """Final-layer hidden state at the [CLS] position."""
        ids, dropped = build_sequence(doc_a, doc_b, self.config.max_tokens)
        self.truncated_tokens += dropped
        return self.encode_ids(ids, rng=rng, collect_attention=collect_attention)

    def encode_ids(self, ids, rng=None, collect_attention=None):
        length = len(ids)
        pad_mask = np.asarray(ids) == PAD
        x = apply(
            "add",
            [self.token_embedding(ids), self.position_embedding(np.arange(length))],
        )
        for i in range(self.config.layers):
            x = getattr(self, f"block{i}")(x, pad_mask, rng, collect_attention)
        x = self.final_norm(x)
        selector = np.zeros(length)
        selector[0] = 1.0
        return apply("matmul", [constant(selector), x])

    @property
    def output_dim(self):
        return self.config.model_dim


class UkHead(Module):
    """Linear map with dropout from the [CLS] state to the text feature."""

    def __init__(self, model_dim, out_dim, dropout_rate, rng):
        super().__init__()
        self.project = Linear(model_dim, out_dim, rng)
        self.drop = Dropout(dropout_rate)

    def __call__(self, cls_vec, rng=None):
        return self.drop(self.project(cls_vec), rng)
