"""Multimodal fusion: structure, knowledge-graph, and text features joined
for the four prediction tasks.

Molecules missing a KG link get their structured-knowledge vector
reconstructed by multi-head top-k sparse attention over the frozen
embedding matrix: queries are projected structure features, keys are
linearly mapped embedding rows, and values are the raw rows themselves, so
every head's output is a convex combination of at most k embedding rows.
Modality masking randomly reroutes linked molecules through the same path
during training to widen its supervision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, apply, constant
from .data import AblationFlags, TaskSpec
from .nn import Dropout, Linear, Module, RngPool
from .structure import GinConfig, GinEncoder, McnnConfig, McnnEncoder
from .text import TextEncoder, TransformerConfig, UkHead, tokenize

__all__ = [
    "SparseAttentionConfig",
    "ModalityBundle",
    "AttentionResult",
    "topk_sparse_softmax",
    "SparseAttention",
    "mask_modality",
    "SkHead",
    "FusionMlp",
    "ModelConfig",
    "KeddModel",
]


@dataclass
class SparseAttentionConfig:
    heads: int = 4
    k: int = 16
    query_dim: int = 64  # dimension of the projected structure query
    combine: str = "mean"

    def __post_init__(self):
        if self.k < 1 or self.heads < 1:
            raise ValueError("k and heads must be >= 1")
        if self.query_dim % self.heads != 0:
            raise ValueError(
                f"query_dim {self.query_dim} not divisible by heads {self.heads}"
            )
        if self.combine != "mean":
            raise ValueError("only mean head combination is supported")

    @property
    def head_dim(self):
        return self.query_dim // self.heads

    def to_dict(self):
        return {
            "heads": self.heads,
            "k": self.k,
            "query_dim": self.query_dim,
            "combine": self.combine,
        }


@dataclass
class ModalityBundle:
    """Per-molecule features plus where the SK vector came from."""

    h_s: Tensor
    h_sk: Tensor | None = None
    h_uk: Tensor | None = None
    sk_source: str = "kg_lookup"  # kg_lookup | sparse_attention | masked_zero


def mask_modality(bundle, p, rng, training=True):
    """With probability p, discard available structured knowledge so the
    sample trains through sparse attention. Evaluation never masks."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"masking probability must be in [0, 1], got {p}")
    if not training or p == 0.0 or bundle.h_sk is None:
        return bundle
    if rng.random() < p:
        return replace(bundle, h_sk=None, sk_source="sparse_attention")
    return bundle


def topk_sparse_softmax(scores, k):
    """Per row: softmax over the k largest scores, exact zeros elsewhere.

    Ties break toward the lowest index; k larger than the row clamps to an
    ordinary softmax.
    """
    masked = apply("topk_mask", [scores], {"k": k})
    return apply("softmax_lastdim", [masked])


@dataclass
class AttentionResult:
    output: Tensor  # head-averaged (sk_dim,)
    weights: np.ndarray  # (heads, entities) attention rows
    per_head: np.ndarray  # (heads, sk_dim) pre-average outputs


class SparseAttention(Module):
    """Reconstruct a missing SK vector from the frozen embedding matrix."""

    def __init__(self, struct_dim, sk_dim, config, rng):
        super().__init__()
        self.config = config
        self.sk_dim = sk_dim
        self.project = Linear(struct_dim, config.query_dim, rng)
        for h in range(config.heads):
            setattr(self, f"wq{h}", Linear(config.query_dim, config.head_dim, rng, bias=False))
            setattr(self, f"wk{h}", Linear(sk_dim, config.head_dim, rng, bias=False))

    def project_structure(self, h_xs):
        """One linear layer into the structured-knowledge query space."""
        return self.project(h_xs)

    def lookup(self, h_xs, emb_values):
        rows = emb_values.shape[0]
        k = self.config.k
        if k > rows:
            warnings.warn(
                f"top-k {k} exceeds {rows} embedding rows; clamping", stacklevel=2
            )
            k = rows
        table = constant(emb_values)
        query = self.project_structure(h_xs)
        scale = constant(1.0 / np.sqrt(self.config.head_dim))
        outputs, weight_rows = [], []
        for h in range(self.config.heads):
            q = getattr(self, f"wq{h}")(query)  # (head_dim,)
            keys = getattr(self, f"wk{h}")(table)  # (rows, head_dim)
            scores = apply("mul", [apply("matmul", [keys, q]), scale])
            weights = topk_sparse_softmax(scores, k)
            outputs.append(apply("matmul", [weights, table]))
            weight_rows.append(weights.values.copy())
        combined = outputs[0]
        for out in outputs[1:]:
            combined = apply("add", [combined, out])
        combined = apply("mul", [combined, constant(1.0 / self.config.heads)])
        return AttentionResult(
            combined,
            np.stack(weight_rows),
            np.stack([o.values for o in outputs]),
        )


class SkHead(Module):
    """Concatenated SK vectors through a linear layer with dropout; an
    absent second molecule contributes a zero vector."""

    def __init__(self, sk_dim, out_dim, dropout_rate, rng):
        super().__init__()
        self.sk_dim = sk_dim
        self.project = Linear(2 * sk_dim, out_dim, rng)
        self.drop = Dropout(dropout_rate)

    def __call__(self, h_a_sk, h_b_sk=None, rng=None):
        if h_b_sk is None:
            h_b_sk = constant(np.zeros(self.sk_dim))
        merged = apply("concat", [h_a_sk, h_b_sk], {"axis": 0})
        return self.drop(self.project(merged), rng)


class FusionMlp(Module):
    def __init__(self, in_dim, hidden, arity, dropout_rate, rng):
        super().__init__()
        self.lin0 = Linear(in_dim, hidden[0], rng)
        self.lin1 = Linear(hidden[0], hidden[1], rng)
        self.head = Linear(hidden[1], arity, rng)
        self.drop = Dropout(dropout_rate)

    def __call__(self, x, rng=None):
        h = self.drop(apply("relu", [self.lin0(x)]), rng)
        h = self.drop(apply("relu", [self.lin1(h)]), rng)
        return self.head(h)


@dataclass
class ModelConfig:
    """Dimensions and sub-configs for one task-specific model."""

    gin: GinConfig
    mcnn: McnnConfig
    text: TransformerConfig
    attention: SparseAttentionConfig
    sk_dim: int = 64
    sk_feature_dim: int = 64
    uk_feature_dim: int = 128
    fusion_hidden: tuple = (256, 64)
    fusion_dropout: float = 0.1
    feature_dropout: float = 0.1

    def to_dict(self):
        return {
            "gin": vars(self.gin).copy(),
            "mcnn": {
                **{k: v for k, v in vars(self.mcnn).items() if k != "branch_depths"},
                "branch_depths": list(self.mcnn.branch_depths),
            },
            "text": vars(self.text).copy(),
            "attention": self.attention.to_dict(),
            "sk_dim": self.sk_dim,
            "sk_feature_dim": self.sk_feature_dim,
            "uk_feature_dim": self.uk_feature_dim,
            "fusion_hidden": list(self.fusion_hidden),
            "fusion_dropout": self.fusion_dropout,
            "feature_dropout": self.feature_dropout,
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(
            gin=GinConfig(**obj["gin"]),
            mcnn=McnnConfig(**obj["mcnn"]),
            text=TransformerConfig(**obj["text"]),
            attention=SparseAttentionConfig(**obj["attention"]),
            sk_dim=obj["sk_dim"],
            sk_feature_dim=obj["sk_feature_dim"],
            uk_feature_dim=obj["uk_feature_dim"],
            fusion_hidden=tuple(obj["fusion_hidden"]),
            fusion_dropout=obj["fusion_dropout"],
            feature_dropout=obj["feature_dropout"],
        )


class KeddModel(Module):
    """Task model: per-kind structure encoders (shared between branches of
    same-kind pair tasks), frozen KG embedding, sparse-attention fallback,
    text encoder over joined documents, and the fusion MLP."""

    def __init__(self, task_spec, config, vocab, embedding, seed=0):
        super().__init__()
        self.task_spec = task_spec
        self.config = config
        self.vocab = vocab
        if embedding.dim != config.sk_dim:
            raise ValueError(
                f"embedding dim {embedding.dim} != configured sk_dim {config.sk_dim}"
            )
        self.seed = int(seed)
        pool = RngPool(self.seed)
        flags = task_spec.ablations
        kinds = [k for k in task_spec.entity_kinds if k is not None]

        if "drug" in kinds:
            self.drug_encoder = GinEncoder(config.gin, pool.get("init.gin"))
        if "protein" in kinds:
            self.protein_encoder = McnnEncoder(config.mcnn, pool.get("init.mcnn"))

        # SK branch: built whenever SK is used; the sparse-attention modules
        # exist even under the w/o-SA ablation so both variants share
        # bit-identical initialization of everything else.
        if flags.use_sk:
            self.sk_head = SkHead(
                config.sk_dim, config.sk_feature_dim, config.feature_dropout,
                pool.get("init.sk_head"),
            )
            for kind in set(kinds):
                setattr(
                    self,
                    f"{kind}_attention",
                    SparseAttention(
                        self._encoder(kind).output_dim,
                        config.sk_dim,
                        config.attention,
                        pool.get(f"init.attention.{kind}"),
                    ),
                )

        if flags.use_uk:
            self.text_encoder = TextEncoder(config.text, len(vocab), pool.get("init.text"))
            self.uk_head = UkHead(
                config.text.model_dim, config.uk_feature_dim,
                config.feature_dropout, pool.get("init.uk_head"),
            )

        struct_dim = self._encoder(kinds[0]).output_dim
        pair_dim = self._encoder(kinds[1]).output_dim if task_spec.is_pair_task else struct_dim
        fusion_in = struct_dim + pair_dim
        if flags.use_sk:
            fusion_in += config.sk_feature_dim
        if flags.use_uk:
            fusion_in += config.uk_feature_dim
        self.fusion = FusionMlp(
            fusion_in, config.fusion_hidden, task_spec.label_arity,
            config.fusion_dropout, pool.get("init.fusion"),
        )

        self.register_buffer("kg_embedding", embedding.values)
        self.kg_entity_ids = list(embedding.entity_ids)
        self._kg_row = {e: i for i, e in enumerate(self.kg_entity_ids)}
        self._doc_cache = {}
        self.stamp_parameter_names()

    def _encoder(self, kind):
        return self.drug_encoder if kind == "drug" else self.protein_encoder

    def _attention(self, kind):
        return getattr(self, f"{kind}_attention")

    def _document(self, record):
        if record.id not in self._doc_cache:
            self._doc_cache[record.id] = tokenize(record.text or "", self.vocab)
        return self._doc_cache[record.id]

    def encode_entity(self, record, mask_p=0.0, rngs=None, collect=None):
        """Structure feature plus the resolved SK vector for one molecule."""
        flags = self.task_spec.ablations
        h_s = self._encoder(record.kind).encode(record.structure)
        bundle = ModalityBundle(h_s=h_s)
        if not flags.use_sk:
            return bundle
        if record.kg_id is not None:
            if record.kg_id not in self._kg_row:
                raise ValueError(f"kg_id '{record.kg_id}' has no embedding row")
            row = self.kg_embedding[self._kg_row[record.kg_id]]
            bundle = replace(bundle, h_sk=constant(row), sk_source="kg_lookup")
        else:
            bundle = replace(bundle, h_sk=None, sk_source="sparse_attention")
        if self.training and mask_p > 0.0:
            bundle = mask_modality(
                bundle, mask_p, rngs.get("masking"), training=True
            )
        if bundle.h_sk is None:
            if flags.use_sparse_attention:
                result = self._attention(record.kind).lookup(h_s, self.kg_embedding)
                bundle = replace(bundle, h_sk=result.output, sk_source="sparse_attention")
                if collect is not None:
                    collect.setdefault("attention", []).append(result)
            else:
                bundle = replace(
                    bundle,
                    h_sk=constant(np.zeros(self.config.sk_dim)),
                    sk_source="masked_zero",
                )
        return bundle

    def fuse_and_predict(self, h_s, h_sk, h_uk, rng=None):
        """Concatenate the active modality features and produce raw logits."""
        parts = [h_s]
        if self.task_spec.ablations.use_sk:
            if h_sk is None:
                raise ValueError("SK feature required unless ablated")
            parts.append(h_sk)
        if self.task_spec.ablations.use_uk:
            if h_uk is None:
                raise ValueError("UK feature required unless ablated")
            parts.append(h_uk)
        merged = parts[0] if len(parts) == 1 else apply("concat", parts, {"axis": 0})
        return self.fusion(merged, rng)

    def forward(self, a, b=None, mask_p=0.0, rngs=None, collect=None):
        """Logits for one sample; b is None exactly for DP."""
        if (b is None) == self.task_spec.is_pair_task:
            raise ValueError(f"task {self.task_spec.task} got wrong entity arity")
        flags = self.task_spec.ablations
        drop_rng = rngs.get("dropout") if rngs is not None else None

        bundle_a = self.encode_entity(a, mask_p, rngs, collect)
        bundle_b = self.encode_entity(b, mask_p, rngs, collect) if b is not None else None
        if collect is not None:
            collect["bundles"] = (bundle_a, bundle_b)

        if bundle_b is not None:
            h_s = apply("concat", [bundle_a.h_s, bundle_b.h_s], {"axis": 0})
        else:
            zeros = constant(np.zeros(bundle_a.h_s.shape[0]))
            h_s = apply("concat", [bundle_a.h_s, zeros], {"axis": 0})

        h_sk = None
        if flags.use_sk:
            h_sk = self.sk_head(
                bundle_a.h_sk,
                bundle_b.h_sk if bundle_b is not None else None,
                rng=drop_rng,
            )

        h_uk = None
        if flags.use_uk:
            doc_a = self._document(a)
            doc_b = self._document(b) if b is not None else None
            cls_vec = self.text_encoder.encode(doc_a, doc_b, rng=drop_rng)
            h_uk = self.uk_head(cls_vec, rng=drop_rng)

        return self.fuse_and_predict(h_s, h_sk, h_uk, rng=drop_rng)

    def score(self, a, b=None):
        """Eval-mode probability vector for one sample."""
        was_training = self.training
        self.eval()
        try:
            probs = apply("sigmoid", [self.forward(a, b)]).values.copy()
        finally:
            self.train(was_training)
        return probs

    def config_payload(self):
        """Everything needed to rebuild this model around a checkpoint."""
        return {
            "task": self.task_spec.task,
            "label_arity": self.task_spec.label_arity,
            "ablations": self.task_spec.ablations.to_dict(),
            "model": self.config.to_dict(),
            "vocab_tokens": self.vocab.id_to_token[5:],
            "kg_entity_ids": self.kg_entity_ids,
            "seed": self.seed,
        }

    @classmethod
    def from_config_payload(cls, payload, embedding_values):
        from .kg import EmbeddingMatrix
        from .text import Vocabulary

        task_spec = TaskSpec(
            payload["task"],
            payload["label_arity"],
            AblationFlags(**payload["ablations"]),
        )
        emb = EmbeddingMatrix(
            embedding_values, payload["kg_entity_ids"], frozen=True
        )
        return cls(
            task_spec,
            ModelConfig.from_dict(payload["model"]),
            Vocabulary(payload["vocab_tokens"]),
            emb,
            seed=payload["seed"],
        )
