"""Training and evaluation: BCE-with-logits loss, Adam, early stopping on
the validation ranking metric, and binary checkpoints that restore a model
bit-identically."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, apply, backward
from .data import AblationFlags
from .fusion import KeddModel
from .metrics import auprc, auroc, micro_f1
from .nn import RngPool

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "MetricsReport",
    "bce_loss",
    "Adam",
    "evaluate",
    "fit",
    "FitResult",
    "save_checkpoint",
    "load_checkpoint",
    "load_model",
    "config_fingerprint",
    "aggregate_reports",
]

_CKPT_MAGIC = b"KEDDCKPT"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    mask_p: float = 0.05
    seed: int = 0
    ablations: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if not 0.0 <= self.mask_p <= 1.0:
            raise ValueError("mask_p must be in [0, 1]")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "mask_p": self.mask_p,
            "seed": self.seed,
            "ablations": self.ablations.to_dict(),
        }


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def bce_loss(logits, labels, arity):
    """Mean binary cross-entropy with logits; multi-label mean for PPI."""
    targets = np.asarray(labels, dtype=np.float64)
    if targets.shape != (arity,) or logits.shape != (arity,):
        raise ValueError(
            f"expected {arity} logits and labels, got {logits.shape} and {targets.shape}"
        )
    if not np.isin(targets, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    return apply("bce_with_logits", [logits], {"targets": targets})


class Adam:
    def __init__(self, params, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m = [np.zeros_like(p.tensor.values) for p in self.params]
        self._v = [np.zeros_like(p.tensor.values) for p in self.params]

    def step(self):
        self.steps += 1
        bias1 = 1.0 - self.beta1**self.steps
        bias2 = 1.0 - self.beta2**self.steps
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.tensor.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.tensor.values -= (
                self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            )

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class MetricsReport:
    auroc: float | None = None
    auprc: float | None = None
    micro_f1: float | None = None
    loss_curve: list = field(default_factory=list)
    valid_curve: list = field(default_factory=list)
    best_epoch: int = -1
    config_fingerprint: str = ""
    seed: int = 0

    def to_dict(self):
        return {
            "auroc": self.auroc,
            "auprc": self.auprc,
            "micro_f1": self.micro_f1,
            "loss_curve": list(self.loss_curve),
            "valid_curve": list(self.valid_curve),
            "best_epoch": self.best_epoch,
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
        }


def config_fingerprint(obj):
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True).encode("utf-8")
    ).hexdigest()


def _scores_and_labels(model, samples, entities):
    scores, labels = [], []
    for s in samples:
        a = entities[s.a]
        b = entities[s.b] if s.b is not None else None
        scores.append(model.score(a, b))
        labels.append(np.asarray(s.labels, dtype=np.int64))
    return np.asarray(scores), np.asarray(labels)


def evaluate(model, samples, entities):
    """Eval-mode metrics over a sample list; micro-F1 thresholds at 0.5.

    Metrics that are undefined for the given labels (single class) are None.
    """
    if not samples:
        return {"auroc": None, "auprc": None, "micro_f1": None, "scores": np.zeros((0, 1))}
    scores, labels = _scores_and_labels(model, samples, entities)
    flat_scores = scores.reshape(-1)
    flat_labels = labels.reshape(-1)
    out = {"scores": scores}
    try:
        out["auroc"] = auroc(flat_scores, flat_labels)
    except ValueError:
        out["auroc"] = None
    try:
        out["auprc"] = auprc(flat_scores, flat_labels)
    except ValueError:
        out["auprc"] = None
    out["micro_f1"] = micro_f1((scores >= 0.5).astype(int), labels)
    return out


@dataclass
class FitResult:
    state: dict
    report: MetricsReport


def fit(model, sample_set, entities, config):
    """Adam over shuffled mini-batches with modality masking in training and
    early stopping on the validation metric (micro-F1 for PPI, else AUROC).

    Returns the best-epoch parameter state and the training report; the
    model is left loaded with the best state. Fully reproducible under
    config.seed. Embeddings must already come from the leakage-filtered KG.
    """
    if all(t is None for t in sample_set.tags):
        raise ValueError("fit needs split tags; run split_dataset first")
    train_samples = sample_set.subset("train")
    valid_samples = sample_set.subset("valid")
    metric_name = "micro_f1" if sample_set.task.task == "PPI" else "auroc"
    arity = sample_set.task.label_arity

    pool = RngPool(config.seed)
    shuffle_rng = pool.get("shuffle")
    optimizer = Adam(model.parameters(), config.learning_rate)
    report = MetricsReport(seed=config.seed)

    best_state = model.state_dict()
    best_metric = -np.inf
    best_epoch = -1
    since_best = 0

    model.train()
    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(train_samples))
        epoch_losses = []
        for batch_idx, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start : start + config.batch_size]
            optimizer.zero_grad()
            terms = []
            for idx in batch:
                s = train_samples[idx]
                a = entities[s.a]
                b = entities[s.b] if s.b is not None else None
                logits = model.forward(a, b, mask_p=config.mask_p, rngs=pool)
                terms.append(bce_loss(logits, s.labels, arity))
            total = terms[0]
            for t in terms[1:]:
                total = apply("add", [total, t])
            total = apply("mul", [total, Tensor(1.0 / len(terms))])
            if not np.isfinite(total.item()):
                raise TrainingDiverged(epoch, batch_idx)
            backward(total)
            optimizer.step()
            epoch_losses.append(total.item())
        report.loss_curve.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)

        if valid_samples:
            metrics = evaluate(model, valid_samples, entities)
            model.train()
            value = metrics[metric_name]
            report.valid_curve.append(value)
            if value is not None and value > best_metric:
                best_metric = value
                best_state = model.state_dict()
                best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
        else:
            best_state = model.state_dict()
            best_epoch = epoch

    model.load_state_dict(best_state)
    model.eval()
    report.best_epoch = best_epoch
    return FitResult(best_state, report)


def save_checkpoint(path, model, fingerprint):
    """Named float64 blobs (parameters and buffers) plus the config payload
    needed to rebuild the model and the run's config fingerprint."""
    state = model.state_dict()
    blobs = []
    offset = 0
    for name, arr in state.items():
        size = arr.size * 8
        blobs.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += size
    header = json.dumps(
        {
            "config_payload": model.config_payload(),
            "fingerprint": fingerprint,
            "blobs": blobs,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in state.values():
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        data = fh.read()
    state = {}
    for blob in header["blobs"]:
        shape = tuple(blob["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = blob["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        state[blob["name"]] = arr.reshape(shape).copy()
    return header["config_payload"], header["fingerprint"], state


def load_model(path):
    """Rebuild the model a checkpoint was saved from."""
    payload, fingerprint, state = load_checkpoint(path)
    model = KeddModel.from_config_payload(payload, state["kg_embedding"])
    model.load_state_dict(state)
    model.eval()
    return model, fingerprint


def aggregate_reports(metric_dicts):
    """Mean and std per metric over seeds, ignoring undefined entries."""
    out = {}
    for key in ("auroc", "auprc", "micro_f1"):
        values = [m[key] for m in metric_dicts if m.get(key) is not None]
        if values:
            out[key] = {
                "mean": float(np.mean(values)),
                "std": float(np.std(values)),
                "values": [float(v) for v in values],
            }
        else:
            out[key] = None
    return out
