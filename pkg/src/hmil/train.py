"""Supervised training over (JSON document, label) pairs.

Documents are extracted once into a single cached batch; minibatches are
served as slices of it. Each epoch shuffles the training indices, steps the
optimizer per minibatch, and scores the held-out split; the parameters of the
best-validation epoch end up in the returned bundle. Everything is seeded, so
identical inputs and configuration reproduce identical bundles bit for bit.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bundle import ModelBundle
from .data import sample_count, slice_samples
from .engine import ParamStore
from .errors import (
    CorruptContainer,
    EmptyBatch,
    ParseError,
    ShapeMismatch,
    SingleClass,
    UnknownLabel,
)
from .extract import Extractor, extract_batch
from .model import (
    Classifier,
    ModelConfig,
    backward,
    collect_params,
    forward,
    make_classifier_head,
    predict,
    reflect_in_model,
)
from .schema import value_key


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    validation_fraction: float = 0.2
    early_stop_patience: int = 10

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


@dataclass
class LabeledCorpus:
    documents: list
    labels: list[str]
    class_index: dict[str, int]

    @classmethod
    def from_pairs(cls, documents: list, labels: list[str]) -> "LabeledCorpus":
        if len(documents) != len(labels):
            raise ValueError("documents and labels must have equal length")
        index: dict[str, int] = {}
        for lab in labels:  # class order fixed by first occurrence
            if lab not in index:
                index[lab] = len(index)
        return cls(list(documents), list(labels), index)

    @classmethod
    def from_jsonl(cls, path, label_field: Optional[str] = None) -> "LabeledCorpus":
        docs, labels = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ParseError(f"line {lineno}: {e}", line=lineno) from e
                if label_field is not None:
                    if not isinstance(row, dict) or label_field not in row:
                        raise ParseError(f"line {lineno}: no {label_field!r} field",
                                         line=lineno)
                    row = dict(row)
                    labels.append(value_key(row.pop(label_field)))
                    docs.append(row)
                else:
                    if not isinstance(row, dict) or "sample" not in row or "label" not in row:
                        raise ParseError(
                            f"line {lineno}: expected {{\"sample\": ..., \"label\": ...}}",
                            line=lineno)
                    labels.append(value_key(row["label"]))
                    docs.append(row["sample"])
        return cls.from_pairs(docs, labels)

    def label_ids(self) -> np.ndarray:
        return np.array([self.class_index[lab] for lab in self.labels], dtype=np.int64)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    wall_time: float = 0.0

    CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc"

    def to_csv(self) -> str:
        def fmt(x):
            return "" if x is None else repr(float(x))
        lines = [self.CSV_HEADER]
        for row in self.epochs:
            lines.append(",".join([
                str(row["epoch"]), fmt(row["train_loss"]), fmt(row["train_acc"]),
                fmt(row["val_loss"]), fmt(row["val_acc"]),
            ]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"epochs": self.epochs, "best_epoch": self.best_epoch,
                           "wall_time": self.wall_time}, sort_keys=True)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def cross_entropy(logits: np.ndarray, label_ids: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy and its gradient in the logits.

    Uses the log-softmax formulation, so extreme logits do not overflow.
    Gradient is (softmax - onehot) / sample_count, in the logits' dtype.
    """
    n_classes, n = logits.shape
    if n == 0:
        raise EmptyBatch("cross entropy over zero samples")
    label_ids = np.asarray(label_ids, dtype=np.int64)
    if label_ids.shape != (n,):
        raise ShapeMismatch(f"{label_ids.shape} labels for {n} samples")
    if label_ids.min() < 0 or label_ids.max() >= n_classes:
        raise ValueError("label id out of range")
    z = logits.astype(np.float64)
    z = z - z.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=0))
    cols = np.arange(n)
    loss = float((log_norm - z[label_ids, cols]).mean())
    grad = np.exp(z - log_norm)
    grad[label_ids, cols] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def optimizer_step(params: ParamStore, grads: dict[str, np.ndarray],
                   state: Optional[AdamState], config: TrainConfig) -> Optional[AdamState]:
    """Apply one update in place; returns the (possibly new) optimizer state."""
    for p in params:
        if grads[p.name].shape != p.value.shape:
            raise ShapeMismatch(f"{p.name}: gradient shape {grads[p.name].shape} != "
                                f"parameter shape {p.value.shape}")
    if config.optimizer == "sgd":
        for p in params:
            p.value -= config.lr * grads[p.name]
        return state
    if state is None:
        state = AdamState(0, {p.name: np.zeros_like(p.value) for p in params},
                          {p.name: np.zeros_like(p.value) for p in params})
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p in params:
        g = grads[p.name]
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.value -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    return state


_STATE_MAGIC = b"HMST1"


def optimizer_state_dumps(state: Optional[AdamState]) -> bytes:
    if state is None:
        names = []
        blob = b""
        header = {"kind": "none", "step": 0, "tensors": []}
    else:
        names = sorted(state.m)
        header = {"kind": "adam", "step": state.step,
                  "tensors": [{"name": n, "shape": list(state.m[n].shape)} for n in names]}
        blob = b"".join(
            np.ascontiguousarray(state.m[n], dtype="<f4").tobytes() for n in names
        ) + b"".join(
            np.ascontiguousarray(state.v[n], dtype="<f4").tobytes() for n in names
        )
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _STATE_MAGIC + struct.pack("<I", len(head)) + head + blob
    return body + struct.pack("<I", zlib.crc32(body))


def optimizer_state_loads(data: bytes) -> Optional[AdamState]:
    if len(data) < 13 or data[:5] != _STATE_MAGIC:
        raise CorruptContainer("not an optimizer state blob")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CorruptContainer("optimizer state checksum mismatch")
    (hlen,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9:9 + hlen].decode("utf-8"))
    if header["kind"] == "none":
        return None
    offset = 9 + hlen
    arrays = []
    for entry in header["tensors"] * 2:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        raw = data[offset:offset + 4 * count]
        arrays.append(np.frombuffer(raw, "<f4").reshape(entry["shape"]).copy())
        offset += 4 * count
    k = len(header["tensors"])
    names = [e["name"] for e in header["tensors"]]
    return AdamState(header["step"], dict(zip(names, arrays[:k])),
                     dict(zip(names, arrays[k:])))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def stratified_split(label_ids: np.ndarray, fraction: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class split; keeps each class's proportion within one sample
    and never takes a class's last training sample."""
    train_idx, val_idx = [], []
    for cls in np.unique(label_ids):
        members = np.nonzero(label_ids == cls)[0]
        members = members[rng.permutation(len(members))]
        n_val = min(int(round(fraction * len(members))), len(members) - 1)
        val_idx.extend(members[:n_val].tolist())
        train_idx.extend(members[n_val:].tolist())
    return np.array(sorted(train_idx), np.int64), np.array(sorted(val_idx), np.int64)


def _batched_scores(clf: Classifier, data, label_ids: np.ndarray, idx: np.ndarray,
                    batch_size: int) -> tuple[float, float]:
    loss_sum = 0.0
    correct = 0
    for lo in range(0, len(idx), batch_size):
        chunk = idx[lo:lo + batch_size]
        logits, _ = forward(clf, slice_samples(data, chunk))
        loss, _ = cross_entropy(logits, label_ids[chunk])
        loss_sum += loss * len(chunk)
        correct += int((logits.argmax(axis=0) == label_ids[chunk]).sum())
    return loss_sum / len(idx), correct / len(idx)


def train(corpus: LabeledCorpus, extractor: Extractor,
          config: Optional[TrainConfig] = None,
          model_config: Optional[ModelConfig] = None,
          extracted=None) -> tuple[ModelBundle, TrainReport]:
    """Fit a classifier to the corpus; returns the bundle holding the
    parameters of the best-validation epoch plus the per-epoch report.

    extracted, when given, must be the corpus pre-extracted with the same
    extractor (lets callers parallelize extraction; results are identical).
    """
    config = config or TrainConfig()
    started = time.monotonic()
    if not corpus.documents:
        raise EmptyBatch("corpus is empty")
    if len(corpus.class_index) < 2:
        raise SingleClass("training needs at least two classes")

    rng = np.random.default_rng(config.seed)
    label_ids = corpus.label_ids()
    train_idx, val_idx = stratified_split(label_ids, config.validation_fraction, rng)

    # extraction cache: built once, minibatches are slices of it
    data = extracted if extracted is not None else extract_batch(extractor, corpus.documents)
    if sample_count(data) != len(corpus.documents):
        raise ShapeMismatch("pre-extracted batch does not match the corpus size")
    model_config = model_config or ModelConfig(seed=config.seed)
    model = reflect_in_model(data, model_config)
    head = make_classifier_head(model.embed_dim, len(corpus.class_index),
                                seed=model_config.seed + 1)
    clf = Classifier(model, head)
    params = collect_params(clf)

    state: Optional[AdamState] = None
    report = TrainReport()
    best_acc = -1.0
    best_snapshot = params.snapshot()
    best_epoch = 0
    stale = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx) if config.shuffle else train_idx
        loss_sum = 0.0
        correct = 0
        for lo in range(0, len(order), config.batch_size):
            batch_idx = order[lo:lo + config.batch_size]
            batch = slice_samples(data, batch_idx)
            y = label_ids[batch_idx]
            logits, tape = forward(clf, batch)
            loss, grad_logits = cross_entropy(logits, y)
            grads = backward(tape, grad_logits)
            state = optimizer_step(params, grads, state, config)
            loss_sum += loss * len(batch_idx)
            correct += int((logits.argmax(axis=0) == y).sum())

        row = {
            "epoch": epoch,
            "train_loss": loss_sum / len(order),
            "train_acc": correct / len(order),
            "val_loss": None,
            "val_acc": None,
        }
        if len(val_idx):
            row["val_loss"], row["val_acc"] = _batched_scores(
                clf, data, label_ids, val_idx, config.batch_size)
            if row["val_acc"] > best_acc:
                best_acc = row["val_acc"]
                best_snapshot = params.snapshot()
                best_epoch = epoch
                stale = 0
            else:
                stale += 1
        report.epochs.append(row)
        if len(val_idx) and stale >= config.early_stop_patience:
            break

    if len(val_idx):
        params.restore(best_snapshot)
        report.best_epoch = best_epoch
    else:
        report.best_epoch = report.epochs[-1]["epoch"] if report.epochs else 0
    report.wall_time = time.monotonic() - started

    bundle = ModelBundle(model, head, extractor, list(corpus.class_index))
    return bundle, report


def evaluate(bundle: ModelBundle, corpus: LabeledCorpus,
             batch_size: int = 256) -> dict:
    """Accuracy, per-class precision/recall, and the confusion matrix.

    Prediction ties resolve to the lowest class index. Labels outside the
    bundle's class index are rejected.
    """
    classes = bundle.classes
    index = {c: i for i, c in enumerate(classes)}
    for lab in corpus.labels:
        if lab not in index:
            raise UnknownLabel(f"label {lab!r} not in bundle classes {classes}")
    truth = np.array([index[lab] for lab in corpus.labels], dtype=np.int64)

    n = len(corpus.documents)
    preds = np.zeros(n, dtype=np.int64)
    for lo in range(0, n, batch_size):
        docs = corpus.documents[lo:lo + batch_size]
        logits = predict(bundle.model, bundle.head, extract_batch(bundle.extractor, docs))
        preds[lo:lo + len(docs)] = logits.argmax(axis=0)

    k = len(classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)
    diag = np.diag(confusion).astype(np.float64)
    col = confusion.sum(axis=0)
    row = confusion.sum(axis=1)
    precision = {c: (diag[i] / col[i] if col[i] else 0.0) for i, c in enumerate(classes)}
    recall = {c: (diag[i] / row[i] if row[i] else 0.0) for i, c in enumerate(classes)}
    return {
        "accuracy": float(diag.sum() / n) if n else 0.0,
        "precision": precision,
        "recall": recall,
        "confusion": confusion,
        "classes": list(classes),
    }
