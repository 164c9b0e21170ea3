"""Deterministic conversion of raw JSON documents into batched data nodes.

An extractor is a rule tree synthesized from a schema: dictionaries map to
product nodes, lists to bag nodes, and leaves to one of four representations
(standardized number, one-hot category, hashed byte n-gram histogram, or
canonical-text n-grams for messy positions). Extraction never fails on shape
mismatches; anything that does not fit the rule becomes a missing-marked leaf
or an empty bag, which the model later fills with trainable imputations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .data import (
    MISSING,
    ArrayNode,
    BagNode,
    DataNode,
    DenseMatrix,
    NGramCountMatrix,
    OneHotMatrix,
    ProductNode,
)
from .errors import DepthExceeded, EmptySchema, InvalidFormat
from .schema import (
    DictSchema,
    LeafSchema,
    ListSchema,
    PolymorphicSchema,
    SchemaNode,
    total_count,
    value_key,
)

EXTRACTOR_FORMAT = "hmil-extractor/1"

# Documents nested deeper than this are rejected as pathological.
MAX_DOC_DEPTH = 64

# Sentinel for "key not present"; observationally identical to null at leaves.
ABSENT = object()

_BOUNDARY = 256  # symbol appended on both sides of the byte stream


@dataclass
class ExtractConfig:
    """Heuristic thresholds for extractor synthesis."""

    min_presence: float = 0.01
    category_threshold: int = 100
    numeric_ratio: float = 0.95
    majority_ratio: float = 0.9
    ngram_n: int = 3
    ngram_base: int = 257
    ngram_hash_dim: int = 2053
    ngram_normalize: bool = True


DEFAULT_CONFIG = ExtractConfig()


def ngram_hash(data: bytes, n: int, alphabet_base: int = 257,
               hash_dim: int = 2053) -> list[tuple[int, int]]:
    """Hashed n-gram histogram of a byte string.

    The input is padded with one boundary symbol on each side; every length-n
    window containing at least one real byte contributes its base-positional
    value modulo hash_dim. Returns (index, count) pairs sorted by index.
    """
    idx, counts = _ngram_arrays(data, n, alphabet_base, hash_dim)
    return list(zip(idx.tolist(), counts.tolist()))


def _ngram_arrays(data: bytes, n: int, base: int, hash_dim: int):
    if hash_dim < 2:
        raise ValueError("hash_dim must be at least 2")
    if n < 1:
        raise ValueError("n must be at least 1")
    syms = np.empty(len(data) + 2, dtype=np.int64)
    syms[0] = syms[-1] = _BOUNDARY
    syms[1:-1] = np.frombuffer(data, dtype=np.uint8)
    if len(syms) < n:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    windows = np.lib.stride_tricks.sliding_window_view(syms, n)
    keep = (windows != _BOUNDARY).any(axis=1)
    acc = np.zeros(len(windows), dtype=np.int64)
    for i in range(n):
        acc = (acc * base + windows[:, i]) % hash_dim
    return np.unique(acc[keep], return_counts=True)


@dataclass(frozen=True)
class NumericExtractor:
    """Standardized scalar: output = (value - center) / scale."""

    center: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class CategoricalExtractor:
    """One-hot category; the last slot is reserved for unknown values."""

    vocabulary: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", tuple(sorted(set(self.vocabulary))))

    @property
    def onehot_dim(self) -> int:
        return len(self.vocabulary) + 1


@dataclass(frozen=True)
class NGramExtractor:
    """Hashed byte n-gram histogram of the value's text form."""

    n: int = 3
    alphabet_base: int = 257
    hash_dim: int = 2053
    normalize: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.hash_dim < 2:
            raise ValueError("hash_dim must be at least 2")


@dataclass(frozen=True)
class StringifyExtractor:
    """Canonical-JSON-text rendering followed by n-gram hashing.

    The fallback for polymorphic or otherwise messy positions: any value at
    all can be rendered to text.
    """

    inner: NGramExtractor = field(default_factory=NGramExtractor)


@dataclass(frozen=True)
class ListExtractor:
    child: "Extractor"


@dataclass(frozen=True)
class DictExtractor:
    entries: dict[str, "Extractor"]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("dict extractor needs at least one key")
        object.__setattr__(self, "entries", {k: self.entries[k] for k in sorted(self.entries)})


Extractor = Union[NumericExtractor, CategoricalExtractor, NGramExtractor,
                  StringifyExtractor, ListExtractor, DictExtractor]


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def suggest_extractor(schema: SchemaNode, config: ExtractConfig = DEFAULT_CONFIG) -> Extractor:
    """Synthesize an extractor tree from a schema.

    Dictionaries keep keys whose presence ratio reaches min_presence; leaves
    become categorical when their histogram is small and unsaturated, numeric
    when numeric occurrences dominate, n-gram otherwise. Positions whose
    container kind is contested take the majority shape, or fall back to
    canonical-text n-grams when no shape reaches majority_ratio.
    """
    if schema is None or total_count(schema) == 0:
        raise EmptySchema("cannot synthesize an extractor from an empty schema")
    return _suggest(schema, config)


def _default_ngram(cfg: ExtractConfig) -> NGramExtractor:
    return NGramExtractor(cfg.ngram_n, cfg.ngram_base, cfg.ngram_hash_dim, cfg.ngram_normalize)


def _suggest(schema: SchemaNode, cfg: ExtractConfig) -> Extractor:
    if isinstance(schema, PolymorphicSchema):
        total = total_count(schema)
        shape, branch = max(sorted(schema.branches.items()),
                            key=lambda kv: total_count(kv[1]))
        if total and total_count(branch) / total >= cfg.majority_ratio:
            return _suggest(branch, cfg)
        return StringifyExtractor(_default_ngram(cfg))
    if isinstance(schema, DictSchema):
        kept = {
            k: entry for k, entry in schema.entries.items()
            if schema.count and entry.present / schema.count >= cfg.min_presence
        }
        if not kept:
            return StringifyExtractor(_default_ngram(cfg))
        return DictExtractor({k: _suggest(e.child, cfg) for k, e in kept.items()})
    if isinstance(schema, ListSchema):
        if total_count(schema.child) == 0:
            return ListExtractor(StringifyExtractor(_default_ngram(cfg)))
        return ListExtractor(_suggest(schema.child, cfg))
    # leaf
    distinct = len(schema.histogram)
    if not schema.saturated and 1 <= distinct <= cfg.category_threshold:
        return CategoricalExtractor(tuple(schema.histogram))
    if schema.numeric_ratio >= cfg.numeric_ratio and schema.stats.count:
        return NumericExtractor(schema.stats.mean, max(schema.stats.stddev, 1e-6))
    return _default_ngram(cfg)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

def extract(extractor: Extractor, doc) -> DataNode:
    """Convert one document into a single-sample batch."""
    _check_depth(doc, 0)
    return _extract_many(extractor, [doc])


def extract_missing(extractor: Extractor) -> DataNode:
    """The single-sample batch standing for a wholly absent document."""
    return _extract_many(extractor, [ABSENT])


def extract_batch(extractor: Extractor, docs: list) -> DataNode:
    """Convert documents into one batch, column-for-column equal to
    concatenating per-document extractions."""
    for i, doc in enumerate(docs):
        try:
            _check_depth(doc, 0)
        except DepthExceeded as e:
            raise DepthExceeded(f"document {i}: {e}") from None
    return _extract_many(extractor, list(docs))


def _check_depth(value, depth: int) -> None:
    if isinstance(value, (dict, list)):
        if depth >= MAX_DOC_DEPTH:
            raise DepthExceeded(f"container nesting exceeds max depth {MAX_DOC_DEPTH}")
        items = value.values() if isinstance(value, dict) else value
        for item in items:
            _check_depth(item, depth + 1)


def _coerce_number(v):
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float)):
        try:
            x = float(v)
        except OverflowError:
            return None
        return x if math.isfinite(x) else None
    if isinstance(v, str):
        try:
            x = float(v)
        except ValueError:
            return None
        return x if math.isfinite(x) else None
    return None


def _canonical_text(v) -> str:
    return json.dumps(v, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _extract_many(ex: Extractor, values: list) -> DataNode:
    n = len(values)
    if isinstance(ex, NumericExtractor):
        out = np.zeros((1, n), dtype=np.float64)
        mask = np.zeros(n, dtype=bool)
        for j, v in enumerate(values):
            x = None if v is ABSENT else _coerce_number(v)
            if x is None:
                mask[j] = True
            else:
                out[0, j] = (x - ex.center) / ex.scale
        return ArrayNode(DenseMatrix(out), mask)

    if isinstance(ex, CategoricalExtractor):
        lookup = {key: i for i, key in enumerate(ex.vocabulary)}
        unknown = len(ex.vocabulary)
        idx = np.empty(n, dtype=np.int32)
        mask = np.zeros(n, dtype=bool)
        for j, v in enumerate(values):
            if v is ABSENT or v is None or isinstance(v, (dict, list)):
                idx[j] = MISSING
                mask[j] = True
            else:
                idx[j] = lookup.get(value_key(v), unknown)
        return ArrayNode(OneHotMatrix(ex.onehot_dim, idx), mask)

    if isinstance(ex, NGramExtractor):
        indptr = np.zeros(n + 1, dtype=np.int64)
        cols_idx: list[np.ndarray] = []
        cols_val: list[np.ndarray] = []
        mask = np.zeros(n, dtype=bool)
        for j, v in enumerate(values):
            if v is ABSENT or v is None or isinstance(v, (dict, list)):
                mask[j] = True
                indptr[j + 1] = indptr[j]
                continue
            text = v if isinstance(v, str) else value_key(v)
            idx, counts = _ngram_arrays(text.encode("utf-8"), ex.n, ex.alphabet_base,
                                        ex.hash_dim)
            vals = counts.astype(np.float64)
            if ex.normalize and len(vals):
                vals = vals / vals.sum()
            cols_idx.append(idx)
            cols_val.append(vals)
            indptr[j + 1] = indptr[j] + len(idx)
        indices = np.concatenate(cols_idx) if cols_idx else np.zeros(0, np.int64)
        vals = np.concatenate(cols_val) if cols_val else np.zeros(0, np.float64)
        return ArrayNode(NGramCountMatrix(ex.hash_dim, indptr, indices, vals), mask)

    if isinstance(ex, StringifyExtractor):
        texts = [
            ABSENT if (v is ABSENT or v is None) else _canonical_text(v)
            for v in values
        ]
        return _extract_many(ex.inner, texts)

    if isinstance(ex, ListExtractor):
        per_doc: list[list] = []
        for v in values:
            if isinstance(v, list):
                per_doc.append(v)
            elif v is ABSENT or v is None or isinstance(v, dict):
                per_doc.append([])
            else:
                per_doc.append([v])  # scalar at a list position: singleton bag
        flat = [item for items in per_doc for item in items]
        segs = np.zeros((n, 2), dtype=np.int64)
        segs[:, 1] = np.cumsum([len(items) for items in per_doc], dtype=np.int64)
        segs[1:, 0] = segs[:-1, 1]
        return BagNode(_extract_many(ex.child, flat), segs)

    if isinstance(ex, DictExtractor):
        children = {}
        for key, sub in ex.entries.items():
            sub_values = [
                v[key] if isinstance(v, dict) and key in v else ABSENT
                for v in values
            ]
            children[key] = _extract_many(sub, sub_values)
        return ProductNode(children)

    raise TypeError(f"not an extractor: {type(ex).__name__}")


def leaf_dim(ex: Extractor) -> int:
    """Feature dimension of a leaf extractor's output column."""
    if isinstance(ex, NumericExtractor):
        return 1
    if isinstance(ex, CategoricalExtractor):
        return ex.onehot_dim
    if isinstance(ex, NGramExtractor):
        return ex.hash_dim
    if isinstance(ex, StringifyExtractor):
        return ex.inner.hash_dim
    raise TypeError(f"not a leaf extractor: {type(ex).__name__}")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _node_to_json(ex: Extractor):
    if isinstance(ex, NumericExtractor):
        return {"type": "numeric", "center": ex.center, "scale": ex.scale}
    if isinstance(ex, CategoricalExtractor):
        return {"type": "categorical", "vocabulary": list(ex.vocabulary)}
    if isinstance(ex, NGramExtractor):
        return {"type": "ngram", "n": ex.n, "base": ex.alphabet_base,
                "hash_dim": ex.hash_dim, "normalize": ex.normalize}
    if isinstance(ex, StringifyExtractor):
        return {"type": "stringify", "inner": _node_to_json(ex.inner)}
    if isinstance(ex, ListExtractor):
        return {"type": "list", "child": _node_to_json(ex.child)}
    if isinstance(ex, DictExtractor):
        return {"type": "dict", "entries": {k: _node_to_json(v) for k, v in ex.entries.items()}}
    raise TypeError(f"not an extractor: {type(ex).__name__}")


def _node_from_json(d) -> Extractor:
    t = d["type"]
    if t == "numeric":
        return NumericExtractor(d["center"], d["scale"])
    if t == "categorical":
        return CategoricalExtractor(tuple(d["vocabulary"]))
    if t == "ngram":
        return NGramExtractor(d["n"], d["base"], d["hash_dim"], d["normalize"])
    if t == "stringify":
        return StringifyExtractor(_node_from_json(d["inner"]))
    if t == "list":
        return ListExtractor(_node_from_json(d["child"]))
    if t == "dict":
        return DictExtractor({k: _node_from_json(v) for k, v in d["entries"].items()})
    raise InvalidFormat(f"unknown extractor node type {t!r}")


def extractor_dumps(ex: Extractor) -> str:
    doc = {"format": EXTRACTOR_FORMAT, "root": _node_to_json(ex)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def extractor_loads(text: str) -> Extractor:
    doc = json.loads(text)
    if not isinstance(doc, dict) or doc.get("format") != EXTRACTOR_FORMAT:
        raise InvalidFormat(f"expected format header {EXTRACTOR_FORMAT!r}")
    return _node_from_json(doc["root"])


def save_extractor(ex: Extractor, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(extractor_dumps(ex))
        fh.write("\n")


def load_extractor(path) -> Extractor:
    with open(path, "r", encoding="utf-8") as fh:
        return extractor_loads(fh.read())
