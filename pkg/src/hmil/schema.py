"""Streaming schema inference over a corpus of JSON documents.

A schema records, per position in the document tree, how often the position
occurs, what kind of values appear there, capped value histograms, list-length
histograms, and numeric statistics. Container-kind conflicts (a position that
is a leaf in one document and a list in another) fork into a polymorphic node;
leaf-kind conflicts (int vs string) stay inside one leaf node.

Numeric statistics are kept as exact rational accumulators so that merging
partial schemas is exactly commutative and associative; mean and variance are
derived on read. Histograms are exact until they hit the configured cap, after
which the node is flagged saturated.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Union

from .errors import DepthExceeded, InvalidFormat, ParseError

SCHEMA_FORMAT = "hmil-schema/1"

LEAF_KINDS = ("null", "bool", "integer", "real", "string")


@dataclass
class SchemaConfig:
    max_distinct: int = 1000
    max_depth: int = 64


DEFAULT_CONFIG = SchemaConfig()


def value_key(v) -> str:
    """Canonical histogram/vocabulary key for a leaf value."""
    if isinstance(v, str):
        return v
    return json.dumps(v)


def leaf_kind(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, int):
        return "integer"
    if isinstance(v, float):
        return "real"
    if isinstance(v, str):
        return "string"
    raise TypeError(f"not a JSON leaf: {type(v).__name__}")


@dataclass
class NumericStats:
    """Exact accumulators over numeric leaf occurrences."""

    count: int = 0
    total: Fraction = Fraction(0)
    total_sq: Fraction = Fraction(0)
    vmin: Optional[Union[int, float]] = None
    vmax: Optional[Union[int, float]] = None

    def add(self, x) -> None:
        if isinstance(x, float) and not math.isfinite(x):
            return
        xf = Fraction(x)
        self.count += 1
        self.total += xf
        self.total_sq += xf * xf
        self.vmin = x if self.vmin is None or x < self.vmin else self.vmin
        self.vmax = x if self.vmax is None or x > self.vmax else self.vmax

    def merge(self, other: "NumericStats") -> "NumericStats":
        out = NumericStats(self.count + other.count, self.total + other.total,
                           self.total_sq + other.total_sq)
        mins = [m for m in (self.vmin, other.vmin) if m is not None]
        maxs = [m for m in (self.vmax, other.vmax) if m is not None]
        out.vmin = min(mins) if mins else None
        out.vmax = max(maxs) if maxs else None
        return out

    @property
    def mean(self) -> float:
        return float(self.total / self.count) if self.count else 0.0

    @property
    def variance(self) -> float:
        if not self.count:
            return 0.0
        var = self.total_sq / self.count - (self.total / self.count) ** 2
        return float(var)

    @property
    def stddev(self) -> float:
        return math.sqrt(max(self.variance, 0.0))


@dataclass
class LeafSchema:
    count: int = 0
    kinds: dict[str, int] = field(default_factory=dict)
    histogram: dict[str, int] = field(default_factory=dict)
    saturated: bool = False
    stats: NumericStats = field(default_factory=NumericStats)

    shape = "leaf"

    @property
    def numeric_ratio(self) -> float:
        if not self.count:
            return 0.0
        return (self.kinds.get("integer", 0) + self.kinds.get("real", 0)) / self.count


@dataclass
class ListSchema:
    count: int = 0
    lengths: dict[int, int] = field(default_factory=dict)
    child: Optional["SchemaNode"] = None

    shape = "list"


@dataclass
class DictEntry:
    present: int = 0
    child: Optional["SchemaNode"] = None


@dataclass
class DictSchema:
    count: int = 0
    entries: dict[str, DictEntry] = field(default_factory=dict)

    shape = "dict"


@dataclass
class PolymorphicSchema:
    """Container-kind disagreement at one position: one branch per shape."""

    branches: dict[str, "SchemaNode"] = field(default_factory=dict)

    shape = "poly"


SchemaNode = Union[LeafSchema, ListSchema, DictSchema, PolymorphicSchema]


def total_count(schema: Optional[SchemaNode]) -> int:
    if schema is None:
        return 0
    if isinstance(schema, PolymorphicSchema):
        return sum(total_count(b) for b in schema.branches.values())
    return schema.count


def _value_shape(v) -> str:
    if isinstance(v, dict):
        return "dict"
    if isinstance(v, list):
        return "list"
    return "leaf"


def _new_node(shape: str) -> SchemaNode:
    return {"leaf": LeafSchema, "list": ListSchema, "dict": DictSchema}[shape]()


def update_schema(schema: Optional[SchemaNode], doc,
                  config: SchemaConfig = DEFAULT_CONFIG) -> SchemaNode:
    """Fold one parsed JSON document into the schema (in place) and return it.

    Pass None to start a fresh schema. Raises DepthExceeded for nesting beyond
    config.max_depth.
    """
    return _update(schema, doc, config, 1)


def _update(schema, value, cfg: SchemaConfig, depth: int):
    shape = _value_shape(value)
    if shape != "leaf" and depth > cfg.max_depth:
        raise DepthExceeded(f"container nesting exceeds max depth {cfg.max_depth}")
    if isinstance(schema, PolymorphicSchema):
        schema.branches[shape] = _update(schema.branches.get(shape), value, cfg, depth)
        return schema
    if schema is None:
        schema = _new_node(shape)
    elif schema.shape != shape:
        return _update(PolymorphicSchema({schema.shape: schema}), value, cfg, depth)

    if shape == "leaf":
        kind = leaf_kind(value)
        schema.count += 1
        schema.kinds[kind] = schema.kinds.get(kind, 0) + 1
        key = value_key(value)
        if key in schema.histogram:
            schema.histogram[key] += 1
        elif len(schema.histogram) < cfg.max_distinct:
            schema.histogram[key] = 1
        else:
            schema.saturated = True
        if kind in ("integer", "real"):
            schema.stats.add(value)
    elif shape == "list":
        schema.count += 1
        n = len(value)
        schema.lengths[n] = schema.lengths.get(n, 0) + 1
        for item in value:
            schema.child = _update(schema.child, item, cfg, depth + 1)
    else:
        schema.count += 1
        for k, v in value.items():
            entry = schema.entries.get(k)
            if entry is None:
                entry = schema.entries[k] = DictEntry()
            entry.present += 1
            entry.child = _update(entry.child, v, cfg, depth + 1)
    return schema


def _cap_histogram(hist: dict[str, int], cap: int) -> tuple[dict[str, int], bool]:
    if len(hist) <= cap:
        return hist, False
    kept = sorted(hist.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return dict(sorted(kept)), True


def merge_schemas(a: Optional[SchemaNode], b: Optional[SchemaNode],
                  config: SchemaConfig = DEFAULT_CONFIG) -> Optional[SchemaNode]:
    """Combine two independently accumulated schemas; inputs are not mutated.

    Counters add, histograms add and re-cap deterministically (largest counts
    kept, ties by key), numeric accumulators add exactly. Mismatched shapes
    fork into a polymorphic node.
    """
    if a is None:
        return _copy(b)
    if b is None:
        return _copy(a)
    if isinstance(a, PolymorphicSchema) or isinstance(b, PolymorphicSchema) or a.shape != b.shape:
        branches_a = a.branches if isinstance(a, PolymorphicSchema) else {a.shape: a}
        branches_b = b.branches if isinstance(b, PolymorphicSchema) else {b.shape: b}
        return PolymorphicSchema({
            s: merge_schemas(branches_a.get(s), branches_b.get(s), config)
            for s in sorted(set(branches_a) | set(branches_b))
        })
    if isinstance(a, LeafSchema):
        kinds = dict(a.kinds)
        for k, v in b.kinds.items():
            kinds[k] = kinds.get(k, 0) + v
        hist = dict(a.histogram)
        for k, v in b.histogram.items():
            hist[k] = hist.get(k, 0) + v
        hist, overflowed = _cap_histogram(hist, config.max_distinct)
        return LeafSchema(a.count + b.count, kinds, hist,
                          a.saturated or b.saturated or overflowed,
                          a.stats.merge(b.stats))
    if isinstance(a, ListSchema):
        lengths = dict(a.lengths)
        for k, v in b.lengths.items():
            lengths[k] = lengths.get(k, 0) + v
        return ListSchema(a.count + b.count, lengths,
                          merge_schemas(a.child, b.child, config))
    entries = {}
    for k in sorted(set(a.entries) | set(b.entries)):
        ea = a.entries.get(k, DictEntry())
        eb = b.entries.get(k, DictEntry())
        entries[k] = DictEntry(ea.present + eb.present,
                               merge_schemas(ea.child, eb.child, config))
    return DictSchema(a.count + b.count, entries)


def _copy(schema: Optional[SchemaNode]) -> Optional[SchemaNode]:
    if schema is None:
        return None
    if isinstance(schema, LeafSchema):
        return LeafSchema(schema.count, dict(schema.kinds), dict(schema.histogram),
                          schema.saturated,
                          NumericStats(schema.stats.count, schema.stats.total,
                                       schema.stats.total_sq, schema.stats.vmin,
                                       schema.stats.vmax))
    if isinstance(schema, ListSchema):
        return ListSchema(schema.count, dict(schema.lengths), _copy(schema.child))
    if isinstance(schema, DictSchema):
        return DictSchema(schema.count, {
            k: DictEntry(e.present, _copy(e.child)) for k, e in schema.entries.items()
        })
    return PolymorphicSchema({s: _copy(b) for s, b in schema.branches.items()})


def schema_of(corpus: Iterable, config: SchemaConfig = DEFAULT_CONFIG) -> Optional[SchemaNode]:
    """Fold a corpus of parsed documents into a schema; None for an empty corpus.

    Parse errors raised by a document iterator (see iter_jsonl, iter_json_dir)
    propagate with their location intact.
    """
    schema = None
    for doc in corpus:
        schema = update_schema(schema, doc, config)
    return schema


def iter_jsonl(path) -> Iterable:
    """Yield parsed documents from a JSONL file, skipping blank lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"line {lineno}: {e}", line=lineno) from e


def iter_json_dir(path) -> Iterable:
    """Yield parsed documents from every .json file in a directory (sorted)."""
    names = sorted(n for n in os.listdir(path) if n.endswith(".json"))
    for name in names:
        full = os.path.join(path, name)
        with open(full, "r", encoding="utf-8") as fh:
            try:
                yield json.load(fh)
            except json.JSONDecodeError as e:
                raise ParseError(f"{name}: {e}") from e


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _stats_to_json(s: NumericStats) -> dict:
    return {
        "count": s.count,
        "sum": [s.total.numerator, s.total.denominator],
        "sum_sq": [s.total_sq.numerator, s.total_sq.denominator],
        "min": s.vmin,
        "max": s.vmax,
    }


def _stats_from_json(d: dict) -> NumericStats:
    return NumericStats(d["count"], Fraction(*d["sum"]), Fraction(*d["sum_sq"]),
                        d["min"], d["max"])


def _node_to_json(schema: Optional[SchemaNode]):
    if schema is None:
        return None
    if isinstance(schema, LeafSchema):
        return {"type": "leaf", "count": schema.count, "kinds": schema.kinds,
                "histogram": schema.histogram, "saturated": schema.saturated,
                "stats": _stats_to_json(schema.stats)}
    if isinstance(schema, ListSchema):
        return {"type": "list", "count": schema.count,
                "lengths": {str(k): v for k, v in schema.lengths.items()},
                "child": _node_to_json(schema.child)}
    if isinstance(schema, DictSchema):
        return {"type": "dict", "count": schema.count,
                "entries": {k: {"present": e.present, "child": _node_to_json(e.child)}
                            for k, e in schema.entries.items()}}
    return {"type": "poly",
            "branches": {s: _node_to_json(b) for s, b in schema.branches.items()}}


def _node_from_json(d) -> Optional[SchemaNode]:
    if d is None:
        return None
    t = d["type"]
    if t == "leaf":
        return LeafSchema(d["count"], dict(d["kinds"]), dict(d["histogram"]),
                          d["saturated"], _stats_from_json(d["stats"]))
    if t == "list":
        return ListSchema(d["count"], {int(k): v for k, v in d["lengths"].items()},
                          _node_from_json(d["child"]))
    if t == "dict":
        return DictSchema(d["count"], {
            k: DictEntry(e["present"], _node_from_json(e["child"]))
            for k, e in d["entries"].items()
        })
    if t == "poly":
        return PolymorphicSchema({s: _node_from_json(b) for s, b in d["branches"].items()})
    raise InvalidFormat(f"unknown schema node type {t!r}")


def schema_dumps(schema: Optional[SchemaNode]) -> str:
    """Canonical serialized form; byte-identical for equal schemas."""
    doc = {"format": SCHEMA_FORMAT, "root": _node_to_json(schema)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def schema_loads(text: str) -> Optional[SchemaNode]:
    doc = json.loads(text)
    if not isinstance(doc, dict) or doc.get("format") != SCHEMA_FORMAT:
        raise InvalidFormat(f"expected format header {SCHEMA_FORMAT!r}")
    return _node_from_json(doc["root"])


def save_schema(schema: Optional[SchemaNode], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(schema_dumps(schema))
        fh.write("\n")


def load_schema(path) -> Optional[SchemaNode]:
    with open(path, "r", encoding="utf-8") as fh:
        return schema_loads(fh.read())
