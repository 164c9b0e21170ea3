"""Batched hierarchical data containers and their batching/slicing algebra.

A batch of samples is a tree of nodes. Leaves hold per-sample feature columns
(samples are matrix *columns*, stored column-major so per-bag reductions scan
contiguous memory), bags hold a child batch plus half-open segment ranges (one
per bag), and products hold one child batch per dictionary key. Nodes are
immutable after construction; all operations here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import IndexOutOfRange, ShapeMismatch

# One-hot index marker for an absent categorical value.
MISSING = -1

FLOAT = np.float32


def _as_columns(values) -> np.ndarray:
    arr = np.asfortranarray(values, dtype=FLOAT)
    if arr.ndim != 2:
        raise ValueError(f"dense leaf expects a 2-d matrix, got ndim={arr.ndim}")
    return arr


def _as_mask(mask, ncols: int) -> np.ndarray:
    arr = np.asarray(mask, dtype=bool).reshape(-1)
    if arr.shape[0] != ncols:
        raise ValueError(f"missing mask has {arr.shape[0]} entries for {ncols} columns")
    return arr


@dataclass(frozen=True)
class DenseMatrix:
    """Feature-dim x sample-count float32 matrix, column-major."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_columns(self.values))

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[0]

    def take(self, idx: np.ndarray) -> "DenseMatrix":
        return DenseMatrix(self.values[:, idx])

    def densify(self, dtype=FLOAT) -> np.ndarray:
        return np.asarray(self.values, dtype=dtype)

    def _violations(self, path: str) -> list[str]:
        return []


@dataclass(frozen=True)
class OneHotMatrix:
    """Per-column category index into a one-hot space of size vocab_size.

    An index equal to MISSING marks an absent value; the paired ArrayNode mask
    carries the same information for the model's imputation path.
    """

    vocab_size: int
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int32).reshape(-1))

    @property
    def ncols(self) -> int:
        return self.indices.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.vocab_size

    def take(self, idx: np.ndarray) -> "OneHotMatrix":
        return OneHotMatrix(self.vocab_size, self.indices[idx])

    def densify(self, dtype=FLOAT) -> np.ndarray:
        out = np.zeros((self.vocab_size, self.ncols), dtype=dtype, order="F")
        cols = np.nonzero(self.indices != MISSING)[0]
        out[self.indices[cols], cols] = 1
        return out

    def _violations(self, path: str) -> list[str]:
        out = []
        bad = (self.indices != MISSING) & ((self.indices < 0) | (self.indices >= self.vocab_size))
        if bad.any():
            cols = np.nonzero(bad)[0][:5].tolist()
            out.append(f"{path}: one-hot indices out of range at columns {cols}")
        return out


@dataclass(frozen=True)
class NGramCountMatrix:
    """Per-column sparse (index, count) pairs in a hashed space of size hash_dim.

    CSC-style storage: column j owns indices[indptr[j]:indptr[j+1]] with the
    matching values; indices are strictly increasing within a column.
    """

    hash_dim: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indptr", np.asarray(self.indptr, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int32).reshape(-1))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=FLOAT).reshape(-1))

    @property
    def ncols(self) -> int:
        return self.indptr.shape[0] - 1

    @property
    def feature_dim(self) -> int:
        return self.hash_dim

    def take(self, idx: np.ndarray) -> "NGramCountMatrix":
        lens = np.diff(self.indptr)[idx]
        indptr = np.zeros(len(idx) + 1, dtype=np.int64)
        np.cumsum(lens, out=indptr[1:])
        gather = _ranges_to_indices(self.indptr[idx], self.indptr[np.asarray(idx) + 1])
        return NGramCountMatrix(self.hash_dim, indptr, self.indices[gather], self.values[gather])

    def densify(self, dtype=FLOAT) -> np.ndarray:
        out = np.zeros((self.hash_dim, self.ncols), dtype=dtype, order="F")
        cols = np.repeat(np.arange(self.ncols), np.diff(self.indptr))
        out[self.indices, cols] = self.values
        return out

    def _violations(self, path: str) -> list[str]:
        out = []
        if self.indptr[0] != 0 or (np.diff(self.indptr) < 0).any():
            out.append(f"{path}: ngram indptr is not monotone from 0")
            return out
        if self.indptr[-1] != len(self.indices) or len(self.indices) != len(self.values):
            out.append(f"{path}: ngram indptr/indices/values lengths disagree")
            return out
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.hash_dim):
            out.append(f"{path}: ngram indices exceed hash dim {self.hash_dim}")
        for j in range(self.ncols):
            col = self.indices[self.indptr[j]:self.indptr[j + 1]]
            if len(col) > 1 and not (np.diff(col) > 0).all():
                out.append(f"{path}: ngram indices not strictly increasing in column {j}")
                break
        return out


LeafMatrix = Union[DenseMatrix, OneHotMatrix, NGramCountMatrix]


def _ranges_to_indices(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Concatenate arange(lo[i], hi[i]) for all i, preserving order."""
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    lens = hi - lo
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    ends = np.cumsum(lens)
    # each output slot t in range i equals lo[i] + (t - start-of-range-i)
    return np.repeat(lo - (ends - lens), lens) + np.arange(total)


@dataclass(frozen=True)
class ArrayNode:
    """Leaf batch: a leaf matrix plus a per-column missing mask."""

    data: LeafMatrix
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", _as_mask(self.mask, self.data.ncols))


def _as_segments(segments) -> np.ndarray:
    arr = np.asarray(segments, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("segments must be an (n, 2) array of [lo, hi) ranges")
    return arr


@dataclass(frozen=True)
class BagNode:
    """Bag batch: child instances plus one half-open column range per bag."""

    child: "DataNode"
    segments: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "segments", _as_segments(self.segments))

    @property
    def lengths(self) -> np.ndarray:
        return self.segments[:, 1] - self.segments[:, 0]


@dataclass(frozen=True)
class ProductNode:
    """Dictionary batch: one aligned child batch per key, keys kept sorted."""

    entries: dict[str, "DataNode"]

    def __post_init__(self):
        object.__setattr__(self, "entries", {k: self.entries[k] for k in sorted(self.entries)})

    @property
    def keys(self) -> list[str]:
        return list(self.entries)


DataNode = Union[ArrayNode, BagNode, ProductNode]


def sample_count(node: DataNode) -> int:
    """Number of top-level samples in the batch."""
    if isinstance(node, ArrayNode):
        return node.data.ncols
    if isinstance(node, BagNode):
        return node.segments.shape[0]
    if isinstance(node, ProductNode):
        if not node.entries:
            return 0
        return sample_count(next(iter(node.entries.values())))
    raise TypeError(f"not a data node: {type(node).__name__}")


def _leaf_concat(mats: list[LeafMatrix], path: str) -> LeafMatrix:
    first = mats[0]
    kinds = {type(m) for m in mats}
    if len(kinds) > 1:
        raise ShapeMismatch(f"{path}: mixed leaf kinds {sorted(k.__name__ for k in kinds)}")
    dims = {m.feature_dim for m in mats}
    if len(dims) > 1:
        raise ShapeMismatch(f"{path}: leaf dimensions differ: {sorted(dims)}")
    if isinstance(first, DenseMatrix):
        return DenseMatrix(np.concatenate([m.values for m in mats], axis=1))
    if isinstance(first, OneHotMatrix):
        return OneHotMatrix(first.vocab_size, np.concatenate([m.indices for m in mats]))
    nnz = np.concatenate([[0]] + [np.diff(m.indptr) for m in mats]).astype(np.int64)
    return NGramCountMatrix(
        first.hash_dim,
        np.cumsum(nnz),
        np.concatenate([m.indices for m in mats]),
        np.concatenate([m.values for m in mats]),
    )


def concat_samples(nodes: list[DataNode]) -> DataNode:
    """Concatenate structurally congruent batches into one batch.

    Bag segments are re-based so child columns stay contiguous; leaf columns
    are copied in input order. Raises ShapeMismatch on variant, dimension, or
    key-set disagreement.
    """
    return _concat(nodes, "$")


def _concat(nodes: list[DataNode], path: str) -> DataNode:
    if not nodes:
        raise ValueError("concat_samples needs at least one node")
    first = nodes[0]
    if len({type(n) for n in nodes}) > 1:
        raise ShapeMismatch(f"{path}: mixed node variants {sorted(type(n).__name__ for n in nodes)}")
    if isinstance(first, ArrayNode):
        data = _leaf_concat([n.data for n in nodes], path)
        return ArrayNode(data, np.concatenate([n.mask for n in nodes]))
    if isinstance(first, BagNode):
        child = _concat([n.child for n in nodes], path + "[]")
        counts = np.array([sample_count(n.child) for n in nodes], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        segs = np.concatenate([n.segments + off for n, off in zip(nodes, offsets)])
        return BagNode(child, segs)
    keysets = {tuple(n.keys) for n in nodes}
    if len(keysets) > 1:
        raise ShapeMismatch(f"{path}: product key sets differ: {sorted(keysets)}")
    return ProductNode({
        k: _concat([n.entries[k] for n in nodes], f"{path}.{k}") for k in first.keys
    })


def slice_samples(node: DataNode, indices) -> DataNode:
    """Select samples by index, in order; duplicates allowed.

    For bags, child columns of the selected segments are gathered and the
    segments re-based onto the gathered child.
    """
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = sample_count(node)
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise IndexOutOfRange(f"sample index out of range for batch of {n}")
    return _slice(node, idx)


def _slice(node: DataNode, idx: np.ndarray) -> DataNode:
    if isinstance(node, ArrayNode):
        return ArrayNode(node.data.take(idx), node.mask[idx])
    if isinstance(node, BagNode):
        lo = node.segments[idx, 0]
        hi = node.segments[idx, 1]
        child_idx = _ranges_to_indices(lo, hi)
        lens = hi - lo
        segs = np.zeros((len(idx), 2), dtype=np.int64)
        segs[:, 1] = np.cumsum(lens)
        segs[1:, 0] = segs[:-1, 1]
        return BagNode(_slice(node.child, child_idx), segs)
    return ProductNode({k: _slice(v, idx) for k, v in node.entries.items()})


def validate(node: DataNode) -> list[str]:
    """Return every invariant violation, each tagged with the node's path.

    An empty list means the node is well formed.
    """
    out: list[str] = []
    _validate(node, "$", out)
    return out


def _validate(node: DataNode, path: str, out: list[str]) -> None:
    if isinstance(node, ArrayNode):
        if node.mask.shape[0] != node.data.ncols:
            out.append(f"{path}: mask length {node.mask.shape[0]} != column count {node.data.ncols}")
        out.extend(node.data._violations(path))
        return
    if isinstance(node, BagNode):
        segs = node.segments
        child_n = sample_count(node.child)
        if (segs[:, 0] > segs[:, 1]).any():
            out.append(f"{path}: segment with lo > hi")
        prev = 0
        for lo, hi in segs:
            if lo != prev:
                out.append(f"{path}: segments leave range [{min(prev, lo)}, {max(prev, lo)}) "
                           f"uncovered or overlapped")
                break
            prev = hi
        else:
            if prev != child_n:
                out.append(f"{path}: segments cover [0, {prev}) but child has {child_n} columns")
        _validate(node.child, path + "[]", out)
        return
    if isinstance(node, ProductNode):
        if not node.entries:
            out.append(f"{path}: product node with no entries")
            return
        counts = {k: sample_count(v) for k, v in node.entries.items()}
        if len(set(counts.values())) > 1:
            out.append(f"{path}: children disagree on sample count: {counts}")
        for k, v in node.entries.items():
            _validate(v, f"{path}.{k}", out)
        return
    out.append(f"{path}: not a data node: {type(node).__name__}")


def data_equal(a: DataNode, b: DataNode) -> bool:
    """Bit-exact structural equality (values, masks, segments, keys)."""
    if type(a) is not type(b):
        return False
    if isinstance(a, ArrayNode):
        if type(a.data) is not type(b.data) or not np.array_equal(a.mask, b.mask):
            return False
        if isinstance(a.data, DenseMatrix):
            return np.array_equal(a.data.values, b.data.values)
        if isinstance(a.data, OneHotMatrix):
            return a.data.vocab_size == b.data.vocab_size and np.array_equal(a.data.indices, b.data.indices)
        return (a.data.hash_dim == b.data.hash_dim
                and np.array_equal(a.data.indptr, b.data.indptr)
                and np.array_equal(a.data.indices, b.data.indices)
                and np.array_equal(a.data.values, b.data.values))
    if isinstance(a, BagNode):
        return np.array_equal(a.segments, b.segments) and data_equal(a.child, b.child)
    return a.keys == b.keys and all(data_equal(a.entries[k], b.entries[k]) for k in a.keys)
