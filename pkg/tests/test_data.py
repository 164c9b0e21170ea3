import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmil.data import (
    MISSING,
    ArrayNode,
    BagNode,
    DenseMatrix,
    NGramCountMatrix,
    OneHotMatrix,
    ProductNode,
    concat_samples,
    data_equal,
    sample_count,
    slice_samples,
    validate,
)
from hmil.errors import IndexOutOfRange, ShapeMismatch


def dense(cols):
    # cols given sample-first for readability; store as feature x sample
    return ArrayNode(DenseMatrix(np.array(cols, dtype=np.float32).T), np.zeros(len(cols), bool))


def bag(child, segs):
    return BagNode(child, np.array(segs, dtype=np.int64).reshape(-1, 2))


class TestSampleCount:
    def test_array(self):
        assert sample_count(dense([[1, 2], [3, 4], [5, 6]])) == 3

    def test_bag_counts_segments_including_empty(self):
        node = bag(dense([[i] for i in range(5)]), [(0, 2), (2, 2), (2, 5)])
        assert sample_count(node) == 3

    def test_product_shared_child_count(self):
        node = ProductNode({
            "a": dense([[1], [2], [3], [4]]),
            "b": bag(dense([[9]] * 4), [(0, 1), (1, 2), (2, 3), (3, 4)]),
        })
        assert sample_count(node) == 4


class TestConcat:
    def test_column_stacking(self):
        out = concat_samples([dense([[1, 2]]), dense([[3, 4]])])
        assert np.array_equal(out.data.values, np.array([[1, 3], [2, 4]], np.float32))

    def test_bag_rebasing(self):
        # oracle by hand: second bag's child columns shift by the first child's 2 columns,
        # so its segment [0,1) lands at [2,3)
        a = bag(dense([[1], [2]]), [(0, 2)])
        b = bag(dense([[3]]), [(0, 1)])
        out = concat_samples([a, b])
        assert np.array_equal(out.segments, [[0, 2], [2, 3]])
        assert sample_count(out.child) == 3
        assert validate(out) == []

    def test_variant_mismatch(self):
        with pytest.raises(ShapeMismatch):
            concat_samples([dense([[1]]), bag(dense([[1]]), [(0, 1)])])

    def test_leaf_dim_mismatch(self):
        with pytest.raises(ShapeMismatch):
            concat_samples([dense([[1, 2]]), dense([[1]])])

    def test_product_key_mismatch(self):
        with pytest.raises(ShapeMismatch):
            concat_samples([
                ProductNode({"a": dense([[1]])}),
                ProductNode({"b": dense([[1]])}),
            ])


class TestSlice:
    def test_identity_permutation(self):
        node = bag(dense([[1], [2], [3]]), [(0, 1), (1, 3)])
        assert data_equal(slice_samples(node, [0, 1]), node)

    def test_bag_gather_rebased(self):
        # oracle by hand: picking bags (2, 0) gathers child columns (2,3,4) then (0,1)
        node = bag(dense([[0], [1], [2], [3], [4]]), [(0, 2), (2, 2), (2, 5)])
        out = slice_samples(node, [2, 0])
        assert np.array_equal(out.segments, [[0, 3], [3, 5]])
        assert np.array_equal(out.child.data.values[0], [2, 3, 4, 0, 1])

    def test_out_of_range(self):
        node = dense([[1], [2]])
        with pytest.raises(IndexOutOfRange):
            slice_samples(node, [sample_count(node)])

    def test_duplicates_allowed(self):
        node = dense([[1], [2]])
        out = slice_samples(node, [1, 1, 0])
        assert np.array_equal(out.data.values[0], [2, 2, 1])


class TestValidate:
    def test_well_formed(self):
        node = ProductNode({
            "x": bag(dense([[1], [2]]), [(0, 0), (0, 2)]),
            "y": dense([[5], [6]]),
        })
        assert validate(node) == []

    def test_uncovered_child_range(self):
        node = bag(dense([[i] for i in range(5)]), [(0, 2), (2, 4)])
        (violation,) = validate(node)
        assert violation.startswith("$:")
        assert "[0, 4)" in violation and "5" in violation

    def test_product_count_mismatch_names_keys(self):
        node = ProductNode({"a": dense([[1], [2]]), "b": dense([[1], [2], [3]])})
        msgs = "\n".join(validate(node))
        assert "'a'" in msgs and "'b'" in msgs

    def test_onehot_index_overflow(self):
        node = ArrayNode(OneHotMatrix(3, [0, 3]), [False, False])
        assert any("one-hot" in v for v in validate(node))

    def test_ngram_violations(self):
        node = ArrayNode(NGramCountMatrix(10, [0, 2], [4, 2], [1.0, 1.0]), [False])
        assert any("strictly increasing" in v for v in validate(node))


def _leaf_strategy(draw, n):
    kind = draw(st.sampled_from(["dense", "onehot", "ngram"]))
    if kind == "dense":
        d = draw(st.integers(1, 3))
        vals = draw(st.lists(st.lists(st.integers(-9, 9), min_size=d, max_size=d),
                             min_size=n, max_size=n))
        mat = DenseMatrix(np.array(vals, np.float32).reshape(n, d).T)
    elif kind == "onehot":
        v = draw(st.integers(1, 4))
        idx = draw(st.lists(st.integers(-1, 0).flatmap(
            lambda lo: st.integers(lo, v - 1)), min_size=n, max_size=n))
        mat = OneHotMatrix(v, idx)
    else:
        dim = draw(st.integers(2, 6))
        cols = draw(st.lists(st.lists(st.integers(0, dim - 1), max_size=dim, unique=True),
                             min_size=n, max_size=n))
        indptr = np.cumsum([0] + [len(c) for c in cols])
        idx = [i for c in cols for i in sorted(c)]
        mat = NGramCountMatrix(dim, indptr, idx, np.ones(len(idx), np.float32))
    mask = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    return ArrayNode(mat, mask)


@st.composite
def data_nodes(draw, n=None, depth=2):
    if n is None:
        n = draw(st.integers(0, 5))
    kind = draw(st.sampled_from(["array", "bag", "product"] if depth > 0 else ["array"]))
    if kind == "array":
        return _leaf_strategy(draw, n)
    if kind == "bag":
        lens = draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
        segs = np.zeros((n, 2), np.int64)
        segs[:, 1] = np.cumsum(lens)
        segs[1:, 0] = segs[:-1, 1]
        child = draw(data_nodes(n=int(sum(lens)), depth=depth - 1))
        return BagNode(child, segs)
    nkeys = draw(st.integers(1, 3))
    return ProductNode({
        f"k{i}": draw(data_nodes(n=n, depth=depth - 1)) for i in range(nkeys)
    })


@settings(max_examples=60, deadline=None)
@given(data_nodes(), st.randoms(use_true_random=False))
def test_permutation_round_trip(node, rnd):
    n = sample_count(node)
    perm = list(range(n))
    rnd.shuffle(perm)
    inverse = np.argsort(perm)
    back = slice_samples(slice_samples(node, perm), inverse)
    assert data_equal(back, node)
    assert validate(back) == []


@settings(max_examples=60, deadline=None)
@given(data_nodes(), st.data())
def test_split_concat_round_trip(node, data):
    n = sample_count(node)
    k = data.draw(st.integers(0, n))
    left = slice_samples(node, list(range(k)))
    right = slice_samples(node, list(range(k, n)))
    merged = concat_samples([left, right])
    assert data_equal(merged, node)
    assert sample_count(merged) == sample_count(left) + sample_count(right)
    assert validate(merged) == []
