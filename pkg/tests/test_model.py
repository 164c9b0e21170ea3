import numpy as np
import pytest

from genutil import permute_within_bags, quadratic_loss, random_case
from hmil.bundle import ModelBundle, load_model, save_model
from hmil.data import (
    ArrayNode,
    BagNode,
    DenseMatrix,
    ProductNode,
    concat_samples,
    sample_count,
)
from hmil.engine import Parameter, backward
from hmil.errors import CorruptContainer, ShapeMismatch, VersionMismatch
from hmil.extract import (
    DictExtractor,
    ListExtractor,
    NumericExtractor,
    extract,
    extract_batch,
)
from hmil.model import (
    ArrayModel,
    BagModel,
    Classifier,
    ClassifierHead,
    DenseLayer,
    ModelConfig,
    collect_params,
    convert_dtype,
    forward,
    grad_check,
    make_classifier_head,
    predict,
    reflect_in_model,
)


def dense_node(cols, mask=None):
    arr = np.array(cols, dtype=np.float32).T
    return ArrayNode(DenseMatrix(arr), mask if mask is not None else np.zeros(arr.shape[1], bool))


def identity_layer(dim, name):
    return DenseLayer(Parameter(np.eye(dim, dtype=np.float32), f"{name}.weights"),
                      Parameter(np.zeros(dim, np.float32), f"{name}.bias"), "identity")


def identity_array_model(dim, path="$[]"):
    return ArrayModel([identity_layer(dim, f"{path}.layers.0")],
                      Parameter(np.zeros(dim, np.float32), f"{path}.imputation"))


def identity_bag_model(dim, mode):
    pooled = dim * (2 if mode == "meanmax" else 1)
    return BagModel(mode, identity_array_model(dim),
                    [identity_layer(pooled, "$.bag.post.0")],
                    Parameter(np.zeros(pooled, np.float32), "$.bag.empty"))


class TestReflect:
    def test_leaf_dims_from_sample(self):
        model = reflect_in_model(dense_node([[1, 2, 3, 4]]))
        assert isinstance(model, ArrayModel)
        assert model.layers[0].weights.value.shape == (32, 4)
        assert model.embed_dim == 32

    def test_bag_dimension_arithmetic(self):
        # meanmax doubles the pooled width feeding the post chain
        sample = BagNode(dense_node([[1, 2, 3, 4]]), np.array([[0, 1]]))
        model = reflect_in_model(sample)
        assert model.post[0].weights.value.shape == (32, 64)
        assert model.empty_vec.value.shape == (64,)
        assert model.embed_dim == 32

    def test_product_combiner_input(self):
        sample = ProductNode({"a": dense_node([[1]]), "b": dense_node([[1, 2]])})
        model = reflect_in_model(sample)
        assert model.combiner[0].weights.value.shape == (32, 64)

    def test_deterministic_given_seed(self):
        sample = ProductNode({"a": dense_node([[1, 2]])})
        m1 = reflect_in_model(sample, ModelConfig(seed=9))
        m2 = reflect_in_model(sample, ModelConfig(seed=9))
        for p1, p2 in zip(collect_params(m1), collect_params(m2)):
            assert p1.name == p2.name
            assert np.array_equal(p1.value, p2.value)

    def test_invalid_sample_rejected(self):
        bad = BagNode(dense_node([[1], [2]]), np.array([[0, 1]]))  # uncovered column
        with pytest.raises(ValueError, match="invalid"):
            reflect_in_model(bad)


class TestForward:
    def test_mean_aggregation(self):
        data = BagNode(dense_node([[1, 2], [3, 4]]), np.array([[0, 2]]))
        out, _ = forward(identity_bag_model(2, "mean"), data)
        assert np.allclose(out[:, 0], [2.0, 3.0])

    def test_max_aggregation(self):
        data = BagNode(dense_node([[1, 2], [3, 4]]), np.array([[0, 2]]))
        out, _ = forward(identity_bag_model(2, "max"), data)
        assert np.allclose(out[:, 0], [3.0, 4.0])

    def test_empty_bag_output_is_post_of_empty_vector(self):
        model = identity_bag_model(2, "mean")
        model.empty_vec.value[:] = [5.0, -1.0]
        empty_child = ArrayNode(DenseMatrix(np.zeros((2, 0), np.float32)), np.zeros(0, bool))
        out, _ = forward(model, BagNode(empty_child, np.array([[0, 0]])))
        assert np.allclose(out[:, 0], [5.0, -1.0])

    def test_variant_mismatch_reports_path(self):
        sample = ProductNode({"a": dense_node([[1]])})
        model = reflect_in_model(sample)
        with pytest.raises(ShapeMismatch, match=r"\$\.a"):
            forward(model, ProductNode({"a": BagNode(dense_node([[1]]), np.array([[0, 1]]))}))

    def test_missing_column_takes_imputation(self):
        model = identity_array_model(2, "$")
        model.imputation.value[:] = [9.0, 9.0]
        data = dense_node([[1, 2], [0, 0]], mask=np.array([False, True]))
        out, _ = forward(model, data)
        assert np.allclose(out[:, 1], [9.0, 9.0])


class TestBackward:
    def test_linear_layer_weight_gradient(self):
        # identity activation: dL/dW = upstream @ input^T
        model = identity_array_model(2, "$")
        data = dense_node([[1, 2], [3, 4]])
        _, tape = forward(model, data)
        upstream = np.array([[1, 0], [0, 2]], dtype=np.float32)
        grads = backward(tape, upstream)
        x = data.data.values
        assert np.allclose(grads["$.layers.0.weights"], upstream @ x.T)
        assert np.allclose(grads["$.layers.0.bias"], upstream.sum(axis=1))

    def test_mean_bag_distributes_half(self):
        model = identity_bag_model(1, "mean")
        data = BagNode(dense_node([[1], [5]]), np.array([[0, 2]]))
        _, tape = forward(model, data)
        grads = backward(tape, np.array([[2.0]], dtype=np.float32))
        # each member contributed x/2; child layer weight grad = sum(upstream/2 * x)
        assert np.allclose(grads["$[].layers.0.weights"], [[1.0 * 1 + 1.0 * 5]])

    def test_imputation_gradient_locality(self):
        # tanh keeps the substituted zero column off any activation kink
        ex = DictExtractor({"a": NumericExtractor()})
        model = reflect_in_model(extract_batch(ex, [{"a": 1.0}, {"a": 2.0}]),
                                 ModelConfig(embed_dim=4, seed=1, activation="tanh"))
        full = extract_batch(ex, [{"a": 1.0}, {"a": 2.0}])
        _, tape = forward(model, full)
        grads = backward(tape, np.ones((4, 2), np.float32))
        assert np.array_equal(grads["$.a.imputation"], np.zeros(1, np.float32))

        holed = extract_batch(ex, [{"a": 1.0}, {}])
        _, tape = forward(model, holed)
        grads = backward(tape, np.ones((4, 2), np.float32))
        assert np.abs(grads["$.a.imputation"]).max() > 0

    def test_empty_bag_gradient_locality(self):
        ex = ListExtractor(NumericExtractor())
        model = reflect_in_model(extract_batch(ex, [[1.0], [2.0]]),
                                 ModelConfig(embed_dim=3, seed=2, activation="tanh"))
        _, tape = forward(model, extract_batch(ex, [[1.0], [2.0]]))
        grads = backward(tape, np.ones((3, 2), np.float32))
        assert np.array_equal(grads["$.bag.empty"], np.zeros_like(grads["$.bag.empty"]))

        _, tape = forward(model, extract_batch(ex, [[1.0], []]))
        grads = backward(tape, np.ones((3, 2), np.float32))
        assert np.abs(grads["$.bag.empty"]).max() > 0


class TestGradCheck:
    def test_linear_model_quadratic_loss(self):
        model = convert_dtype(identity_array_model(2, "$"), np.float64)
        data = dense_node([[1, 2], [3, 4], [0, 1]])
        target = np.full((2, 3), 0.25)
        err = grad_check(model, data, quadratic_loss(target), epsilon=1e-5)
        assert err < 1e-5

    def test_full_model_64bit(self):
        _, _, clf, data = random_case(seed=11)
        clf64 = convert_dtype(clf, np.float64)
        out, _ = forward(clf64, data)
        loss = quadratic_loss(np.linspace(-1, 1, out.size).reshape(out.shape))
        assert grad_check(clf64, data, loss, epsilon=1e-3, max_params=120, seed=5) <= 1e-4

    def test_full_model_32bit_against_64bit_reference(self):
        _, _, clf, data = random_case(seed=12)
        out, _ = forward(clf, data)
        loss = quadratic_loss(np.linspace(-1, 1, out.size).reshape(out.shape))
        err = grad_check(clf, data, loss, epsilon=1e-3, max_params=120, seed=6,
                         fd_model=convert_dtype(clf, np.float64))
        assert err <= 2e-2

    def test_relu_default_config_away_from_kinks(self):
        # default activation; biases nudged off zero so no missing/empty case
        # sits exactly on the relu kink where central differences break down
        docs = [{"a": 1.5, "b": [2.0, 3.0]}, {"a": -0.5, "b": [0.75]}, {"b": [1.0]}]
        ex = DictExtractor({"a": NumericExtractor(), "b": ListExtractor(NumericExtractor())})
        data = extract_batch(ex, docs)
        model = convert_dtype(reflect_in_model(data, ModelConfig(embed_dim=6, seed=3)),
                              np.float64)
        nudge = np.random.default_rng(8)
        for p in collect_params(model):
            if p.name.endswith(".bias") or p.name.endswith("imputation"):
                p.value += nudge.uniform(0.05, 0.2, p.value.shape)
        out, _ = forward(model, data)
        loss = quadratic_loss(np.ones(out.shape) * 0.1)
        assert grad_check(model, data, loss, epsilon=1e-4, seed=7) <= 1e-4

    def test_zero_parameter_subsample_warns(self):
        model = identity_array_model(1, "$")
        data = dense_node([[1.0]])
        with pytest.warns(UserWarning, match="no parameters sampled"):
            err = grad_check(model, data, quadratic_loss(np.zeros((1, 1))), max_params=0)
        assert err == 0.0


class TestPredict:
    def test_zero_samples_zero_columns(self):
        ex = DictExtractor({"a": NumericExtractor()})
        data = extract_batch(ex, [{"a": 1}])
        model = reflect_in_model(data, ModelConfig(embed_dim=4))
        head = make_classifier_head(4, 3)
        logits = predict(model, head, extract_batch(ex, []))
        assert logits.shape == (3, 0)

    def test_duplicated_samples_identical_columns(self):
        _, ex, clf, _ = random_case(seed=21)
        docs = [{"f0": 1.0}] * 3
        logits = predict(clf.model, clf.head, extract_batch(ex, docs))
        assert np.array_equal(logits[:, 0], logits[:, 1])
        assert np.array_equal(logits[:, 0], logits[:, 2])


class TestInvariances:
    @pytest.mark.parametrize("seed", [31, 32, 33, 34])
    def test_permutation_invariance(self, seed):
        _, _, clf, data = random_case(seed=seed)
        rng = np.random.default_rng(seed + 1000)
        shuffled = permute_within_bags(data, rng)
        a, _ = forward(clf, data)
        b, _ = forward(clf, shuffled)
        assert np.abs(a - b).max() <= 1e-5

    @pytest.mark.parametrize("seed", [41, 42, 43])
    def test_batch_equals_stacked_singles(self, seed):
        docs, ex, clf, data = random_case(seed=seed)
        batched, _ = forward(clf, data)
        singles = [forward(clf, extract(ex, d))[0] for d in docs]
        assert np.abs(batched - np.concatenate(singles, axis=1)).max() <= 1e-5

    @pytest.mark.parametrize("seed", [51, 52, 53])
    def test_reflection_congruence(self, seed):
        docs, ex, _, data = random_case(seed=seed)
        model = reflect_in_model(data, ModelConfig(embed_dim=5, seed=seed))
        out, _ = forward(model, data)
        assert out.shape == (5, len(docs))

    def test_argmax_routing_margin(self):
        # perturbing a non-argmax instance by less than the margin leaves the
        # pooled output bit-identical
        model = identity_bag_model(2, "max")
        base = BagNode(dense_node([[10.0, 10.0], [1.0, 1.0]]), np.array([[0, 2]]))
        bumped = BagNode(dense_node([[10.0, 10.0], [1.01, 1.01]]), np.array([[0, 2]]))
        a, _ = forward(model, base)
        b, _ = forward(model, bumped)
        assert np.array_equal(a, b)


class TestBundle:
    def _bundle(self, seed=61):
        docs, ex, clf, data = random_case(seed=seed)
        return ModelBundle(clf.model, clf.head, ex, ["no", "yes"]), docs, data

    def test_round_trip_bit_identical_logits(self):
        bundle, docs, data = self._bundle()
        blob = save_model(bundle)
        loaded = load_model(blob)
        assert loaded.classes == ["no", "yes"]
        a = predict(bundle.model, bundle.head, data)
        b = predict(loaded.model, loaded.head, extract_batch(loaded.extractor, docs))
        assert np.array_equal(a, b)

    def test_save_is_deterministic(self):
        bundle, _, _ = self._bundle()
        assert save_model(bundle) == save_model(bundle)

    def test_truncated_stream(self):
        bundle, _, _ = self._bundle()
        blob = save_model(bundle)
        with pytest.raises(CorruptContainer):
            load_model(blob[: len(blob) // 2])

    def test_bit_flip_detected(self):
        bundle, _, _ = self._bundle()
        blob = bytearray(save_model(bundle))
        blob[len(blob) // 2] ^= 0xFF
        with pytest.raises(CorruptContainer):
            load_model(bytes(blob))

    def test_wrong_version(self):
        bundle, _, _ = self._bundle()
        blob = bytearray(save_model(bundle))
        blob[4] = ord("2")
        with pytest.raises(VersionMismatch):
            load_model(bytes(blob))

    def test_not_a_container(self):
        with pytest.raises(CorruptContainer):
            load_model(b"PNG\x89 definitely not a bundle")
