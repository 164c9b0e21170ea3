"""Trainable model trees structurally mirroring batched data nodes.

Every data node variant has a model counterpart producing a fixed-size
embedding per sample: leaves run a dense chain after substituting a trainable
imputation vector into missing columns, bags pool child embeddings with a
permutation-invariant reduction (a trainable vector stands in for empty bags),
and products concatenate child embeddings in key order before a combiner
chain. reflect_in_model builds the whole tree from one representative batch.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .data import ArrayNode, BagNode, DataNode, ProductNode, validate
from .engine import (
    ParamStore,
    Parameter,
    Tape,
    Tensor,
    activate,
    add_bias,
    backward,
    bag_pool,
    concat_rows,
    matmul,
    substitute_missing,
)
from .errors import ShapeMismatch

__all__ = [
    "ModelConfig", "DenseLayer", "ArrayModel", "BagModel", "ProductModel",
    "ModelNode", "ClassifierHead", "Classifier", "reflect_in_model",
    "make_classifier_head", "collect_params", "forward", "backward",
    "predict", "grad_check", "convert_dtype", "model_dtype",
]

ACTIVATIONS = ("identity", "relu", "tanh")
AGGREGATIONS = ("mean", "max", "meanmax")


@dataclass
class ModelConfig:
    embed_dim: int = 32
    activation: str = "relu"
    aggregation: str = "meanmax"
    layers_per_node: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


class DenseLayer:
    def __init__(self, weights: Parameter, bias: Parameter, activation: str):
        self.weights = weights
        self.bias = bias
        self.activation = activation

    @property
    def out_dim(self) -> int:
        return self.weights.value.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.value.shape[1]

    def apply(self, x: Tensor) -> Tensor:
        return activate(add_bias(matmul(self.weights, x), self.bias), self.activation)


class ArrayModel:
    def __init__(self, layers: list[DenseLayer], imputation: Parameter):
        self.layers = layers
        self.imputation = imputation

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_dim


class BagModel:
    def __init__(self, aggregation: str, child: "ModelNode",
                 post: list[DenseLayer], empty_vec: Parameter):
        self.aggregation = aggregation
        self.child = child
        self.post = post
        self.empty_vec = empty_vec

    @property
    def embed_dim(self) -> int:
        return self.post[-1].out_dim


class ProductModel:
    def __init__(self, children: dict[str, "ModelNode"], combiner: list[DenseLayer]):
        self.children = {k: children[k] for k in sorted(children)}
        self.combiner = combiner

    @property
    def embed_dim(self) -> int:
        return self.combiner[-1].out_dim


ModelNode = Union[ArrayModel, BagModel, ProductModel]


class ClassifierHead:
    def __init__(self, layers: list[DenseLayer]):
        self.layers = layers

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_dim


@dataclass
class Classifier:
    """Model tree plus classification head, differentiated as one graph."""

    model: ModelNode
    head: ClassifierHead


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _glorot(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(np.float32)


def _make_chain(rng, dims: list[int], activation: str, path: str) -> list[DenseLayer]:
    layers = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        w = Parameter(_glorot(rng, dout, din), f"{path}.{i}.weights")
        b = Parameter(np.zeros(dout, dtype=np.float32), f"{path}.{i}.bias")
        layers.append(DenseLayer(w, b, activation))
    return layers


def reflect_in_model(sample: DataNode, config: Optional[ModelConfig] = None) -> ModelNode:
    """Build a model tree congruent to the sample's structure.

    Leaf input dimensions are read off the sample's leaf matrices, so any
    valid batch works as the representative sample, missing values included.
    Parameter initialization is deterministic given config.seed.
    """
    config = config or ModelConfig()
    violations = validate(sample)
    if violations:
        raise ValueError("representative sample is invalid: " + "; ".join(violations))
    rng = np.random.default_rng(config.seed)
    return _reflect(sample, config, rng, "$")


def _reflect(node: DataNode, cfg: ModelConfig, rng, path: str) -> ModelNode:
    hidden = [cfg.embed_dim] * cfg.layers_per_node
    if isinstance(node, ArrayNode):
        in_dim = node.data.feature_dim
        layers = _make_chain(rng, [in_dim] + hidden, cfg.activation, f"{path}.layers")
        imputation = Parameter(np.zeros(in_dim, dtype=np.float32), f"{path}.imputation")
        return ArrayModel(layers, imputation)
    if isinstance(node, BagNode):
        child = _reflect(node.child, cfg, rng, f"{path}[]")
        pooled = child.embed_dim * (2 if cfg.aggregation == "meanmax" else 1)
        post = _make_chain(rng, [pooled] + hidden, cfg.activation, f"{path}.bag.post")
        empty = Parameter(np.zeros(pooled, dtype=np.float32), f"{path}.bag.empty")
        return BagModel(cfg.aggregation, child, post, empty)
    children = {k: _reflect(v, cfg, rng, f"{path}.{k}") for k, v in node.entries.items()}
    total = sum(c.embed_dim for c in children.values())
    combiner = _make_chain(rng, [total] + hidden, cfg.activation, f"{path}.combiner")
    return ProductModel(children, combiner)


def make_classifier_head(embed_dim: int, n_classes: int, seed: int = 0) -> ClassifierHead:
    if n_classes < 2:
        raise ValueError("a classifier head needs at least 2 classes")
    rng = np.random.default_rng(seed)
    w = Parameter(_glorot(rng, n_classes, embed_dim), "head.0.weights")
    b = Parameter(np.zeros(n_classes, dtype=np.float32), "head.0.bias")
    return ClassifierHead([DenseLayer(w, b, "identity")])


def collect_params(model: Union[ModelNode, Classifier]) -> ParamStore:
    store = ParamStore()
    _collect(model, store)
    return store


def _collect(model, store: ParamStore) -> None:
    if isinstance(model, Classifier):
        _collect(model.model, store)
        _collect(model.head, store)
        return
    if isinstance(model, ArrayModel):
        for layer in model.layers:
            store.add(layer.weights)
            store.add(layer.bias)
        store.add(model.imputation)
        return
    if isinstance(model, BagModel):
        _collect(model.child, store)
        for layer in model.post:
            store.add(layer.weights)
            store.add(layer.bias)
        store.add(model.empty_vec)
        return
    if isinstance(model, ProductModel):
        for child in model.children.values():
            _collect(child, store)
        for layer in model.combiner:
            store.add(layer.weights)
            store.add(layer.bias)
        return
    if isinstance(model, ClassifierHead):
        for layer in model.layers:
            store.add(layer.weights)
            store.add(layer.bias)
        return
    raise TypeError(f"not a model node: {type(model).__name__}")


def model_dtype(model: Union[ModelNode, Classifier]) -> np.dtype:
    return next(iter(collect_params(model))).value.dtype


def convert_dtype(model: Union[ModelNode, Classifier], dtype) -> Union[ModelNode, Classifier]:
    """Deep copy with every parameter cast to dtype (names preserved)."""
    if isinstance(model, Classifier):
        return Classifier(convert_dtype(model.model, dtype), convert_dtype(model.head, dtype))
    if isinstance(model, ArrayModel):
        return ArrayModel(_convert_chain(model.layers, dtype),
                          _convert_param(model.imputation, dtype))
    if isinstance(model, BagModel):
        return BagModel(model.aggregation, convert_dtype(model.child, dtype),
                        _convert_chain(model.post, dtype),
                        _convert_param(model.empty_vec, dtype))
    if isinstance(model, ProductModel):
        return ProductModel({k: convert_dtype(v, dtype) for k, v in model.children.items()},
                            _convert_chain(model.combiner, dtype))
    if isinstance(model, ClassifierHead):
        return ClassifierHead(_convert_chain(model.layers, dtype))
    raise TypeError(f"not a model node: {type(model).__name__}")


def _convert_param(p: Parameter, dtype) -> Parameter:
    return Parameter(p.value.astype(dtype), p.name)


def _convert_chain(layers: list[DenseLayer], dtype) -> list[DenseLayer]:
    return [DenseLayer(_convert_param(l.weights, dtype), _convert_param(l.bias, dtype),
                       l.activation) for l in layers]


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward(model: Union[ModelNode, Classifier], data: DataNode) -> tuple[np.ndarray, Tape]:
    """Embed a batch; returns the embedding matrix (dim x samples) and the
    tape needed to pull gradients back through the computation."""
    params = collect_params(model)
    dtype = next(iter(params)).value.dtype
    if isinstance(model, Classifier):
        out = _forward_node(model.model, data, "$", dtype)
        for layer in model.head.layers:
            out = layer.apply(out)
    else:
        out = _forward_node(model, data, "$", dtype)
    return out.value, Tape(out, params)


def _forward_node(model: ModelNode, node: DataNode, path: str, dtype) -> Tensor:
    if isinstance(model, ArrayModel):
        if not isinstance(node, ArrayNode):
            raise ShapeMismatch(f"{path}: model expects a leaf, data is {type(node).__name__}")
        if node.data.feature_dim != model.in_dim:
            raise ShapeMismatch(f"{path}: leaf dim {node.data.feature_dim} != model input "
                                f"{model.in_dim}")
        x = substitute_missing(node.data.densify(dtype), node.mask, model.imputation)
        for layer in model.layers:
            x = layer.apply(x)
        return x
    if isinstance(model, BagModel):
        if not isinstance(node, BagNode):
            raise ShapeMismatch(f"{path}: model expects a bag, data is {type(node).__name__}")
        child = _forward_node(model.child, node.child, path + "[]", dtype)
        x = bag_pool(child, node.segments, model.aggregation, model.empty_vec)
        for layer in model.post:
            x = layer.apply(x)
        return x
    if not isinstance(node, ProductNode):
        raise ShapeMismatch(f"{path}: model expects a product, data is {type(node).__name__}")
    if list(model.children) != node.keys:
        raise ShapeMismatch(f"{path}: keys {node.keys} != model keys {list(model.children)}")
    parts = [
        _forward_node(sub, node.entries[k], f"{path}.{k}", dtype)
        for k, sub in model.children.items()
    ]
    x = concat_rows(parts)
    for layer in model.combiner:
        x = layer.apply(x)
    return x


def predict(model: ModelNode, head: ClassifierHead, data: DataNode) -> np.ndarray:
    """Class logits (class-count x sample-count); no softmax applied."""
    logits, _ = forward(Classifier(model, head), data)
    return logits


def grad_check(model: Union[ModelNode, Classifier], data: DataNode, loss_fn,
               epsilon: float = 1e-3, max_params: int = 200, seed: int = 0,
               fd_model: Optional[Union[ModelNode, Classifier]] = None) -> float:
    """Worst relative error between backward gradients and central finite
    differences over a random subsample of parameters.

    loss_fn maps the forward output matrix to (scalar loss, output gradient)
    and must be deterministic. When fd_model is given (a structurally equal
    copy, typically in float64), the finite differences are evaluated on it at
    the same parameter values, which removes forward-precision noise from the
    reference while still checking this model's backward pass.
    """
    out, tape = forward(model, data)
    _, g0 = loss_fn(out)
    grads = backward(tape, g0)

    params = list(tape.params)
    sizes = [p.value.size for p in params]
    total = int(np.sum(sizes))
    if total == 0 or max_params <= 0:
        warnings.warn("grad_check: no parameters sampled; reporting error 0")
        return 0.0
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(max_params, total), replace=False)
    bounds = np.cumsum([0] + sizes)

    target = fd_model if fd_model is not None else model
    fd_params = collect_params(target)

    worst = 0.0
    for pos in np.sort(chosen):
        owner = int(np.searchsorted(bounds, pos, side="right") - 1)
        offset = int(pos - bounds[owner])
        name = params[owner].name
        analytic = float(grads[name].flat[offset])
        p = fd_params[name]
        orig = p.value.flat[offset]
        p.value.flat[offset] = orig + epsilon
        lp = loss_fn(forward(target, data)[0])[0]
        p.value.flat[offset] = orig - epsilon
        lm = loss_fn(forward(target, data)[0])[0]
        p.value.flat[offset] = orig
        numeric = (lp - lm) / (2 * epsilon)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, rel)
    return worst
