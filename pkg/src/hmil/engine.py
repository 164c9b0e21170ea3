"""Minimal reverse-mode differentiation tape over numpy matrices.

Forward operations build a graph of Tensor nodes, each recording its parents
and a closure that maps the output gradient to parent gradients. backward()
walks the graph once in reverse topological order and accumulates gradients
for named Parameter leaves. Everything runs on whatever float dtype the
parameters carry (float32 in production, float64 in the testing mode used to
tighten gradient checks).

Besides dense-layer primitives this module owns the two batched kernels the
whole design leans on: column substitution for missing samples, and segmented
mean/max pooling over the contiguous column ranges of a bag batch.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch


# gradients are plain name -> array registries, congruent with a ParamStore
Gradients = dict[str, np.ndarray]


class Tensor:
    """One node of the recorded computation."""

    __slots__ = ("value", "parents", "grad_fn")

    def __init__(self, value, parents=(), grad_fn=None):
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn


class Parameter(Tensor):
    """A named trainable leaf; optimizers mutate .value in place."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(np.asarray(value))
        self.name = name


class ParamStore:
    """Ordered, uniquely named registry of the parameters of one model."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def n_scalars(self) -> int:
        return sum(p.value.size for p in self)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for p in self:
            src = values[p.name]
            if src.shape != p.value.shape:
                raise ShapeMismatch(f"{p.name}: saved shape {src.shape} != {p.value.shape}")
            p.value[...] = src

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {p.name: np.zeros_like(p.value) for p in self}


class Tape:
    """A finished forward pass: the output node plus the parameter registry."""

    def __init__(self, output: Tensor, params: ParamStore):
        self.output = output
        self.params = params


def backward(tape: Tape, upstream) -> dict[str, np.ndarray]:
    """Pull the upstream gradient through the tape.

    Returns one gradient array per parameter, zeros included, keyed by
    parameter name.
    """
    root = tape.output
    upstream = np.asarray(upstream, dtype=root.value.dtype)
    if upstream.shape != root.value.shape:
        raise ShapeMismatch(
            f"upstream gradient shape {upstream.shape} != output shape {root.value.shape}")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): upstream}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            # accumulate out of place: pg may alias g (or a view of it), and
            # g may alias the caller's upstream array
            grads[id(parent)] = pg if acc is None else acc + pg

    return {
        p.name: grads.get(id(p), np.zeros_like(p.value))
        for p in tape.params
    }


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def constant(value) -> Tensor:
    return Tensor(np.asarray(value))


def matmul(w: Tensor, x: Tensor) -> Tensor:
    def grad(g):
        return g @ x.value.T, w.value.T @ g
    return Tensor(w.value @ x.value, (w, x), grad)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    def grad(g):
        return g, g.sum(axis=1)
    return Tensor(x.value + b.value[:, None], (x, b), grad)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "identity":
        return x
    if kind == "relu":
        out = np.maximum(x.value, 0)
        return Tensor(out, (x,), lambda g: (g * (out > 0),))
    if kind == "tanh":
        out = np.tanh(x.value)
        return Tensor(out, (x,), lambda g: (g * (1 - out * out),))
    raise ValueError(f"unknown activation {kind!r}")


def concat_rows(parts: list[Tensor]) -> Tensor:
    dims = [p.value.shape[0] for p in parts]
    offs = np.cumsum([0] + dims)

    def grad(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(parts)))
    return Tensor(np.concatenate([p.value for p in parts], axis=0), tuple(parts), grad)


def substitute_missing(dense: np.ndarray, mask: np.ndarray, imputation: Parameter) -> Tensor:
    """Replace missing-masked columns of a constant input with the imputation
    vector; only the imputation receives gradient, and only from those columns."""
    out = np.array(dense, copy=True)
    if mask.any():
        out[:, mask] = imputation.value[:, None]

    def grad(g):
        return (g[:, mask].sum(axis=1),)
    return Tensor(out, (imputation,), grad)


def bag_pool(child: Tensor, segments: np.ndarray, mode: str, empty_vec: Parameter) -> Tensor:
    """Segmented permutation-invariant pooling over contiguous column ranges.

    mode selects coordinate-wise mean, max, or their row-concatenation. Bags
    with zero instances take the trainable empty_vec as their entire pooled
    output. Mean spreads gradient uniformly over members; max routes it to the
    first-occurring argmax member.
    """
    if mode not in ("mean", "max", "meanmax"):
        raise ValueError(f"unknown aggregation {mode!r}")
    x = child.value
    d, n = x.shape
    lens = segments[:, 1] - segments[:, 0]
    nonempty = lens > 0
    starts = segments[nonempty, 0]
    lens_ne = lens[nonempty].astype(x.dtype)
    pooled_dim = d * (2 if mode == "meanmax" else 1)
    nb = segments.shape[0]

    parts = []
    argmax_cols = None
    if mode in ("mean", "meanmax"):
        if starts.size:
            means = np.add.reduceat(x, starts, axis=1) / lens_ne
        else:
            means = np.zeros((d, 0), dtype=x.dtype)
        parts.append(means)
    if mode in ("max", "meanmax"):
        if starts.size:
            maxs = np.maximum.reduceat(x, starts, axis=1)
            spread = np.repeat(maxs, lens[nonempty], axis=1)
            colpos = np.where(x == spread, np.arange(n)[None, :], n)
            argmax_cols = np.minimum.reduceat(colpos, starts, axis=1)
        else:
            maxs = np.zeros((d, 0), dtype=x.dtype)
            argmax_cols = np.zeros((d, 0), dtype=np.int64)
        parts.append(maxs)

    out = np.empty((pooled_dim, nb), dtype=x.dtype)
    out[:, nonempty] = np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
    if (~nonempty).any():
        out[:, ~nonempty] = empty_vec.value[:, None]

    def grad(g):
        g_empty = g[:, ~nonempty].sum(axis=1)
        gne = g[:, nonempty]
        child_grad = np.zeros_like(x)
        if mode in ("mean", "meanmax"):
            gm = gne[:d]
            if starts.size:
                child_grad += np.repeat(gm / lens_ne, lens[nonempty], axis=1)
        if mode in ("max", "meanmax"):
            gx = gne[-d:]
            if starts.size:
                rows = np.broadcast_to(np.arange(d)[:, None], argmax_cols.shape)
                np.add.at(child_grad, (rows, argmax_cols), gx)
        return child_grad, g_empty

    return Tensor(out, (child, empty_vec), grad)
