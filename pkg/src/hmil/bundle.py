"""Versioned binary container for a trained model.

Layout: magic "HMIL1", little-endian u32 header length, a canonical JSON
header describing the model/head structure, the embedded extractor, class
names and the tensor directory, then the raw parameter blob (little-endian
float32, directory order), and a trailing CRC32 over everything before it.
Since tensors are stored bit-exactly, a loaded bundle reproduces forward
outputs bit for bit.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .engine import Parameter
from .errors import CorruptContainer, VersionMismatch
from .extract import Extractor
from .extract import _node_from_json as _extractor_from_json
from .extract import _node_to_json as _extractor_to_json
from .model import (
    ArrayModel,
    BagModel,
    ClassifierHead,
    DenseLayer,
    ModelNode,
    ProductModel,
    collect_params,
    convert_dtype,
)

MAGIC = b"HMIL1"


@dataclass
class ModelBundle:
    """Everything inference needs: model, head, extractor, class names."""

    model: ModelNode
    head: ClassifierHead
    extractor: Extractor
    classes: list[str]


def _chain_struct(layers: list[DenseLayer]) -> list[dict]:
    return [{"out": l.out_dim, "in": l.in_dim, "activation": l.activation} for l in layers]


def _model_struct(model: ModelNode) -> dict:
    if isinstance(model, ArrayModel):
        return {"kind": "array", "layers": _chain_struct(model.layers)}
    if isinstance(model, BagModel):
        return {"kind": "bag", "aggregation": model.aggregation,
                "child": _model_struct(model.child), "post": _chain_struct(model.post)}
    if isinstance(model, ProductModel):
        return {"kind": "product",
                "children": {k: _model_struct(v) for k, v in model.children.items()},
                "combiner": _chain_struct(model.combiner)}
    raise TypeError(f"not a model node: {type(model).__name__}")


def _build_chain(layer_structs: list[dict], path: str) -> list[DenseLayer]:
    out = []
    for i, l in enumerate(layer_structs):
        w = Parameter(np.zeros((l["out"], l["in"]), np.float32), f"{path}.{i}.weights")
        b = Parameter(np.zeros(l["out"], np.float32), f"{path}.{i}.bias")
        out.append(DenseLayer(w, b, l["activation"]))
    return out


def _build_model(struct: dict, path: str) -> ModelNode:
    kind = struct["kind"]
    if kind == "array":
        layers = _build_chain(struct["layers"], f"{path}.layers")
        in_dim = struct["layers"][0]["in"]
        return ArrayModel(layers, Parameter(np.zeros(in_dim, np.float32), f"{path}.imputation"))
    if kind == "bag":
        child = _build_model(struct["child"], f"{path}[]")
        post = _build_chain(struct["post"], f"{path}.bag.post")
        pooled = struct["post"][0]["in"]
        return BagModel(struct["aggregation"], child, post,
                        Parameter(np.zeros(pooled, np.float32), f"{path}.bag.empty"))
    if kind == "product":
        children = {k: _build_model(v, f"{path}.{k}") for k, v in struct["children"].items()}
        return ProductModel(children, _build_chain(struct["combiner"], f"{path}.combiner"))
    raise CorruptContainer(f"unknown model node kind {kind!r}")


def save_model(bundle: ModelBundle) -> bytes:
    """Serialize the bundle to bytes (always 32-bit tensors)."""
    model = convert_dtype(bundle.model, np.float32)
    head = convert_dtype(bundle.head, np.float32)
    params = list(collect_params(model)) + list(collect_params(head))
    header = {
        "model": _model_struct(model),
        "head": {"layers": _chain_struct(head.layers)},
        "extractor": _extractor_to_json(bundle.extractor),
        "classes": list(bundle.classes),
        "tensors": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(p.value, dtype="<f4").tobytes() for p in params)
    body = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + blob
    return body + struct.pack("<I", zlib.crc32(body))


def load_model(data: bytes) -> ModelBundle:
    if len(data) < len(MAGIC) + 8:
        raise CorruptContainer("container is truncated")
    if data[:4] != MAGIC[:4]:
        raise CorruptContainer("bad magic; not a model bundle")
    if data[4:5] != MAGIC[4:5]:
        raise VersionMismatch(f"unsupported container version {data[:5]!r}")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CorruptContainer("checksum mismatch; container is corrupt or truncated")
    (header_len,) = struct.unpack("<I", data[5:9])
    header_end = 9 + header_len
    if header_end > len(data) - 4:
        raise CorruptContainer("header length exceeds container size")
    try:
        header = json.loads(data[9:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptContainer(f"unreadable header: {e}") from None

    model = _build_model(header["model"], "$")
    head = ClassifierHead(_build_chain(header["head"]["layers"], "head"))
    params = {p.name: p for p in list(collect_params(model)) + list(collect_params(head))}

    offset = header_end
    for entry in header["tensors"]:
        p = params.get(entry["name"])
        if p is None:
            raise CorruptContainer(f"tensor {entry['name']!r} does not belong to the structure")
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * 4
        raw = data[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise CorruptContainer("tensor blob is truncated")
        vals = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        if vals.shape != p.value.shape:
            raise CorruptContainer(f"tensor {entry['name']!r} shape {vals.shape} != "
                                   f"{p.value.shape}")
        p.value[...] = vals
        offset += nbytes
    if offset != len(data) - 4:
        raise CorruptContainer("unexpected trailing bytes in container")

    extractor = _extractor_from_json(header["extractor"])
    return ModelBundle(model, head, extractor, list(header["classes"]))


def save_model_file(bundle: ModelBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model(bundle))


def load_model_file(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return load_model(fh.read())
