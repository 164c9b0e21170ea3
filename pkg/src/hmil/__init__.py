"""Hierarchical multiple-instance learning on raw JSON documents.

The pipeline has four steps, each usable on its own:

1. schema_of: stream a corpus into a statistical schema tree.
2. suggest_extractor: synthesize a deterministic JSON-to-tensors extractor.
3. reflect_in_model: build a trainable model tree mirroring the data.
4. train: fit the model end to end with reverse-mode gradients.
"""

from .data import (
    MISSING,
    ArrayNode,
    BagNode,
    DataNode,
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
from .schema import (
    SchemaConfig,
    SchemaNode,
    iter_json_dir,
    iter_jsonl,
    load_schema,
    merge_schemas,
    save_schema,
    schema_of,
    update_schema,
)
from .report import render_report
from .extract import (
    CategoricalExtractor,
    DictExtractor,
    ExtractConfig,
    Extractor,
    ListExtractor,
    NGramExtractor,
    NumericExtractor,
    StringifyExtractor,
    extract,
    extract_batch,
    extract_missing,
    load_extractor,
    ngram_hash,
    save_extractor,
    suggest_extractor,
)
from .engine import Gradients, ParamStore, Parameter, Tape, backward
from .model import (
    ArrayModel,
    BagModel,
    Classifier,
    ClassifierHead,
    ModelConfig,
    ModelNode,
    ProductModel,
    collect_params,
    convert_dtype,
    forward,
    grad_check,
    make_classifier_head,
    predict,
    reflect_in_model,
)
from .bundle import ModelBundle, load_model, load_model_file, save_model, save_model_file
from .train import (
    LabeledCorpus,
    TrainConfig,
    TrainReport,
    cross_entropy,
    evaluate,
    optimizer_step,
    softmax,
    train,
)

__version__ = "0.1.0"
