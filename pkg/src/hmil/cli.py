"""Command-line pipeline: schema, report, suggest, train, predict, eval.

Exit codes are stable: 0 success, 1 I/O or environment trouble, 2 invalid
input (parse failures, wrong file formats, validation errors). All outputs
are byte-deterministic for identical inputs and seed.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from .bundle import load_model_file, save_model_file
from .data import concat_samples
from .errors import EmptyBatch, HmilError, ParseError
from .extract import (
    DictExtractor,
    ExtractConfig,
    extract_batch,
    load_extractor,
    save_extractor,
    suggest_extractor,
)
from .model import ModelConfig, predict
from .report import render_report
from .schema import (
    DictSchema,
    SchemaConfig,
    iter_json_dir,
    iter_jsonl,
    load_schema,
    merge_schemas,
    save_schema,
    total_count,
    update_schema,
)
from .train import LabeledCorpus, TrainConfig, evaluate, softmax, train

# dotted override key -> (config group, attribute, parser)
def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


OVERRIDE_KEYS = {
    "schema.max-distinct": ("schema", "max_distinct", int),
    "schema.max-depth": ("schema", "max_depth", int),
    "extract.min-presence": ("extract", "min_presence", float),
    "extract.category-threshold": ("extract", "category_threshold", int),
    "extract.numeric-ratio": ("extract", "numeric_ratio", float),
    "extract.majority-ratio": ("extract", "majority_ratio", float),
    "extract.ngram.n": ("extract", "ngram_n", int),
    "extract.ngram.base": ("extract", "ngram_base", int),
    "extract.ngram.hash-dim": ("extract", "ngram_hash_dim", int),
    "extract.ngram.normalize": ("extract", "ngram_normalize", _parse_bool),
    "model.embed-dim": ("model", "embed_dim", int),
    "model.activation": ("model", "activation", str),
    "model.aggregation": ("model", "aggregation", str),
    "model.layers-per-node": ("model", "layers_per_node", int),
    "train.epochs": ("train", "epochs", int),
    "train.batch-size": ("train", "batch_size", int),
    "train.optimizer": ("train", "optimizer", str),
    "train.lr": ("train", "lr", float),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.eps": ("train", "eps", float),
    "train.shuffle": ("train", "shuffle", _parse_bool),
    "train.validation-fraction": ("train", "validation_fraction", float),
    "train.early-stop-patience": ("train", "early_stop_patience", int),
}


def parse_overrides(pairs: list[str]) -> dict[str, dict]:
    """Resolve KEY=VALUE pairs into per-group attribute dicts.

    Bare keys (no group prefix) are tried under extract., model., train.,
    schema. in that order, so `category-threshold=2` works on the suggest
    subcommand without ceremony.
    """
    groups: dict[str, dict] = {"schema": {}, "extract": {}, "model": {}, "train": {}}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not KEY=VALUE")
        key, _, raw = pair.partition("=")
        key = key.strip()
        entry = OVERRIDE_KEYS.get(key)
        if entry is None:
            for prefix in ("extract.", "model.", "train.", "schema."):
                entry = OVERRIDE_KEYS.get(prefix + key)
                if entry is not None:
                    break
        if entry is None:
            raise ValueError(f"unknown override key {key!r}")
        group, attr, cast = entry
        groups[group][attr] = cast(raw)
    return groups


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("HMIL_SEED", "0"))


def _iter_documents(path):
    if os.path.isdir(path):
        return iter_json_dir(path)
    return iter_jsonl(path)


def _threaded_extract(extractor, docs, threads: int):
    if threads <= 1 or len(docs) <= 1:
        return extract_batch(extractor, docs)
    chunk = max(1, (len(docs) + threads - 1) // threads)
    pieces = [docs[i:i + chunk] for i in range(0, len(docs), chunk)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda piece: extract_batch(extractor, piece), pieces))
    return concat_samples(parts)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_schema(args) -> int:
    cfg = SchemaConfig(**parse_overrides(args.set)["schema"])
    if args.threads > 1 and not os.path.isdir(args.input):
        with open(args.input, "r", encoding="utf-8") as fh:
            lines = [(i, line) for i, line in enumerate(fh, 1) if line.strip()]
        chunk = max(1, (len(lines) + args.threads - 1) // args.threads)
        pieces = [lines[i:i + chunk] for i in range(0, len(lines), chunk)]

        def fold(piece):
            import json as _json
            shard = None
            for lineno, line in piece:
                try:
                    doc = _json.loads(line)
                except _json.JSONDecodeError as e:
                    raise ParseError(f"line {lineno}: {e}", line=lineno) from e
                shard = update_schema(shard, doc, cfg)
            return shard
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            shards = list(pool.map(fold, pieces))
        schema = None
        for shard in shards:
            schema = merge_schemas(schema, shard, cfg)
    else:
        schema = None
        for doc in _iter_documents(args.input):
            schema = update_schema(schema, doc, cfg)

    save_schema(schema, args.out)
    n = total_count(schema)
    print(f"{n} documents")
    if n == 0:
        print("warning: empty corpus; schema has no content", file=sys.stderr)
    if isinstance(schema, DictSchema):
        print(f"{'key':<24}{'present':>10}{'ratio':>8}")
        for key, entry in sorted(schema.entries.items()):
            print(f"{key:<24}{entry.present:>10}{entry.present / schema.count:>8.3f}")
    return 0


def cmd_report(args) -> int:
    schema = load_schema(args.schema)
    html = render_report(schema)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(html)
    print(f"wrote {args.out}")
    return 0


def cmd_suggest(args) -> int:
    schema = load_schema(args.schema)
    cfg = ExtractConfig(**parse_overrides(args.set)["extract"])
    extractor = suggest_extractor(schema, cfg)
    save_extractor(extractor, args.out)
    kind = type(extractor).__name__
    width = len(extractor.entries) if isinstance(extractor, DictExtractor) else 1
    print(f"wrote {args.out} ({kind}, {width} top-level keys)")
    return 0


def cmd_train(args) -> int:
    overrides = parse_overrides(args.set)
    seed = _seed(args)
    corpus = LabeledCorpus.from_jsonl(args.input, label_field=args.label_field)

    if args.extractor:
        extractor = load_extractor(args.extractor)
    else:  # --auto: schema + suggestion from the training documents
        scfg = SchemaConfig(**overrides["schema"])
        schema = None
        for doc in corpus.documents:
            schema = update_schema(schema, doc, scfg)
        extractor = suggest_extractor(schema, ExtractConfig(**overrides["extract"]))

    tcfg = TrainConfig(seed=seed, **overrides["train"])
    mcfg = ModelConfig(seed=seed, **overrides["model"])
    extracted = None
    if args.threads > 1:
        # extraction fans out across threads; the loop itself stays single-threaded
        extracted = _threaded_extract(extractor, corpus.documents, args.threads)
    bundle, report = train(corpus, extractor, tcfg, mcfg, extracted=extracted)

    save_model_file(bundle, args.out)
    report_path = args.report or (str(args.out) + ".csv")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    if args.verbose:
        for row in report.epochs:
            print(f"epoch {row['epoch']:>3}  train_loss {row['train_loss']:.4f}  "
                  f"val_acc {row['val_acc']}")
    last = report.epochs[report.best_epoch - 1] if report.epochs else {}
    print(f"wrote {args.out} (best epoch {report.best_epoch}, "
          f"val_acc {last.get('val_acc')})")
    return 0


def cmd_predict(args) -> int:
    bundle = load_model_file(args.bundle)
    docs = list(_iter_documents(args.input))
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(bundle.classes)
        for lo in range(0, len(docs), args.batch_size):
            chunk = docs[lo:lo + args.batch_size]
            logits = predict(bundle.model, bundle.head,
                             _threaded_extract(bundle.extractor, chunk, args.threads))
            probs = softmax(logits)
            for col in range(probs.shape[1]):
                writer.writerow([repr(float(p)) for p in probs[:, col]])
    print(f"wrote {args.out} ({len(docs)} rows)")
    return 0


def cmd_eval(args) -> int:
    bundle = load_model_file(args.bundle)
    corpus = LabeledCorpus.from_jsonl(args.input, label_field=args.label_field)
    if not corpus.documents:
        raise EmptyBatch("evaluation file contains no documents")
    result = evaluate(bundle, corpus)
    print(f"accuracy {result['accuracy']:.4f}")
    print(f"{'class':<16}{'precision':>10}{'recall':>8}")
    for cls in result["classes"]:
        print(f"{cls:<16}{result['precision'][cls]:>10.3f}{result['recall'][cls]:>8.3f}")
    print("confusion (rows = truth, cols = prediction):")
    for i, cls in enumerate(result["classes"]):
        cells = " ".join(f"{int(v):>6}" for v in result["confusion"][i])
        print(f"{cls:<16}{cells}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmil",
        description="Train and run hierarchical multiple-instance models on raw JSON.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sets=True):
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (falls back to env HMIL_SEED, then 0)")
        p.add_argument("--threads", type=int, default=1,
                       help="parallelize schema sharding / batch extraction")
        p.add_argument("-v", "--verbose", action="store_true")
        if sets:
            p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                           help="config override, e.g. model.embed-dim=64")

    p = sub.add_parser("schema", help="deduce a schema from a JSONL corpus")
    p.add_argument("input", help="JSONL file or directory of .json files")
    p.add_argument("--out", required=True, help="schema file to write")
    common(p)
    p.set_defaults(func=cmd_schema)

    p = sub.add_parser("report", help="render a schema as a static HTML page")
    p.add_argument("schema", help="schema file")
    p.add_argument("--out", required=True, help="HTML file to write")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("suggest", help="synthesize an extractor from a schema")
    p.add_argument("schema", help="schema file")
    p.add_argument("--out", required=True, help="extractor file to write")
    common(p)
    p.set_defaults(func=cmd_suggest)

    p = sub.add_parser("train", help="train a classifier on labeled JSONL")
    p.add_argument("input", help='JSONL of {"sample": ..., "label": ...} rows')
    p.add_argument("--out", required=True, help="model bundle to write")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--extractor", help="extractor file to use")
    group.add_argument("--auto", action="store_true",
                       help="infer schema + extractor from the training data")
    p.add_argument("--label-field",
                   help="read the label from this field inside each sample")
    p.add_argument("--report", help="per-epoch CSV path (default: <out>.csv)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-class probabilities for raw JSONL")
    p.add_argument("bundle", help="model bundle")
    p.add_argument("input", help="JSONL of raw documents")
    p.add_argument("--out", required=True, help="CSV to write")
    p.add_argument("--batch-size", type=int, default=256)
    common(p, sets=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a bundle against labeled JSONL")
    p.add_argument("bundle", help="model bundle")
    p.add_argument("input", help="labeled JSONL")
    p.add_argument("--label-field",
                   help="read the label from this field inside each sample")
    common(p, sets=False)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (HmilError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
