#!/usr/bin/env python3
# The whole pipeline on a synthetic two-class problem: schema -> extractor ->
# reflected model -> gradient training -> evaluation -> save/load -> raw
# inference. The label is the XOR of "banner key present" and "beacon flag in
# the list", so perfect accuracy is attainable and nonlinear composition is
# required.
import os

import numpy as np

from hmil import (
    LabeledCorpus,
    TrainConfig,
    evaluate,
    extract_batch,
    load_model_file,
    predict,
    save_model_file,
    schema_of,
    softmax,
    suggest_extractor,
    train,
)

rng = np.random.default_rng(7)
WORDS = ["atlas", "borei", "cedar", "dune", "ember"]


def make_doc():
    has_key = rng.uniform() < 0.5
    has_marker = rng.uniform() < 0.5
    flags = [str(rng.choice(["scan", "idle", "sync"])) for _ in range(rng.integers(0, 3))]
    if has_marker:
        flags.insert(int(rng.integers(0, len(flags) + 1)), "beacon")
    doc = {"host": str(rng.choice(WORDS)), "port": int(rng.integers(1, 65536)),
           "flags": flags}
    if has_key:
        doc["banner"] = str(rng.choice(WORDS))
    return doc, "pos" if has_key != has_marker else "neg"


pairs = [make_doc() for _ in range(1500)]
corpus = LabeledCorpus.from_pairs([d for d, _ in pairs], [l for _, l in pairs])

extractor = suggest_extractor(schema_of(corpus.documents))
bundle, report = train(corpus, extractor, TrainConfig(seed=0, epochs=40))

print(f"stopped after {len(report.epochs)} epochs, best epoch {report.best_epoch}")
best = report.epochs[report.best_epoch - 1]
print(f"best validation accuracy: {best['val_acc']:.3f}")

result = evaluate(bundle, corpus)
print(f"full-corpus accuracy: {result['accuracy']:.3f}")
print("confusion:", result["confusion"].tolist())

# bundles embed the extractor, so inference needs only raw JSON
os.makedirs("demos/out", exist_ok=True)
save_model_file(bundle, "demos/out/xor.hmil")
loaded = load_model_file("demos/out/xor.hmil")

raw = {"host": "atlas", "port": 80, "flags": ["beacon"]}          # marker only -> pos
logits = predict(loaded.model, loaded.head, extract_batch(loaded.extractor, [raw]))
probs = softmax(logits)[:, 0]
print("raw doc class probabilities:",
      {c: round(float(p), 3) for c, p in zip(loaded.classes, probs)})
