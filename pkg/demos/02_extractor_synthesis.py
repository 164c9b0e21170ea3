#!/usr/bin/env python3
# How leaf representations are chosen, and what extraction produces: one-hot
# categories, standardized numbers, hashed n-grams, missing markers.
import numpy as np

from hmil import (
    extract,
    extract_batch,
    ngram_hash,
    sample_count,
    schema_of,
    suggest_extractor,
)

rng = np.random.default_rng(0)
corpus = [
    {
        "proto": str(rng.choice(["tcp", "udp"])),         # few values -> one-hot
        "port": int(rng.integers(1, 65536)),              # many numbers -> standardized
        "banner": "".join(rng.choice(list("abcdefgh "), 24)),  # diverse text -> n-grams
        "tags": [str(rng.choice(["web", "ssh", "dns"]))
                 for _ in range(rng.integers(0, 3))],     # list -> bag
    }
    for _ in range(300)
]

extractor = suggest_extractor(schema_of(corpus))
for key, leaf in extractor.entries.items():
    print(f"{key:<8} -> {leaf}")

# a single document becomes a one-sample hierarchical batch
doc = {"proto": "udp", "port": 443, "tags": ["web", "web"], "banner": "hello"}
node = extract(extractor, doc)
print("\nproto one-hot index:", node.entries["proto"].data.indices[0],
      "of dim", node.entries["proto"].data.vocab_size)
print("port standardized value:", float(node.entries["port"].data.values[0, 0]))
print("tags bag segments:", node.entries["tags"].segments.tolist())

# absent keys extract as missing-marked leaves, never as errors
empty = extract(extractor, {})
print("\nextracting {}: port missing mask =", bool(empty.entries["port"].mask[0]),
      "| tags bag length =", int(empty.entries["tags"].lengths[0]))

# n-gram hashing is stateless and order-sensitive
print("\ntrigram histogram of 'ab':", ngram_hash(b"ab", 3))
print("unigrams of 'a' (boundary-only windows dropped):", ngram_hash(b"a", 1))

# batches are single contiguous structures, not lists of samples
batch = extract_batch(extractor, corpus[:64])
print("\nbatched 64 docs:", sample_count(batch), "samples,",
      sample_count(batch.entries["tags"].child), "tag instances in one tensor")
