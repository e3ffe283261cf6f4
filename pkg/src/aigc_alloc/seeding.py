"""Named random substreams.

Every generator is ``numpy.random.PCG64`` seeded from a ``SeedSequence`` whose
entropy is ``[seed, stream tag, *extra]``.  Distinct tags give statistically
independent streams, so e.g. evaluation scenarios never overlap the training
draws of the same seed.
"""

import hashlib

import numpy as np

PRNG_NAME = "numpy.random.PCG64 via SeedSequence([seed, stream_tag, ...])"

_TAGS = {
    "init": 1,
    "scenarios": 2,
    "explore": 3,
    "batch": 4,
    "eval_scenarios": 5,
    "eval_noise": 6,
    "worker": 7,
}


def stream(seed, name, *extra) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _TAGS[name], *[int(e) for e in extra]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def keyed_stream(seed, name, key: bytes) -> np.random.Generator:
    """Stream keyed by arbitrary bytes (e.g. an encoded state vector)."""
    digest = hashlib.blake2b(key, digest_size=16).digest()
    words = np.frombuffer(digest, dtype=np.uint32).tolist()
    return stream(seed, name, *words)
