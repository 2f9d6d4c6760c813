"""Deterministic random streams.

Every stream is a PCG64 generator seeded from ``SeedSequence(seed,
spawn_key=key)`` where ``key`` is a tuple of small integers naming the
component:

* ``(0, stream, iteration, subject)``  E-step draws of one subject,
* ``(1, replicate, part)``              simulated data of one replicate,
* ``(2, replicate)``                    fit seed of one replicate,
* ``(3, subject)``                      conditional prediction draws.

Because each key maps to an independent stream, results do not depend on
the order in which subjects or replicates are processed.
"""

import numpy as np

ESTEP, SIMULATE, REPLICATE_FIT, PREDICT = range(4)


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def subject_stream(seed: int, stream_id: int, iteration: int, subject: int) -> np.random.Generator:
    return stream(seed, ESTEP, stream_id, iteration, subject)


def derived_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed derived from ``seed`` and ``key``."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
