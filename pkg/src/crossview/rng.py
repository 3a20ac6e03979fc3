"""Named deterministic random streams.

Every stochastic choice in the library (mask sampling, meta-dropout,
augmentation, batch shuffling, parameter init, synthetic data) draws from
its own named stream derived from one root seed. Toggling one feature can
therefore never shift the draws of another, which is what makes equivalence
invariants (e.g. meta-dropout p=1 vs. no metadata) literally testable.
"""

from __future__ import annotations

import numpy as np
import torch


def derive_seed_sequence(seed: int, name: str) -> np.random.SeedSequence:
    """Stable per-name entropy; independent of Python's salted hash()."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence([seed] + list(name.encode("utf-8")))


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, name))


def torch_seed(seed: int, name: str) -> int:
    """A 63-bit seed for torch.Generator derived from (seed, name)."""
    state = derive_seed_sequence(seed, name).generate_state(1, dtype=np.uint64)[0]
    return int(state & 0x7FFF_FFFF_FFFF_FFFF)


class RngStreams:
    """Lazy registry of named numpy generators rooted at one seed.

    Generators are stateful: repeated `get` calls return the same generator
    object, so draws advance within a stream but never across streams.
    Not safe to share one stream across concurrent callers.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = stream(self.seed, name)
        return self._streams[name]

    def torch_generator(self, name: str) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(torch_seed(self.seed, name))
        return gen
