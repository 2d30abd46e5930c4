"""Named deterministic random streams derived from one global seed.

Every source of randomness (data order, negative sampling, masking, weight
init, ...) draws from its own named stream so that toggling one feature never
shifts another's draws.  Stream identity is the SHA-256 of the name, so the
mapping is stable across runs, platforms, and code reorderings.
"""

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for stream `name` under the global `seed`."""
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), key)))


class StreamSet:
    """Lazily created, cached named streams for one global seed.

    Streams are stateful generators: repeated `get` calls return the same
    object so sequential draws advance deterministically.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = stream(self.seed, name)
        return self._streams[name]

    def state(self) -> dict:
        """JSON-serializable state of every stream touched so far."""
        return {name: gen.bit_generator.state for name, gen in self._streams.items()}

    def restore(self, state: dict) -> None:
        for name, bg_state in state.items():
            gen = self.get(name)
            gen.bit_generator.state = bg_state
