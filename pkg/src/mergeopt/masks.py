"""Counter-based keyed randomness for reproducible sparsification masks.

Every mask is a pure function of its MaskKey: element i of the stream depends
only on (key, i), never on how many elements other threads drew first, so
results are identical across runs, platforms, and work partitionings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_U64 = 1 << 64


@dataclass(frozen=True)
class MaskKey:
    """Identifies one deterministic mask stream.

    The stream tag separates independent masks drawn at the same
    (seed, tensor, step) point, e.g. the gradient-side and reference-side
    sparsifications of one online-merge update.
    """

    seed: int
    tensor_name: str
    step: int = 0
    stream: str = ""

    def __post_init__(self):
        if not 0 <= int(self.seed) < _U64:
            raise ValueError(f"seed must fit in u64, got {self.seed}")
        if not 0 <= int(self.step) < _U64:
            raise ValueError(f"step must fit in u64, got {self.step}")

    def material(self) -> int:
        """128-bit key for the counter-based generator."""
        h = hashlib.blake2b(digest_size=16)
        h.update(int(self.seed).to_bytes(8, "little"))
        h.update(int(self.step).to_bytes(8, "little"))
        h.update(self.tensor_name.encode("utf-8"))
        h.update(b"\x00")
        h.update(self.stream.encode("utf-8"))
        return int.from_bytes(h.digest(), "little")


def mask_uniforms(key: MaskKey, n: int) -> np.ndarray:
    """n uniforms in [0, 1) from the key's Philox counter stream."""
    gen = np.random.Generator(np.random.Philox(key=key.material()))
    return gen.random(n)


def bernoulli_mask(key: MaskKey, n: int, p: float) -> np.ndarray:
    """Boolean keep-mask where each element is independently kept with probability p."""
    return mask_uniforms(key, n) < p
