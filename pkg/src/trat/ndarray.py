"""Dense float64 array helpers and a seedable, platform-stable RNG.

Tensors are plain ``numpy.ndarray`` values (float64, C order).  The helpers
here add the shape checks and the restricted broadcasting rules the rest of
the package relies on.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Sequence

import numpy as np

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE, order="C")


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def _check_binary(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                     "(only equal shapes or scalar operands are supported)")


def elementwise(op: str, *args) -> np.ndarray:
    """Apply a pointwise operation.

    Supported ops: ``add``, ``sub``, ``mul`` (two operands), ``relu``,
    ``tanh``, ``exp``, ``log`` (one operand), ``scale`` (tensor, factor) and
    ``clamp`` (tensor, lo, hi).
    """
    if op in ("add", "sub", "mul"):
        a, b = (as_tensor(x) for x in args)
        _check_binary(a, b, op)
        return {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b)
    x = as_tensor(args[0])
    if op == "relu":
        return np.maximum(x, 0.0)
    if op == "tanh":
        return np.tanh(x)
    if op == "exp":
        return np.exp(x)
    if op == "log":
        if np.any(x <= 0):
            raise ValueError("log of non-positive value")
        return np.log(x)
    if op == "scale":
        return x * float(args[1])
    if op == "clamp":
        lo, hi = float(args[1]), float(args[2])
        if lo > hi:
            raise ValueError(f"clamp: lo={lo} > hi={hi}")
        return np.clip(x, lo, hi)
    raise ValueError(f"unknown elementwise op {op!r}")


def derive_seed(parent: int, index: int) -> int:
    """child_seed = blake2b(parent, index) truncated to 64 bits."""
    digest = hashlib.blake2b(struct.pack("<QQ", parent & (2**64 - 1), index & (2**64 - 1)),
                             digest_size=8).digest()
    return struct.unpack("<Q", digest)[0]


class Rng:
    """Philox counter-based generator; identical streams on every platform.

    Single owner.  Use :meth:`child` to hand independent streams to other
    components instead of sharing one instance.
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int):
        self.seed = int(seed) & (2**64 - 1)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, index: int) -> "Rng":
        return Rng(derive_seed(self.seed, index))

    def gaussian(self, shape: Sequence[int], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        z = self._gen.standard_normal(tuple(shape))
        return mean + std * z

    def rademacher(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.integers(0, 2, size=tuple(shape)).astype(DTYPE) * 2.0 - 1.0

    def uniform(self, shape: Sequence[int], lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if hi < lo:
            raise ValueError(f"uniform: hi={hi} < lo={lo}")
        return self._gen.uniform(lo, hi, size=tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)


def sample(rng: Rng, kind: str, shape: Sequence[int], **params) -> np.ndarray:
    """Draw i.i.d. values: ``gaussian(mean, std)``, ``rademacher`` or ``uniform(lo, hi)``."""
    if kind == "gaussian":
        return rng.gaussian(shape, params.get("mean", 0.0), params.get("std", 1.0))
    if kind == "rademacher":
        return rng.rademacher(shape)
    if kind == "uniform":
        return rng.uniform(shape, params.get("lo", 0.0), params.get("hi", 1.0))
    raise ValueError(f"unknown sample kind {kind!r}")
