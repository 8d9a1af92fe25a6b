"""Dense float64 matrices, keyed deterministic RNG streams, and the few
factorizations the rest of the package needs.

Matrices are plain 2-D ``numpy.ndarray`` values (row-major, float64). They are
treated as immutable once built: every operation here returns a fresh array and
never mutates its inputs.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "DimensionError",
    "RngStream",
    "as_matrix",
    "frobenius_norm",
    "gaussian_matrix",
    "orthonormal_rows",
    "top_r_right_singular_vectors",
]


class DimensionError(ValueError):
    """Shapes or ranks that cannot be satisfied."""


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate ``values`` as a finite float64 matrix and return a C-order copy.

    Raises DimensionError on wrong rank/shape and ValueError on NaN/Inf entries.
    """
    m = np.array(values, dtype=np.float64, order="C")
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains non-finite entries")
    return m


def _encode_label(label) -> list[int]:
    # Injective label -> uint32-word encoding. Ints and strings are the only
    # supported label types; strings go through SHA-256 so the mapping is
    # platform independent.
    if isinstance(label, (int, np.integer)):
        v = int(label) & (2**64 - 1)
        return [0x49, v & 0xFFFFFFFF, (v >> 32) & 0xFFFFFFFF]
    if isinstance(label, str):
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
        return [0x53, *words]
    raise TypeError(f"stream key labels must be int or str, got {type(label)!r}")


class RngStream:
    """Deterministic random stream keyed by (master_seed, stream_key).

    Two streams built from the same seed and key yield bitwise-identical draw
    sequences on any platform; distinct keys yield statistically independent
    streams (numpy SeedSequence entropy mixing). A stream is single-owner:
    draws advance its internal state, so it must not be shared across threads.
    """

    def __init__(self, master_seed: int, *key):
        self.master_seed = int(master_seed)
        self.key = tuple(key)
        entropy = [self.master_seed & (2**64 - 1)]
        for label in self.key:
            entropy.extend(_encode_label(label))
        self._generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy))
        )

    def child(self, *labels) -> "RngStream":
        """A fresh stream keyed by this stream's key extended with ``labels``."""
        return RngStream(self.master_seed, *self.key, *labels)

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._generator.standard_normal(shape) * std

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._generator.integers(low, high, size=size)

    def choice_without_replacement(self, n: int, size: int) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=False)

    def permutation(self, x) -> np.ndarray:
        return self._generator.permutation(x)

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, key={self.key})"


def gaussian_matrix(rows: int, cols: int, std: float, rng: RngStream) -> np.ndarray:
    """rows x cols matrix of i.i.d. N(0, std^2) entries drawn from ``rng``."""
    if rows < 1 or cols < 1:
        raise DimensionError("gaussian_matrix needs rows, cols >= 1")
    if std < 0:
        raise ValueError("std must be >= 0")
    return rng.normal((rows, cols), std)


def frobenius_norm(m: np.ndarray) -> float:
    """sqrt of the sum of squared entries."""
    return float(np.linalg.norm(np.asarray(m, dtype=np.float64)))


def orthonormal_rows(r: int, k: int, rng: RngStream) -> np.ndarray:
    """r x k matrix with orthonormal rows, from QR on a Gaussian draw.

    Column signs of the Q factor are fixed by the sign of R's diagonal so the
    result is a canonical function of the draw.
    """
    if r > k:
        raise DimensionError(f"cannot fit {r} orthonormal rows in dimension {k}")
    g = gaussian_matrix(k, r, 1.0, rng)
    q, rmat = np.linalg.qr(g)
    signs = np.sign(np.diag(rmat))
    signs[signs == 0] = 1.0
    return (q * signs).T


def top_r_right_singular_vectors(w0: np.ndarray, r: int) -> np.ndarray:
    """Rows are the right singular vectors of ``w0`` for the r largest
    singular values, ordered by descending singular value.

    Sign convention: the first entry of each row with magnitude above 1e-12
    is made non-negative. When singular values tie, the returned rows are an
    orthonormal basis of the tied subspace (callers should compare subspaces,
    not individual vectors).
    """
    w0 = as_matrix(w0)
    if r > min(w0.shape):
        raise DimensionError(
            f"rank {r} exceeds min(rows, cols) = {min(w0.shape)} of the base matrix"
        )
    _, _, vt = np.linalg.svd(w0, full_matrices=False)
    rows = vt[:r].copy()
    for i in range(rows.shape[0]):
        nz = np.nonzero(np.abs(rows[i]) > 1e-12)[0]
        if nz.size and rows[i, nz[0]] < 0:
            rows[i] = -rows[i]
    return rows
