"""Reference-precision numeric substrate.

Everything downstream computes in float64. Vectors and matrices are plain
numpy arrays (row-major, C order); the helpers here coerce and validate
them. Randomness comes from :class:`Rng`, a counter-based generator whose
output stream depends only on ``(seed, counter)`` so test vectors are
portable across platforms and languages. :func:`finite_diff_grad` is the
independent oracle every analytic-gradient rule in this package is checked
against.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

__all__ = ["Rng", "finite_diff_grad", "as_vector", "as_matrix"]

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def as_vector(x, name: str = "x") -> np.ndarray:
    """Coerce to a 1-D float64 array; reject anything of other rank."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    return a


def as_matrix(x, name: str = "m") -> np.ndarray:
    """Coerce to a 2-D float64 array; reject anything of other rank."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


class Rng:
    """Deterministic counter-based random generator.

    The stream is a pure function of ``(seed, counter)``: draw number ``i``
    (zero-based, over the generator's lifetime) is produced by SplitMix64
    finalization of ``seed + (i + 1) * 0x9E3779B97F4A7C15`` in 64-bit
    modular arithmetic::

        z  = seed + (i + 1) * 0x9E3779B97F4A7C15        (mod 2**64)
        z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9           (mod 2**64)
        z ^= z >> 27;  z *= 0x94D049BB133111EB           (mod 2**64)
        z ^= z >> 31

    Uniform doubles take the top 53 bits: ``(z >> 11) * 2**-53``, giving
    values in [0, 1). Normal deviates use Box-Muller on consecutive uniform
    blocks (``normal(n)`` consumes exactly ``2 * n`` counter values).

    Instances are single-owner mutable state; never share one across
    threads. Identical seeds replay identical streams bit-for-bit.
    """

    def __init__(self, seed: int):
        self._seed = _U64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    @property
    def counter(self) -> int:
        """Number of 64-bit draws consumed so far."""
        return self._counter

    def _raw(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError(f"draw count must be >= 0, got {n}")
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = self._seed + (idx + _U64(1)) * _GOLDEN
            z = (z ^ (z >> _U64(30))) * _MIX1
            z = (z ^ (z >> _U64(27))) * _MIX2
            z = z ^ (z >> _U64(31))
        return z

    def uniform(self, n: int) -> np.ndarray:
        """n deterministic doubles in [0, 1)."""
        return (self._raw(n) >> _U64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """n standard-normal deviates via Box-Muller (consumes 2n draws)."""
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        # 1 - u1 lies in (0, 1], keeping the log argument strictly positive.
        r = np.sqrt(-2.0 * np.log1p(-u1))
        return r * np.cos(2.0 * np.pi * u2)

    def normal_matrix(self, rows: int, cols: int) -> np.ndarray:
        return self.normal(rows * cols).reshape(rows, cols)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform over [0, bound), by scaled uniforms."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Per coordinate j: ``(f(x + h*e_j) - f(x - h*e_j)) / (2h)``. This is the
    reference oracle for every hand-derived backward rule in the package,
    so it deliberately shares no code with them.

    Raises ValueError if any probe evaluation of ``f`` is non-finite
    (an oracle failure, not a gradient of the target function).
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x0 = as_vector(x, "x")
    grad = np.empty_like(x0)
    for j in range(x0.size):
        xp = x0.copy()
        xp[j] = x0[j] + h
        fp = float(f(xp))
        xp[j] = x0[j] - h
        fm = float(f(xp))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(
                f"finite-difference oracle failure: f non-finite at coordinate {j} "
                f"(f+={fp!r}, f-={fm!r})"
            )
        grad[j] = (fp - fm) / (2.0 * h)
    return grad
