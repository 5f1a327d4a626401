"""Deterministic random sources, dense-array checks, and the finite-difference oracle.

All stochastic state in the package flows through :class:`RngState`, a thin
wrapper around numpy's Philox counter-based bit generator. Philox is keyed
by the seed alone, so the same seed and the same call sequence reproduce the
same doubles on every platform. Parallel or independent consumers never share
a state; they fork children via ``fork(stream_id)`` (child seed = parent seed
XOR stream id).
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError

_U64 = (1 << 64) - 1


class RngState:
    """Seeded, forkable random stream (Philox4x64 underneath).

    The stream position is the Philox counter; it advances with every draw
    and can be captured/restored exactly via ``state_dict``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64
        self._bitgen = np.random.Philox(self.seed)
        self._gen = np.random.Generator(self._bitgen)

    @property
    def position(self) -> tuple[int, ...]:
        """Philox 256-bit counter as four 64-bit words."""
        return tuple(int(w) for w in self._bitgen.state["state"]["counter"])

    def fork(self, stream_id: int) -> "RngState":
        """Independent child stream. Use distinct nonzero ids; id 0 clones the seed."""
        return RngState(self.seed ^ (int(stream_id) & _U64))

    def copy(self) -> "RngState":
        other = RngState(self.seed)
        other._bitgen.state = self._bitgen.state
        return other

    def state_dict(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "counter": [int(w) for w in st["state"]["counter"]],
            "key": [int(w) for w in st["state"]["key"]],
            "buffer": [int(w) for w in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "RngState":
        rng = cls(d["seed"])
        rng._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(d["counter"], dtype=np.uint64),
                "key": np.array(d["key"], dtype=np.uint64),
            },
            "buffer": np.array(d["buffer"], dtype=np.uint64),
            "buffer_pos": d["buffer_pos"],
            "has_uint32": d["has_uint32"],
            "uinteger": d["uinteger"],
        }
        return rng

    # raw draws -----------------------------------------------------------

    def normal(self, shape, sigma: float = 1.0) -> np.ndarray:
        z = self._gen.standard_normal(size=shape, dtype=np.float64)
        return z * sigma if sigma != 1.0 else z

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def draw_seed(self) -> int:
        """One fresh 64-bit seed, for handing to an independent consumer."""
        return int(self._gen.integers(0, _U64, dtype=np.uint64))

    def shuffled_indices(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


class Permutation:
    """Bijection on 0..d-1, stored as an index array (never a dense matrix)."""

    def __init__(self, forward_indices):
        idx = np.asarray(forward_indices, dtype=np.intp)
        if idx.ndim != 1:
            raise ValueError("permutation indices must be 1-D")
        d = idx.shape[0]
        if not np.array_equal(np.sort(idx), np.arange(d)):
            raise ValueError("indices are not a bijection on 0..d-1")
        self.forward_indices = idx
        self.inverse_indices = np.empty(d, dtype=np.intp)
        self.inverse_indices[idx] = np.arange(d)

    def __len__(self) -> int:
        return self.forward_indices.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, Permutation) and np.array_equal(
            self.forward_indices, other.forward_indices
        )

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Gather: out[..., i] = v[..., forward_indices[i]]. Exact, no arithmetic."""
        return v[..., self.forward_indices]

    def invert(self, v: np.ndarray) -> np.ndarray:
        return v[..., self.inverse_indices]


def gaussian(rng: RngState, rows: int, cols: int, sigma: float) -> np.ndarray:
    """i.i.d. N(0, sigma^2) matrix; sigma=0 yields exact zeros."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return rng.normal((rows, cols), sigma)


def random_unit_vector(rng: RngState, d: int) -> np.ndarray:
    """Uniform direction on the (d-1)-sphere; resamples the measure-zero zero draw."""
    if d < 1:
        raise ValueError("d must be >= 1")
    while True:
        p = rng.normal(d)
        norm = float(np.linalg.norm(p))
        if norm > 0.0:
            return p / norm


def random_permutation(rng: RngState, d: int) -> Permutation:
    """Uniformly random permutation (Fisher-Yates through the generator)."""
    if d < 2:
        raise ValueError("d must be >= 2")
    return Permutation(rng.shuffled_indices(d))


def ensure_mat(x, rows: int | None = None, cols: int | None = None, name: str = "matrix") -> np.ndarray:
    """Validate a dense real matrix: 2-D, finite, optional exact shape."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name}: expected 2-D array, got ndim={a.ndim}")
    if rows is not None and a.shape[0] != rows:
        raise ValueError(f"{name}: expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise ValueError(f"{name}: expected {cols} cols, got {a.shape[1]}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name}: contains non-finite entries")
    return a


def finite_diff_grad(f, at: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient oracle: (f(p + h e_i) - f(p - h e_i)) / 2h.

    Deliberately independent of any analytic derivative it is used to check.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    p = np.asarray(at, dtype=np.float64).copy()
    flat = p.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(p))
        flat[i] = orig - h
        fm = float(f(p))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_diff_grad: non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(p.shape)
