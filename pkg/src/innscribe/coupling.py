"""One invertible block: dimension shuffle plus two-stage affine coupling.

Forward (inputs permuted first, then split into halves u1, u2):

    v1 = cexp(s2(u2)) * u1 + t2(u2)
    v2 = cexp(s1(v1)) * u2 + t1(v1)

The inverse is closed-form because each half is transformed using only the
other (already recovered) half; the permutation is undone last. ``cexp``
keeps every multiplicative factor inside (e^{-c pi/2}, e^{c pi/2}), so the
block is invertible for arbitrary finite parameters, and division in the
inverse is always safe.

Reverse-mode gradients (vector-Jacobian products) are provided for both
directions, since training attaches losses to outputs of the map and of its
inverse. They are validated against the central-difference oracle in
``numerics``.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import NonFiniteError
from .numerics import Permutation, RngState, random_permutation

LEAKY_ALPHA_DEFAULT = 0.01
CLAMP_DEFAULT = 2.0


def cexp(x, c):
    """Bounded exponential exp(c * atan(x)); strictly positive, range (e^{-c pi/2}, e^{c pi/2})."""
    if c <= 0:
        raise ValueError("clamp constant c must be > 0")
    return np.exp(c * np.arctan(x))


def _check_stage(arr: np.ndarray, stage: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by subnet stage {stage}")
    return arr


class Subnet:
    """Two affine stages with a leaky-rectifier between: d_half -> hidden -> d_half."""

    def __init__(self, w1, b1, w2, b2, alpha=LEAKY_ALPHA_DEFAULT):
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.alpha = float(alpha)
        if self.w1.shape[1] != self.b1.shape[0] or self.w2.shape[0] != self.b1.shape[0]:
            raise ValueError("inconsistent hidden width")
        if self.w2.shape[1] != self.b2.shape[0]:
            raise ValueError("inconsistent output width")
        for name in ("w1", "b1", "w2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteError(f"subnet parameter {name} is non-finite")

    @classmethod
    def create(cls, rng: RngState, d_half: int, hidden: int,
               alpha: float = LEAKY_ALPHA_DEFAULT, final_zero: bool = True) -> "Subnet":
        """Hidden weights ~ N(0, 1/fan_in); final stage zero so the layer starts as identity."""
        w1 = rng.normal((d_half, hidden), sigma=1.0 / np.sqrt(d_half))
        b1 = np.zeros(hidden)
        if final_zero:
            w2 = np.zeros((hidden, d_half))
        else:
            w2 = rng.normal((hidden, d_half), sigma=1.0 / np.sqrt(hidden))
        b2 = np.zeros(d_half)
        return cls(w1, b1, w2, b2, alpha)

    def randomize(self, rng: RngState, scale: float = 1.0) -> None:
        # in place, so parameter views into a consolidated buffer stay live
        din, hidden = self.w1.shape
        self.w1[...] = rng.normal((din, hidden), sigma=scale / np.sqrt(din))
        self.b1[...] = rng.normal(hidden, sigma=0.1 * scale)
        self.w2[...] = rng.normal((hidden, din), sigma=scale / np.sqrt(hidden))
        self.b2[...] = rng.normal(din, sigma=0.1 * scale)

    def forward(self, a: np.ndarray):
        hpre = a @ self.w1 + self.b1
        h = K.leaky(hpre, self.alpha)
        out = h @ self.w2 + self.b2
        return out, (a, hpre, h)

    def vjp(self, cache, g_out: np.ndarray, grads: "SubnetGrads") -> np.ndarray:
        a, hpre, h = cache
        grads.b2 += g_out.sum(axis=0)
        grads.w2 += h.T @ g_out
        g_h = g_out @ self.w2.T
        g_hpre = K.leaky_vjp(g_h, hpre, self.alpha)
        grads.w1 += a.T @ g_hpre
        grads.b1 += g_hpre.sum(axis=0)
        return g_hpre @ self.w1.T

    def param_arrays(self):
        return (self.w1, self.b1, self.w2, self.b2)

    def set_param_arrays(self, arrays) -> None:
        self.w1, self.b1, self.w2, self.b2 = [np.asarray(a, dtype=np.float64) for a in arrays]


class SubnetGrads:
    __slots__ = ("w1", "b1", "w2", "b2")

    def __init__(self, subnet: Subnet):
        self.w1 = np.zeros_like(subnet.w1)
        self.b1 = np.zeros_like(subnet.b1)
        self.w2 = np.zeros_like(subnet.w2)
        self.b2 = np.zeros_like(subnet.b2)

    def arrays(self):
        return (self.w1, self.b1, self.w2, self.b2)


class LayerGrads:
    __slots__ = ("s1", "t1", "s2", "t2")

    def __init__(self, layer: "CouplingLayer"):
        self.s1 = SubnetGrads(layer.s1)
        self.t1 = SubnetGrads(layer.t1)
        self.s2 = SubnetGrads(layer.s2)
        self.t2 = SubnetGrads(layer.t2)

    def arrays(self):
        for sub in (self.s1, self.t1, self.s2, self.t2):
            yield from sub.arrays()


class CouplingCache:
    """Intermediates retained by one pass, keyed to the direction they came from."""

    __slots__ = ("direction", "u1", "u2", "v1", "s2o", "w2", "s1o", "w1",
                 "c_s1", "c_t1", "c_s2", "c_t2")

    def __init__(self, direction, u1, u2, v1, s2o, w2, s1o, w1, c_s1, c_t1, c_s2, c_t2):
        self.direction = direction
        self.u1, self.u2, self.v1 = u1, u2, v1
        self.s2o, self.w2, self.s1o, self.w1 = s2o, w2, s1o, w1
        self.c_s1, self.c_t1, self.c_s2, self.c_t2 = c_s1, c_t1, c_s2, c_t2


class CouplingLayer:
    """Permutation + four subnets + clamp constant; bijective by construction."""

    def __init__(self, perm: Permutation, s1: Subnet, t1: Subnet, s2: Subnet, t2: Subnet,
                 c: float = CLAMP_DEFAULT):
        d = len(perm)
        if d % 2 != 0:
            raise ValueError(f"coupling width must be even, got {d}")
        if c <= 0:
            raise ValueError("clamp constant c must be > 0")
        half = d // 2
        for name, sub in (("s1", s1), ("t1", t1), ("s2", s2), ("t2", t2)):
            if sub.w1.shape[0] != half or sub.w2.shape[1] != half:
                raise ValueError(f"subnet {name} width {sub.w1.shape[0]} != d/2 = {half}")
        self.d = d
        self.perm = perm
        self.s1, self.t1, self.s2, self.t2 = s1, t1, s2, t2
        self.c = float(c)

    @classmethod
    def create(cls, rng: RngState, d: int, hidden: int, c: float = CLAMP_DEFAULT,
               alpha: float = LEAKY_ALPHA_DEFAULT, final_zero: bool = True) -> "CouplingLayer":
        if d % 2 != 0:
            raise ValueError(f"coupling width must be even, got {d}")
        perm = random_permutation(rng, d)
        half = d // 2
        subs = [Subnet.create(rng, half, hidden, alpha, final_zero) for _ in range(4)]
        return cls(perm, *subs, c=c)

    def randomize(self, rng: RngState, scale: float = 1.0) -> None:
        for sub in (self.s1, self.t1, self.s2, self.t2):
            sub.randomize(rng, scale)

    def subnets(self):
        return (self.s1, self.t1, self.s2, self.t2)

    # forward direction -----------------------------------------------------

    def forward(self, u: np.ndarray):
        """Permute, split, couple. Returns (v, cache) with everything the VJP needs."""
        up = self.perm.apply(u)
        half = self.d // 2
        u1, u2 = up[:, :half], up[:, half:]
        s2o, c_s2 = self.s2.forward(u2)
        _check_stage(s2o, "s2")
        t2o, c_t2 = self.t2.forward(u2)
        _check_stage(t2o, "t2")
        w2 = K.cexp(s2o, self.c)
        v1 = K.scale_shift(w2, u1, t2o)
        s1o, c_s1 = self.s1.forward(v1)
        _check_stage(s1o, "s1")
        t1o, c_t1 = self.t1.forward(v1)
        _check_stage(t1o, "t1")
        w1 = K.cexp(s1o, self.c)
        v2 = K.scale_shift(w1, u2, t1o)
        v = np.concatenate([v1, v2], axis=1)
        cache = CouplingCache("forward", u1, u2, v1, s2o, w2, s1o, w1, c_s1, c_t1, c_s2, c_t2)
        return v, cache

    def inverse(self, v: np.ndarray) -> np.ndarray:
        u, _ = self.inverse_with_cache(v)
        return u

    def inverse_with_cache(self, v: np.ndarray):
        half = self.d // 2
        v1, v2 = v[:, :half], v[:, half:]
        s1o, c_s1 = self.s1.forward(v1)
        _check_stage(s1o, "s1")
        t1o, c_t1 = self.t1.forward(v1)
        _check_stage(t1o, "t1")
        w1 = K.cexp(s1o, self.c)
        u2 = K.unscale_shift(v2, t1o, w1)
        s2o, c_s2 = self.s2.forward(u2)
        _check_stage(s2o, "s2")
        t2o, c_t2 = self.t2.forward(u2)
        _check_stage(t2o, "t2")
        w2 = K.cexp(s2o, self.c)
        u1 = K.unscale_shift(v1, t2o, w2)
        up = np.concatenate([u1, u2], axis=1)
        u = self.perm.invert(up)
        cache = CouplingCache("inverse", u1, u2, v1, s2o, w2, s1o, w1, c_s1, c_t1, c_s2, c_t2)
        return u, cache

    # reverse-mode gradients -------------------------------------------------

    def vjp(self, cache: CouplingCache, upstream: np.ndarray, grads: LayerGrads | None = None):
        """J^T * upstream for the direction recorded in the cache.

        Returns (grad wrt that direction's input, grads); parameter gradients
        accumulate into ``grads`` (freshly allocated when not supplied).
        """
        if grads is None:
            grads = LayerGrads(self)
        if cache.direction == "forward":
            g_in = self._vjp_forward(cache, upstream, grads)
        elif cache.direction == "inverse":
            g_in = self._vjp_inverse(cache, upstream, grads)
        else:
            raise ValueError(f"cache direction {cache.direction!r} unknown")
        return g_in, grads

    def _vjp_forward(self, cache, g_v, grads):
        half = self.d // 2
        g_v1 = g_v[:, :half].copy()
        g_v2 = g_v[:, half:]
        # v2 = w1 * u2 + t1(v1), with w1 = cexp(s1(v1))
        g_w1 = g_v2 * cache.u2
        g_u2 = g_v2 * cache.w1
        g_s1o = K.cexp_vjp(g_w1, cache.s1o, cache.w1, self.c)
        g_v1 += self.s1.vjp(cache.c_s1, g_s1o, grads.s1)
        g_v1 += self.t1.vjp(cache.c_t1, g_v2, grads.t1)
        # v1 = w2 * u1 + t2(u2), with w2 = cexp(s2(u2))
        g_w2 = g_v1 * cache.u1
        g_u1 = g_v1 * cache.w2
        g_s2o = K.cexp_vjp(g_w2, cache.s2o, cache.w2, self.c)
        g_u2 = g_u2 + self.s2.vjp(cache.c_s2, g_s2o, grads.s2)
        g_u2 += self.t2.vjp(cache.c_t2, g_v1, grads.t2)
        g_up = np.concatenate([g_u1, g_u2], axis=1)
        return self.perm.invert(g_up)

    def _vjp_inverse(self, cache, g_u, grads):
        half = self.d // 2
        g_up = self.perm.apply(g_u)
        g_u1 = g_up[:, :half]
        g_u2 = g_up[:, half:].copy()
        # u1 = (v1 - t2(u2)) / w2, with w2 = cexp(s2(u2))
        g_over_w2 = g_u1 / cache.w2
        g_v1 = g_over_w2.copy()
        g_w2 = -g_over_w2 * cache.u1
        g_s2o = K.cexp_vjp(g_w2, cache.s2o, cache.w2, self.c)
        g_u2 += self.s2.vjp(cache.c_s2, g_s2o, grads.s2)
        g_u2 += self.t2.vjp(cache.c_t2, -g_over_w2, grads.t2)
        # u2 = (v2 - t1(v1)) / w1, with w1 = cexp(s1(v1))
        g_over_w1 = g_u2 / cache.w1
        g_w1 = -g_over_w1 * cache.u2
        g_s1o = K.cexp_vjp(g_w1, cache.s1o, cache.w1, self.c)
        g_v1 += self.s1.vjp(cache.c_s1, g_s1o, grads.s1)
        g_v1 += self.t1.vjp(cache.c_t1, -g_over_w1, grads.t1)
        g_v = np.concatenate([g_v1, g_over_w1], axis=1)
        return g_v

    def param_arrays(self):
        for sub in self.subnets():
            yield from sub.param_arrays()
