"""The stacked invertible network: dimension budget, padding, and usage modes.

A frame pipeline has three widths: input features (d_x), semantic labels
(d_y), and nuisance outputs (d_z). Both sides are padded up to a common even
total so the bijection is square; the output layout is positional and fixed:

    input  [ x | x_pad ]                (d_x + d_xpad = d_total)
    output [ z | yz_pad | y ]           (d_z + d_yzpad + d_y = d_total)

Padding is exact zeros at inference and small Gaussian noise during
training. The network supports three modes: forward inference (x -> z, y),
controlled inversion (z, pads, y -> x), and generative sampling (draw
z ~ N(0, I), zero pads, condition on y).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coupling import CouplingLayer, LayerGrads
from .errors import DimensionError
from .numerics import RngState


@dataclass(frozen=True)
class DimSpec:
    """Width bookkeeping; defaults give pads 112 and 62 (144+112 = 9+62+185 = 256)."""

    d_x: int = 144
    d_y: int = 185
    d_z: int = 9
    d_total: int = 256

    def __post_init__(self):
        if min(self.d_x, self.d_y, self.d_z) < 1:
            raise DimensionError("d_x, d_y, d_z must all be >= 1")
        if self.d_xpad < 0 or self.d_yzpad < 0:
            raise DimensionError(
                f"total width {self.d_total} too small for x={self.d_x} or "
                f"y+z={self.d_y + self.d_z}")
        if self.d_total % 2 != 0:
            raise DimensionError(f"total width must be even, got {self.d_total}")

    @property
    def d_xpad(self) -> int:
        return self.d_total - self.d_x

    @property
    def d_yzpad(self) -> int:
        return self.d_total - self.d_y - self.d_z

    # positional layout, never inferred
    @property
    def z_slice(self):
        return slice(0, self.d_z)

    @property
    def yzpad_slice(self):
        return slice(self.d_z, self.d_z + self.d_yzpad)

    @property
    def y_slice(self):
        return slice(self.d_z + self.d_yzpad, self.d_total)

    @property
    def x_slice(self):
        return slice(0, self.d_x)

    @property
    def xpad_slice(self):
        return slice(self.d_x, self.d_total)

    def to_dict(self) -> dict:
        return {"d_x": self.d_x, "d_y": self.d_y, "d_z": self.d_z, "d_total": self.d_total}

    @classmethod
    def from_dict(cls, d: dict) -> "DimSpec":
        return cls(**d)


def _as_batch(a, width, name):
    arr = np.asarray(a, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise DimensionError(f"{name}: expected width {width}, got shape {arr.shape}")
    return arr, squeeze


class InnModel:
    """Ordered coupling-layer stack over a fixed dimension budget."""

    def __init__(self, spec: DimSpec, layers: list[CouplingLayer],
                 hidden: int, pad_noise: float = 0.01, init_seed: int = 0):
        for i, layer in enumerate(layers):
            if layer.d != spec.d_total:
                raise DimensionError(f"layer {i} width {layer.d} != d_total {spec.d_total}")
        self.spec = spec
        self.layers = layers
        self.hidden = int(hidden)
        self.pad_noise = float(pad_noise)
        self.init_seed = int(init_seed)

    @classmethod
    def create(cls, spec: DimSpec = DimSpec(), n_layers: int = 5, hidden: int = 64,
               clamp: float = 2.0, alpha: float = 0.01, pad_noise: float = 0.01,
               seed: int = 0, final_zero: bool = True) -> "InnModel":
        rng = RngState(seed)
        layers = [CouplingLayer.create(rng, spec.d_total, hidden, clamp, alpha, final_zero)
                  for _ in range(n_layers)]
        return cls(spec, layers, hidden, pad_noise, init_seed=seed)

    def randomize(self, rng: RngState, scale: float = 1.0) -> None:
        for layer in self.layers:
            layer.randomize(rng, scale)

    @property
    def clamp(self) -> float:
        return self.layers[0].c

    @property
    def alpha(self) -> float:
        return self.layers[0].s1.alpha

    # raw stack ------------------------------------------------------------

    def forward_mat(self, x_full: np.ndarray):
        caches = []
        out = x_full
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def inverse_mat(self, v_full: np.ndarray):
        caches = []
        out = v_full
        for layer in reversed(self.layers):
            out, cache = layer.inverse_with_cache(out)
            caches.append(cache)
        return out, caches

    def vjp_forward(self, caches, g_out: np.ndarray, grads=None):
        if grads is None:
            grads = self.zero_grads()
        g = g_out
        for layer, cache, lg in zip(reversed(self.layers), reversed(caches), reversed(grads)):
            g, _ = layer.vjp(cache, g, lg)
        return g, grads

    def vjp_inverse(self, caches, g_out: np.ndarray, grads=None):
        if grads is None:
            grads = self.zero_grads()
        g = g_out
        for layer, cache, lg in zip(self.layers, reversed(caches), grads):
            g, _ = layer.vjp(cache, g, lg)
        return g, grads

    # usage modes ------------------------------------------------------------

    def forward(self, x, x_pad):
        """[x; x_pad] through the stack, split as (z_hat, yzpad_hat, y_hat)."""
        sp = self.spec
        x, squeeze = _as_batch(x, sp.d_x, "x")
        x_pad, _ = _as_batch(x_pad, sp.d_xpad, "x_pad")
        if x.shape[0] != x_pad.shape[0]:
            raise DimensionError("x and x_pad row counts differ")
        out, _ = self.forward_mat(np.concatenate([x, x_pad], axis=1))
        z, yzpad, y = out[:, sp.z_slice], out[:, sp.yzpad_slice], out[:, sp.y_slice]
        if squeeze:
            return z[0], yzpad[0], y[0]
        return z, yzpad, y

    def inverse(self, z, yzpad, y):
        """Exact algebraic inverse of forward: (x_hat, xpad_hat)."""
        sp = self.spec
        z, squeeze = _as_batch(z, sp.d_z, "z")
        yzpad, _ = _as_batch(yzpad, sp.d_yzpad, "yzpad")
        y, _ = _as_batch(y, sp.d_y, "y")
        if not (z.shape[0] == yzpad.shape[0] == y.shape[0]):
            raise DimensionError("z/yzpad/y row counts differ")
        out, _ = self.inverse_mat(np.concatenate([z, yzpad, y], axis=1))
        x, xpad = out[:, sp.x_slice], out[:, sp.xpad_slice]
        if squeeze:
            return x[0], xpad[0]
        return x, xpad

    def sample(self, y, rng: RngState):
        """Draw z ~ N(0, I), zero the pads exactly, return the x part of the inverse."""
        sp = self.spec
        y2, squeeze = _as_batch(y, sp.d_y, "y")
        n = y2.shape[0]
        z = rng.normal((n, sp.d_z))
        yzpad = np.zeros((n, sp.d_yzpad))
        x, _ = self.inverse(z, yzpad, y2)
        return x[0] if squeeze else x

    def pad_for_training(self, x, rng: RngState, eps: float | None = None) -> np.ndarray:
        x2, squeeze = _as_batch(x, self.spec.d_x, "x")
        eps = self.pad_noise if eps is None else eps
        if eps < 0:
            raise ValueError("pad noise scale must be >= 0")
        pad = rng.normal((x2.shape[0], self.spec.d_xpad), sigma=eps)
        return pad[0] if squeeze else pad

    def pad_for_inference(self, x) -> np.ndarray:
        x2, squeeze = _as_batch(x, self.spec.d_x, "x")
        pad = np.zeros((x2.shape[0], self.spec.d_xpad))
        return pad[0] if squeeze else pad

    # parameter plumbing -----------------------------------------------------

    def param_arrays(self):
        for layer in self.layers:
            yield from layer.param_arrays()

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self.param_arrays())

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.param_arrays()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise DimensionError(f"flat parameter vector has wrong length {flat.shape}")
        pos = 0
        for a in self.param_arrays():
            np.copyto(a, flat[pos:pos + a.size].reshape(a.shape))
            pos += a.size

    def zero_grads(self) -> list[LayerGrads]:
        return [LayerGrads(layer) for layer in self.layers]

    def composed_permutation(self) -> np.ndarray:
        """Index map of the whole stack at identity initialization (perms only)."""
        idx = np.arange(self.spec.d_total)
        for layer in self.layers:
            idx = idx[layer.perm.forward_indices]
        return idx


def grad_arrays(grads) -> list[np.ndarray]:
    """Gradient arrays in canonical (checkpoint) parameter order."""
    out = []
    for lg in grads:
        out.extend(lg.arrays())
    return out


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([a.ravel() for a in grad_arrays(grads)])
