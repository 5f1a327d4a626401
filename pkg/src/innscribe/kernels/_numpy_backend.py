"""Pure numpy implementations of the coupling-layer elementwise kernels.

This is the fallback backend and the semantic reference: the compiled
extension must agree with these functions to floating-point round-off.
All inputs are float64 matrices (batch rows x feature columns).
"""

import numpy as np

NAME = "numpy"


def cexp(s, c):
    """Bounded exponential exp(c * atan(s)), elementwise."""
    return np.exp(c * np.arctan(s))


def cexp_vjp(g, s, w, c):
    """Backprop through cexp: g * d/ds exp(c*atan(s)) = g * w * c / (1 + s^2)."""
    return g * w * (c / (1.0 + s * s))


def leaky(x, alpha):
    return np.where(x > 0.0, x, alpha * x)


def leaky_vjp(g, x, alpha):
    return np.where(x > 0.0, g, alpha * g)


def scale_shift(w, a, t):
    """w * a + t, the coupling forward combine."""
    return w * a + t


def unscale_shift(v, t, w):
    """(v - t) / w, the coupling inverse combine (w > 0 always)."""
    return (v - t) / w
