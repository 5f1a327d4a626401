"""The six-term training objective and its three-pass gradient.

One update runs three passes over the coupling stack:

  P1 forward   [x; x_pad]            -> (z_hat, yzpad_hat, y_hat)
      label fit        L_y      = MSE(y, y_hat)
      output-pad fit   L_yzpad  = MSE(yz_pad, yzpad_hat)
      latent matching  L_yz     = SWD([y; z], [y_hat*; z_hat]),  z ~ N(0, I)
  P2 backward  [z_hat; yz_pad; y_hat] -> (x_hat, xpad_hat)
      reconstruction   L_xhat   = MSE(x, x_hat)
      input-pad fit    L_xpad   = MSE(x_pad, xpad_hat)
  P3 backward  [z; 0; y]             -> x_sam,  z ~ N(0, I)
      sample matching  L_xsam   = SWD(x, x_sam)

(*) The y_hat columns inside L_yz are detached: the latent matching term
contributes no gradient through y_hat, so it cannot disturb the label fit.
Everything else is differentiated through the full chain, including P2's
dependence on P1's outputs. Pads are drawn once per update per side: the
x_pad draw feeds P1 and is L_xpad's target; the yz_pad draw is L_yzpad's
target and feeds P2.

The weighted sum's parameter gradient accumulates across all three passes
and is validated against central differences (see training.grad_check).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import logging

import numpy as np

from .errors import NonFiniteError
from .model import InnModel
from .numerics import RngState
from .swd import SwdConfig, swd_with_grad

log = logging.getLogger(__name__)

TERM_NAMES = ("l_y", "l_xhat", "l_yz", "l_xsam", "l_xpad", "l_yzpad")


@dataclass
class LossWeights:
    w_y: float = 1.0
    w_xhat: float = 1.0
    w_yz: float = 1.0
    w_xsam: float = 1.0
    w_xpad: float = 1.0
    w_yzpad: float = 1.0

    def __post_init__(self):
        for name, value in self.to_dict().items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.w_y <= 0:
            raise ValueError("w_y must be > 0")

    def to_dict(self) -> dict:
        return {"w_y": self.w_y, "w_xhat": self.w_xhat, "w_yz": self.w_yz,
                "w_xsam": self.w_xsam, "w_xpad": self.w_xpad, "w_yzpad": self.w_yzpad}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class LossBreakdown:
    l_y: float
    l_xhat: float
    l_yz: float
    l_xsam: float
    l_xpad: float
    l_yzpad: float
    total: float

    def raw(self) -> tuple[float, ...]:
        return (self.l_y, self.l_xhat, self.l_yz, self.l_xsam, self.l_xpad, self.l_yzpad)

    def weighted(self, weights: LossWeights) -> tuple[float, ...]:
        w = (weights.w_y, weights.w_xhat, weights.w_yz,
             weights.w_xsam, weights.w_xpad, weights.w_yzpad)
        return tuple(wi * li for wi, li in zip(w, self.raw()))


def _mse(pred: np.ndarray, target: np.ndarray) -> float:
    d = pred - target
    return float(np.mean(d * d))


def _mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return (2.0 / pred.size) * (pred - target)


def _require_finite(value: float, term: str) -> float:
    if not np.isfinite(value):
        raise NonFiniteError(f"loss term {term} is non-finite")
    return value


def joint_step_losses(model: InnModel, x: np.ndarray, y: np.ndarray,
                      weights: LossWeights, rng: RngState, swd_m: int = 128,
                      want_grads: bool = True, detach_yhat: bool = True,
                      return_internals: bool = False,
                      _freeze_yhat_lyz: np.ndarray | None = None):
    """One update's losses and (optionally) parameter gradients.

    Consumes the rng in a fixed, documented order (x_pad, yz_pad, latent z,
    SWD seed, sample z, SWD seed), so a caller holding the same state
    reproduces the identical stochastic objective -- which is exactly what
    the finite-difference oracle needs. ``_freeze_yhat_lyz`` substitutes a
    constant for the y_hat columns inside L_yz; the oracle uses it to
    differentiate the same function the detached gradient is a gradient of.
    """
    sp = model.spec
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("distribution terms need a batch of at least 2 frames")
    if x.shape != (n, sp.d_x) or y.shape != (n, sp.d_y):
        raise ValueError(f"batch shapes {x.shape}/{y.shape} disagree with dim spec")

    # one draw per update per side, plus latent/sample noise and SWD streams
    x_pad = rng.normal((n, sp.d_xpad), sigma=model.pad_noise)
    yz_pad = rng.normal((n, sp.d_yzpad), sigma=model.pad_noise)
    z_latent = rng.normal((n, sp.d_z))
    cfg_yz = SwdConfig(m=swd_m, rng=RngState(rng.draw_seed()))
    z_sample = rng.normal((n, sp.d_z))
    cfg_xsam = SwdConfig(m=swd_m, rng=RngState(rng.draw_seed()))

    # P1: forward pass
    out1, caches1 = model.forward_mat(np.concatenate([x, x_pad], axis=1))
    z_hat = out1[:, sp.z_slice]
    yzpad_hat = out1[:, sp.yzpad_slice]
    y_hat = out1[:, sp.y_slice]

    l_y = _require_finite(_mse(y_hat, y), "L_y")
    l_yzpad = _require_finite(_mse(yzpad_hat, yz_pad), "L_yz_pad")

    yhat_in_lyz = y_hat if _freeze_yhat_lyz is None else _freeze_yhat_lyz
    a_yz = np.concatenate([y, z_latent], axis=1)
    b_yz = np.concatenate([yhat_in_lyz, z_hat], axis=1)
    l_yz, _, g_b_yz = swd_with_grad(a_yz, b_yz, cfg_yz)
    _require_finite(l_yz, "L_yz")

    # P2: backward pass from the predictions, fresh pad noise
    in2 = np.concatenate([z_hat, yz_pad, y_hat], axis=1)
    out2, caches2 = model.inverse_mat(in2)
    x_hat = out2[:, sp.x_slice]
    xpad_hat = out2[:, sp.xpad_slice]
    l_xhat = _require_finite(_mse(x_hat, x), "L_x_hat")
    l_xpad = _require_finite(_mse(xpad_hat, x_pad), "L_x_pad")

    # P3: generative pass from groundtruth labels
    in3 = np.concatenate([z_sample, np.zeros((n, sp.d_yzpad)), y], axis=1)
    out3, caches3 = model.inverse_mat(in3)
    x_sam = out3[:, sp.x_slice]
    l_xsam, _, g_xsam = swd_with_grad(x, x_sam, cfg_xsam)
    _require_finite(l_xsam, "L_x_sam")

    breakdown = LossBreakdown(
        l_y=l_y, l_xhat=l_xhat, l_yz=l_yz, l_xsam=l_xsam,
        l_xpad=l_xpad, l_yzpad=l_yzpad,
        total=weights.w_y * l_y + weights.w_xhat * l_xhat + weights.w_yz * l_yz
        + weights.w_xsam * l_xsam + weights.w_xpad * l_xpad + weights.w_yzpad * l_yzpad,
    )

    internals = {"y_hat": y_hat.copy()} if return_internals else None
    if not want_grads:
        return (breakdown, None, internals) if return_internals else (breakdown, None)

    grads = model.zero_grads()

    # P3 gradients: only the x slice of the inverse output carries loss
    g_out3 = np.zeros((n, sp.d_total))
    g_out3[:, sp.x_slice] = weights.w_xsam * g_xsam
    model.vjp_inverse(caches3, g_out3, grads)

    # P2 gradients flow into parameters and back into P1's outputs
    g_out2 = np.zeros((n, sp.d_total))
    g_out2[:, sp.x_slice] = weights.w_xhat * _mse_grad(x_hat, x)
    g_out2[:, sp.xpad_slice] = weights.w_xpad * _mse_grad(xpad_hat, x_pad)
    g_in2, _ = model.vjp_inverse(caches2, g_out2, grads)

    # assemble the gradient at P1's output: direct terms + P2 chain + latent SWD
    g_out1 = np.zeros((n, sp.d_total))
    g_out1[:, sp.z_slice] = g_in2[:, sp.z_slice] + weights.w_yz * g_b_yz[:, sp.d_y:]
    g_out1[:, sp.yzpad_slice] = weights.w_yzpad * _mse_grad(yzpad_hat, yz_pad)
    g_y = g_in2[:, sp.y_slice] + weights.w_y * _mse_grad(y_hat, y)
    if not detach_yhat and _freeze_yhat_lyz is None:
        g_y = g_y + weights.w_yz * g_b_yz[:, :sp.d_y]
    g_out1[:, sp.y_slice] = g_y
    model.vjp_forward(caches1, g_out1, grads)

    return (breakdown, grads, internals) if return_internals else (breakdown, grads)


def calibrate_weights(model: InnModel, batches, rng: RngState,
                      swd_m: int = 128) -> LossWeights:
    """Balance the six terms to a common magnitude on probe batches.

    Each weight is target / median(term over the probes), the target being
    the median of L_y, so w_y lands at exactly 1. A term whose median is 0
    gets weight 1 and a warning (nothing sensible to balance against).
    """
    batches = list(batches)
    if not batches:
        raise ValueError("calibration needs at least one probe batch")
    unit = LossWeights()
    values = {name: [] for name in TERM_NAMES}
    for bx, by in batches:
        breakdown, _ = joint_step_losses(model, bx, by, unit, rng, swd_m=swd_m,
                                         want_grads=False)
        for name, value in zip(TERM_NAMES, breakdown.raw()):
            values[name].append(value)
    medians = {name: float(np.median(vals)) for name, vals in values.items()}
    target = medians["l_y"]
    weights = {}
    for name in TERM_NAMES:
        if medians[name] == 0.0:
            log.warning("loss term %s has zero median over probe batches; weight set to 1", name)
            weights[name] = 1.0
        else:
            weights[name] = target / medians[name]
    return LossWeights(w_y=weights["l_y"], w_xhat=weights["l_xhat"], w_yz=weights["l_yz"],
                       w_xsam=weights["l_xsam"], w_xpad=weights["l_xpad"],
                       w_yzpad=weights["l_yzpad"])
