"""Framewise metrics, threshold denoising, round-trip diagnostics, and probes.

The transcription score is framewise precision/recall/F1 over (frame, key)
cells of the binary piano roll, computed per piece and averaged. A key
counts as active when its note-phase channel exceeds the activity threshold.

The concept probe asks the generative direction for samples of one isolated
note and measures how far they land from a reference recording of that note,
frame by frame, summarized as quantiles over the samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import FramesFile, LABEL_WIDTH, N_INSTRUMENTS, PHASE_SLICE
from .errors import DimensionError
from .model import InnModel
from .numerics import RngState

PROBE_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
ACTIVITY_THRESHOLD = 0.5


def denoise(y_hat: np.ndarray, threshold: float) -> np.ndarray:
    """Zero all phase/velocity entries below the threshold; instrument block untouched."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    y = np.array(y_hat, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != LABEL_WIDTH:
        raise DimensionError(f"labels must be (n, {LABEL_WIDTH}), got {y.shape}")
    block = y[:, N_INSTRUMENTS:]
    block[block < threshold] = 0.0
    return y


@dataclass
class PrfReport:
    precision: float
    recall: float
    f1: float
    pieces: list[tuple[float, float, float]]


def _prf_single(y_hat, y_true, theta):
    pred = y_hat[:, PHASE_SLICE] > theta
    true = y_true[:, PHASE_SLICE] > theta
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    if tp + fp == 0 and tp + fn == 0:
        return 1.0, 1.0, 1.0  # nothing predicted, nothing to find
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def framewise_prf(y_hat, y_true, theta_active: float = ACTIVITY_THRESHOLD) -> PrfReport:
    """P/R/F1 per piece, then averaged. Accepts one matrix pair or sequences of them."""
    if isinstance(y_hat, np.ndarray):
        y_hat, y_true = [y_hat], [y_true]
    if len(y_hat) != len(y_true):
        raise DimensionError("prediction and truth piece counts differ")
    pieces = []
    for yh, yt in zip(y_hat, y_true):
        yh = np.asarray(yh, dtype=np.float64)
        yt = np.asarray(yt, dtype=np.float64)
        if yh.shape != yt.shape:
            raise DimensionError(f"piece shapes differ: {yh.shape} vs {yt.shape}")
        pieces.append(_prf_single(yh, yt, theta_active))
    arr = np.asarray(pieces)
    return PrfReport(precision=float(arr[:, 0].mean()), recall=float(arr[:, 1].mean()),
                     f1=float(arr[:, 2].mean()), pieces=pieces)


@dataclass
class ProbeReport:
    key: int
    quantile_ps: tuple[float, ...]
    per_frame: np.ndarray   # (len(ps), n_frames), quantiles over samples per frame
    pooled: np.ndarray      # (len(ps),), quantiles pooled over frames and samples
    distances: np.ndarray   # (n_samples, n_frames) raw Euclidean distances

    @property
    def median_distance(self) -> float:
        return float(self.pooled[self.quantile_ps.index(0.5)])


def concept_probe(model: InnModel, key: int, reference: FramesFile,
                  n_samples: int = 30, rng: RngState | None = None) -> ProbeReport:
    """Sample the generative direction on a reference note's labels.

    Each sample conditions on the reference's groundtruth labels frame by
    frame (so it has the reference's length), draws fresh nuisance noise, and
    measures the per-frame Euclidean distance to the reference frames.
    """
    if rng is None:
        rng = RngState(0)
    y_ref = reference.y.astype(np.float64)
    x_ref = reference.x.astype(np.float64)
    phase_col = PHASE_SLICE.start + key
    if not (0 <= key < PHASE_SLICE.stop - PHASE_SLICE.start):
        raise ValueError(f"key {key} out of range")
    if not np.any(y_ref[:, phase_col] > 0):
        raise ValueError(f"key {key} does not sound in the reference")
    n_frames = y_ref.shape[0]
    distances = np.empty((n_samples, n_frames))
    for s in range(n_samples):
        x_sam = model.sample(y_ref, rng)
        distances[s] = np.linalg.norm(x_sam - x_ref, axis=1)
    per_frame = np.quantile(distances, PROBE_QUANTILES, axis=0)
    pooled = np.quantile(distances.ravel(), PROBE_QUANTILES)
    return ProbeReport(key=key, quantile_ps=PROBE_QUANTILES, per_frame=per_frame,
                       pooled=pooled, distances=distances)


def roundtrip_report(model: InnModel, frames: FramesFile) -> float:
    """Forward with zero pads, invert with every prediction left intact; max |x - x_hat|."""
    sp = model.spec
    x = frames.x.astype(np.float64)
    if x.shape[1] != sp.d_x:
        raise DimensionError(f"frames are {x.shape[1]} wide, model expects {sp.d_x}")
    z, yzpad, y = model.forward(x, model.pad_for_inference(x))
    x_hat, _ = model.inverse(z, yzpad, y)
    return float(np.max(np.abs(x - x_hat)))


def write_pgm(path, values: np.ndarray) -> None:
    """Binary PGM (P5) heatmap; values are min-max scaled to 0..255."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("PGM output needs a 2-D array")
    lo, hi = float(a.min()), float(a.max())
    scale = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    img = np.round(scale * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
