"""INNCKPT1 checkpoint format.

Layout: 8-byte magic ``INNCKPT1``, little-endian uint32 header length, UTF-8
JSON header, then all subnet parameters as little-endian float64 in a fixed
order: layer-major; per layer the subnets s1, t1, s2, t2; per subnet the
first affine stage's weights then bias, then the second stage's weights then
bias. Matrices are row-major. When the header says ``has_optimizer``, the
parameter block is followed by the optimizer's first-moment block and then
the second-moment block, each in the same order and size as the parameters.

The header carries the dimension budget, layer count, hidden width, clamp
constant, padding noise scale, all permutation index arrays, seeds, training
step, and loss weights, so a reload rebuilds the model bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .coupling import CouplingLayer, Subnet
from .errors import FormatError
from .model import DimSpec, InnModel
from .numerics import Permutation

MAGIC = b"INNCKPT1"
_FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    model: InnModel
    step: int
    loss_weights: dict | None
    train_rng: dict | None
    opt_m: list[np.ndarray] | None
    opt_v: list[np.ndarray] | None
    header: dict


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model: InnModel, step: int = 0, loss_weights=None,
                    train_rng=None, opt_m=None, opt_v=None) -> None:
    if (opt_m is None) != (opt_v is None):
        raise ValueError("optimizer moments must be given together")
    weights_dict = None
    if loss_weights is not None:
        weights_dict = loss_weights if isinstance(loss_weights, dict) else loss_weights.to_dict()
    header = {
        "format_version": _FORMAT_VERSION,
        "dims": model.spec.to_dict(),
        "n_layers": len(model.layers),
        "hidden": model.hidden,
        "clamp": model.clamp,
        "alpha": model.alpha,
        "pad_noise": model.pad_noise,
        "input_order": ["x", "xpad"],
        "output_order": ["z", "yzpad", "y"],
        "permutations": [layer.perm.forward_indices.tolist() for layer in model.layers],
        "init_seed": model.init_seed,
        "step": int(step),
        "loss_weights": weights_dict,
        "train_rng": train_rng,
        "param_count": model.param_count,
        "has_optimizer": opt_m is not None,
    }
    blob = _header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in model.param_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if opt_m is not None:
            for block in (opt_m, opt_v):
                for arr in block:
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated checkpoint: expected {n} bytes for {what} at offset {fh.tell() - len(data)}, "
            f"got {len(data)}")
    return data


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
        if header.get("format_version") != _FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")

        spec = DimSpec.from_dict(header["dims"])
        half = spec.d_total // 2
        hidden = header["hidden"]
        shapes = [(half, hidden), (hidden,), (hidden, half), (half,)]

        def read_subnet() -> Subnet:
            arrays = []
            for shape in shapes:
                count = int(np.prod(shape))
                raw = _read_exact(fh, count * 8, "parameters")
                arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
            return Subnet(*arrays, alpha=header["alpha"])

        layers = []
        for perm_idx in header["permutations"]:
            subs = [read_subnet() for _ in range(4)]
            layers.append(CouplingLayer(Permutation(perm_idx), *subs, c=header["clamp"]))
        if len(layers) != header["n_layers"]:
            raise FormatError("layer count disagrees with permutation list")

        model = InnModel(spec, layers, hidden=hidden, pad_noise=header["pad_noise"],
                         init_seed=header["init_seed"])
        if model.param_count != header["param_count"]:
            raise FormatError("parameter count disagrees with header")

        opt_m = opt_v = None
        if header["has_optimizer"]:
            param_shapes = [a.shape for a in model.param_arrays()]

            def read_block():
                block = []
                for shape in param_shapes:
                    count = int(np.prod(shape))
                    raw = _read_exact(fh, count * 8, "optimizer moments")
                    block.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
                return block

            opt_m = read_block()
            opt_v = read_block()
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"unexpected trailing bytes at offset {fh.tell() - 1}")

    return CheckpointData(
        model=model,
        step=header["step"],
        loss_weights=header["loss_weights"],
        train_rng=header["train_rng"],
        opt_m=opt_m,
        opt_v=opt_v,
        header=header,
    )
