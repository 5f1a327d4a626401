"""Run configuration: a JSON file with a strict key schema, overridable by flags.

Schema (all sections and keys optional; unknown keys are errors):

    {
      "seed": 0,
      "dims":   {"d_x": 144, "d_y": 185, "d_z": 9, "d_total": 256},
      "model":  {"n_layers": 5, "hidden": 64, "clamp": 2.0, "alpha": 0.01,
                 "pad_noise": 0.01},
      "train":  {"epochs": 30, "batch_size": 64, "learning_rate": 0.001,
                 "beta1": 0.9, "beta2": 0.999, "adam_delta": 1e-8,
                 "checkpoint_every": 10, "calib_batches": 8},
      "swd":    {"m": 128},
      "corpus": {"train_pieces": 40, "valid_pieces": 2, "test_pieces": 10,
                 "piece_seconds": 60.0, "fps": 25,
                 "train_instruments": [0, 1, 2], "holdout_instrument": 3,
                 "polyphony_max": 4, "key_low": 20, "key_high": 70,
                 "note_rate": 3.0, "sustain_prob": 0.0,
                 "probe_note_seconds": 1.2, "probe_piece_seconds": 2.0}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .datagen import CorpusSpec
from .model import DimSpec
from .training import TrainConfig

_SECTIONS = ("dims", "model", "train", "swd", "corpus")

_MODEL_KEYS = ("n_layers", "hidden", "clamp", "alpha", "pad_noise")
_TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "beta1", "beta2",
               "adam_delta", "checkpoint_every", "calib_batches")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    dims: DimSpec = field(default_factory=DimSpec)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    swd_m: int = 128

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, dims=self.dims, swd_m=self.swd_m,
                           **self.model, **self.train)

    def resolved(self) -> dict:
        tc = self.train_config()
        return {
            "seed": self.seed,
            "dims": self.dims.to_dict(),
            "model": {k: getattr(tc, k) for k in _MODEL_KEYS},
            "train": {k: getattr(tc, k) for k in _TRAIN_KEYS},
            "swd": {"m": self.swd_m},
            "corpus": {f.name: getattr(self.corpus, f.name) for f in fields(CorpusSpec)},
        }


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def load_run_config(path=None, seed_override: int | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    _check_keys("config", raw, ("seed", *_SECTIONS))

    cfg = RunConfig()
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    if "dims" in raw:
        _check_keys("dims", raw["dims"], ("d_x", "d_y", "d_z", "d_total"))
        cfg.dims = DimSpec(**raw["dims"])
    if "model" in raw:
        _check_keys("model", raw["model"], _MODEL_KEYS)
        cfg.model = dict(raw["model"])
    if "train" in raw:
        _check_keys("train", raw["train"], _TRAIN_KEYS)
        cfg.train = dict(raw["train"])
    if "swd" in raw:
        _check_keys("swd", raw["swd"], ("m",))
        cfg.swd_m = int(raw["swd"]["m"])
    if "corpus" in raw:
        allowed = tuple(f.name for f in fields(CorpusSpec))
        _check_keys("corpus", raw["corpus"], allowed)
        kwargs = dict(raw["corpus"])
        if "train_instruments" in kwargs:
            kwargs["train_instruments"] = tuple(kwargs["train_instruments"])
        cfg.corpus = CorpusSpec(**kwargs)
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg
