"""TOML experiment configuration: ``[corpus]``, ``[retrieval]``, ``[model]``, ``[train]``."""
from __future__ import annotations

import copy
import os
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .nafield.model import FieldConfig
from .rir import BandSpec
from .simulator import CorpusRecipe
from .training import ExperimentSettings, TrainRecipe

SEED_ENV = "AFK_SEED"

DEFAULTS: dict = {
    "seed": 0,
    "corpus": {
        "dir": "corpus",
        "rooms": 30,
        "pairs_per_room": 25,
        "length_s": 0.6,
        "sample_rate": 16000,
    },
    "retrieval": {"M": 10, "limit": 100, "random": False, "seed": 0, "bands": "default"},
    "model": {"num_bounce_points": 32, "hidden_width": 128, "hidden_layers": 4, "encoding_levels": 8},
    "train": {
        "pretrain": {"epochs": 80, "batch_size": 16, "step_size": 1e-3},
        "finetune": {"epochs": 100, "batch_size": 5, "step_size": 1e-3, "lora_rank": 1},
    },
    "experiment": {
        "target_room": "room000",
        "enrollment_count": 5,
        "evaluation_count": 20,
        "griffin_lim_iterations": 32,
        "use_retrieved_geometry": False,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the TOML file, then ``overrides``; ``AFK_SEED`` replaces a file seed."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, "rb") as fh:
            cfg = _merge(cfg, tomllib.load(fh))
    if os.environ.get(SEED_ENV):
        cfg["seed"] = int(os.environ[SEED_ENV])
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def corpus_recipe(cfg: dict) -> CorpusRecipe:
    return CorpusRecipe.from_dict(cfg["corpus"])


def bands(cfg: dict) -> BandSpec:
    b = cfg["retrieval"].get("bands", "default")
    return BandSpec.parse(b) if isinstance(b, str) else BandSpec(tuple(b))


def field_config(cfg: dict) -> FieldConfig:
    c = cfg["corpus"]
    sr = int(c.get("sample_rate", 16000))
    model = dict(cfg["model"])
    model.setdefault("rir_length", int(round(float(c.get("length_s", 0.6)) * sr)))
    model.setdefault("sample_rate", sr)
    return FieldConfig.from_dict(model)


def recipes(cfg: dict) -> tuple[TrainRecipe, TrainRecipe, TrainRecipe]:
    """(pretrain, finetune_full, finetune_lora) recipes seeded with the run seed."""
    seed = int(cfg["seed"])
    pre = TrainRecipe.from_dict({**cfg["train"]["pretrain"], "mode": "pretrain", "seed": seed})
    ft = cfg["train"]["finetune"]
    full = TrainRecipe.from_dict({**ft, "mode": "finetune_full", "seed": seed, "lora_rank": None})
    lora = TrainRecipe.from_dict({**ft, "mode": "finetune_lora", "seed": seed})
    return pre, full, lora


def experiment_settings(cfg: dict) -> ExperimentSettings:
    pre, full, lora = recipes(cfg)
    e = cfg["experiment"]
    return ExperimentSettings(
        config=field_config(cfg),
        pretrain=pre,
        finetune_full=full,
        finetune_lora=lora,
        m=int(cfg["retrieval"]["M"]),
        limit=int(cfg["retrieval"]["limit"]),
        enrollment_count=int(e["enrollment_count"]),
        evaluation_count=int(e["evaluation_count"]),
        bands=bands(cfg),
        griffin_lim_iterations=int(e["griffin_lim_iterations"]),
        use_retrieved_geometry=bool(e["use_retrieved_geometry"]),
    )
