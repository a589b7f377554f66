"""Python front end for the alignlab trainer.

Configs may be passed as dicts, JSON text or None (the toy defaults). Missing
keys keep their defaults; unknown keys raise ConfigError.
"""

import json

from . import _core
from ._core import (
    ConfigError,
    ContractError,
    DataError,
    Error,
    NumericError,
    build_id,
    cer,
    edit_distance,
    final_checkpoint,
    lr_at,
    pack_batches,
    transcribe,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "Error",
    "NumericError",
    "build_id",
    "cer",
    "config",
    "decode",
    "edit_distance",
    "final_checkpoint",
    "lr_at",
    "pack_batches",
    "prepare_data",
    "run_experiment",
    "score",
    "synthesize",
    "train",
    "transcribe",
]


def _text(cfg):
    if cfg is None:
        return "{}"
    if isinstance(cfg, str):
        return cfg
    return json.dumps(cfg)


def config(overrides=None, reference=False):
    """Resolved config as a dict."""
    return json.loads(_core.resolve_config(_text(overrides), reference))


def prepare_data(cfg, data_dir, force=False, reference=False):
    return _core.prepare_data(_text(cfg), str(data_dir), force, reference)


def train(cfg, run_dir, schedule="staged", resume=None, stop_after_stage=None, force=False, reference=False):
    return _core.train(_text(cfg), str(run_dir), schedule, None if resume is None else str(resume),
                       stop_after_stage, force, reference)


def decode(cfg, checkpoint, out_dir, reference=False):
    return _core.decode(_text(cfg), str(checkpoint), str(out_dir), reference)


def score(cfg, decode_dir, reference=False):
    return _core.score(_text(cfg), str(decode_dir), reference)


def synthesize(cfg, transcript, seed=0, condition="clean", reference=False):
    return _core.synthesize(_text(cfg), transcript, seed, condition, reference)


def run_experiment(name, cfg, root, reference=False):
    return _core.run_experiment(name, _text(cfg), str(root), reference)
