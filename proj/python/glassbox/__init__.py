"""Python front end for the glassbox core: corpus generation, training,
evaluation and the two introspection tools."""

import json
import os

from ._glassbox import (
    ConfigError,
    Corpus,
    Instance,
    Model,
    average_ranks,
    default_probe_range,
    label_smoothing_nll,
    plcc,
    srcc,
)
from . import _glassbox as _core

__all__ = [
    "ConfigError", "Corpus", "Instance", "Model",
    "config", "load_config", "generate_corpus", "build_corpus", "train", "evaluate",
    "logit_lens", "attention_map", "default_probe_range",
    "srcc", "plcc", "average_ranks", "label_smoothing_nll",
]


def _text(cfg):
    return json.dumps(cfg or {})


def config(overrides=None):
    """Fully resolved run config (dict); unknown keys raise ConfigError."""
    return json.loads(_core._resolve_config(_text(overrides)))


def load_config(path):
    return json.loads(_core._load_config(os.fspath(path)))


def generate_corpus(cfg=None):
    """In-memory train/test split."""
    return _core._generate_corpus(_text(cfg))


def build_corpus(cfg, out_dir):
    """Writes the JSONL corpus; returns (total, train, test) counts."""
    return _core._build_corpus(_text(cfg), os.fspath(out_dir))


def train(cfg, regimen, corpus):
    """Returns (Model, [(iter, loss), ...]). regimen: one_stage | two_stage."""
    return _core._train(_text(cfg), regimen, corpus)


def evaluate(model, samples, cfg=None, mode=None):
    """Instability / accuracy / SRCC / PLCC report as a dict. The mode
    defaults to the model's regimen tag."""
    return json.loads(_core._evaluate(model, list(samples), _text(cfg), mode or model.tag))


def logit_lens(model, instance, regimen=None, position=None, layers="auto", k=4):
    """[(layer, [(token, probability), ...]), ...] at the quality position."""
    return _core._logit_lens(model, instance, regimen or model.tag, position, layers, k)


def attention_map(model, samples, regimen=None):
    """Averaged attention relation: mean map (numpy), quality-row segment mass."""
    return _core._attention_map(model, list(samples), regimen or model.tag)
