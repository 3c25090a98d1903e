"""Run configuration: one JSON document covering the synthetic task, the
model, training, decoding, and long-form generation.

Loading merges the user document over the defaults below, rejecting unknown
keys at every nesting level, and returns the fully materialized dict so
every run log echoes the complete effective configuration.
"""

import copy
import json

from casr.frontend import SynthTaskSpec
from casr.model import ModelConfig
from casr.trainer import TrainConfig


class ConfigError(ValueError):
    """Raised for malformed run configurations."""


DEFAULTS = {
    "task": {
        "vocab_size": 6,
        "feature_dim": 6,
        "frames_per_token": 4,
        "duration_jitter": 1,
        "noise_sigma": 0.6,
        "seed": 0,
        "frame_period_ms": 10.0,
        "min_tokens": 2,
        "max_tokens": 6,
    },
    "model": {
        "vocab_size": 6,
        "feature_dim": 6,
        "stack": 2,
        "stride": 2,
        "embed_units": 8,
        "pred_hidden": 16,
        "pred_proj": 16,
        "joint_units": 16,
        "encoder": {
            "causal_kind": "lstm",
            "causal_layers": 1,
            "noncausal_kind": "bilstm",
            "noncausal_layers": 2,
            "hidden_units": 24,
            "proj_units": 16,
            "attn_heads": 2,
            "conv_kernel": 3,
            "right_context_frames": 2,
            "time_reduction_after_layer": None,
            "max_positions": 512,
        },
    },
    "train": {
        "lambda": 0.5,
        "beta": 0.0,
        "strategy": "sampled",
        "learning_rate": 5e-3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "clip_norm": 5.0,
        "batch_size": 8,
        "steps": 2000,
        "seed": 0,
        "checkpoint_every": 0,
    },
    "decode": {
        "beam": 0,
        "max_symbols_per_frame": 4,
    },
    "longform": {
        "n_utterances": 10,
        "tokens_each": 3,
        "silence_frames": 4,
    },
}


def _merge(defaults, override, path):
    out = copy.deepcopy(defaults)
    if not isinstance(override, dict):
        raise ConfigError("%s must be an object" % (path or "config",))
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError("unknown config key %r"
                              % ((path + "." + key).lstrip("."),))
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value,
                              (path + "." + key).lstrip("."))
        else:
            out[key] = value
    return out


def default_run_config():
    return copy.deepcopy(DEFAULTS)


def load_run_config(source=None):
    """Materialize a full run config from a path, dict, or None (defaults).

    The result always contains every key with its effective value.
    """
    if source is None:
        return default_run_config()
    if isinstance(source, dict):
        doc = source
    else:
        try:
            with open(source, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError("invalid JSON in %s: %s" % (source, exc))
    return _merge(DEFAULTS, doc, "")


def build_task_spec(cfg):
    task = dict(cfg["task"])
    task.pop("min_tokens")
    task.pop("max_tokens")
    try:
        return SynthTaskSpec(**task)
    except ValueError as exc:
        raise ConfigError(str(exc))


def build_model_config(cfg):
    try:
        return ModelConfig(**copy.deepcopy(cfg["model"]))
    except ValueError as exc:
        raise ConfigError(str(exc))


def build_train_config(cfg):
    train = dict(cfg["train"])
    train.pop("checkpoint_every")
    try:
        return TrainConfig.from_dict(train)
    except ValueError as exc:
        raise ConfigError(str(exc))
