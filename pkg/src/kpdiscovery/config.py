"""Namespaced configuration: built-in defaults < config file < command-line flags."""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Mapping

import yaml


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "source": None,
        "gap": 6,
        "stride": 1,
        "resolution": 256,
        "max_frames": None,
    },
    "target": {
        "kind": "ssim",
        "negation": "affine",
        "ssim": {"window": 11, "c1": 0.01**2, "c2": 0.03**2},
    },
    "model": {
        "k": 10,
        "sigma": 0.05,
        "single_branch": False,
        "encoder": "resnet50",
        "pretrained": False,
        "encoder_widths": [16, 32, 64, 96, 128],
        "decoder_widths": None,
        "pyramid_width": 256,
    },
    "loss": {
        "w_r": 1.0,
        "w_s": 0.02,
        "sigma_s": 0.05,
        "curriculum_epoch": 5,
        "perceptual_blocks": 4,
        "extractor": "vgg16",
        "extractor_pretrained": True,
    },
    "train": {
        "batch_size": 5,
        "learning_rate": 0.001,
        "epochs": 100,
        "steps_per_epoch": None,
        "seed": 0,
        "mode": "self_supervised",
        "checkpoint_every": 1,
        "rotation": True,
        "supervised_weight": 1.0,
        "convergence_tol": 0.01,
        "convergence_patience": 5,
        "device": "cpu",
        "threads": None,
    },
    "classify": {
        "include": ["pose", "conf", "cov"],
        "test_fraction": 0.3,
        "seeds": [0, 1, 2],
        "hidden": 64,
        "n_layers": 3,
        "kernel_size": 3,
        "frame_gap": 2,
        "epochs": 30,
        "learning_rate": 0.001,
    },
}

# Per-dataset training settings; every dataset uses learning rate 0.001.
PRESETS: dict[str, dict[str, Any]] = {
    "calms21": {"model.k": 10, "train.batch_size": 5, "data.resolution": 256, "data.gap": 6},
    "fly": {"model.k": 10, "train.batch_size": 5, "data.resolution": 256, "data.gap": 3},
    "human": {"model.k": 16, "train.batch_size": 36, "data.resolution": 128, "data.gap": 20},
    "jellyfish": {"model.k": 10, "train.batch_size": 5, "data.resolution": 256, "data.gap": 20},
    "vegetation": {"model.k": 15, "train.batch_size": 5, "data.resolution": 256, "data.gap": 60},
}

CHOICES = {
    "target.kind": ("ssim", "abs_diff", "raw_diff", "image"),
    "target.negation": ("affine", "sign"),
    "train.mode": ("self_supervised", "semi_supervised"),
    "loss.extractor": ("vgg16", "tiny"),
}


def flatten(cfg: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in cfg.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def unflatten(flat: Mapping[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, v in flat.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return out


def set_key(cfg: dict, key: str, value: Any) -> None:
    known = flatten(DEFAULTS)
    if key not in known:
        raise ConfigError(key, "unknown configuration key")
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    known = flatten(DEFAULTS)
    out = copy.deepcopy(dict(base))
    for key, v in flatten(override).items():
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
        set_key(out, key, v)
    return out


def parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                preset: str | None = None) -> dict[str, Any]:
    """Resolve a configuration: defaults, a dataset preset, the YAML/JSON file, then dotted-key overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for key, v in PRESETS[preset].items():
            set_key(cfg, key, v)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, Mapping):
            raise ConfigError("<root>", "configuration file must contain a mapping")
        cfg = merge(cfg, loaded)
    for key, v in (overrides or {}).items():
        if v is not None:
            set_key(cfg, key, v)
    validate(cfg)
    return cfg


def validate(cfg: Mapping[str, Any]) -> None:
    flat = flatten(cfg)

    def check(key, ok, msg):
        if not ok:
            raise ConfigError(key, msg)

    for key, options in CHOICES.items():
        check(key, flat[key] in options, f"must be one of {options}, got {flat[key]!r}")
    for key in ("data.gap", "data.stride", "train.batch_size", "model.k", "train.epochs"):
        check(key, isinstance(flat[key], int) and flat[key] >= 1, "must be an integer >= 1")
    check("data.resolution", isinstance(flat["data.resolution"], int) and flat["data.resolution"] % 32 == 0
          and flat["data.resolution"] > 0, "must be a positive multiple of 32")
    check("train.learning_rate", _num(flat["train.learning_rate"]) and flat["train.learning_rate"] >= 0,
          "must be a nonnegative number")
    check("model.sigma", _num(flat["model.sigma"]) and flat["model.sigma"] > 0, "must be positive")
    check("loss.sigma_s", _num(flat["loss.sigma_s"]) and flat["loss.sigma_s"] > 0, "must be positive")
    for key in ("loss.w_r", "loss.w_s"):
        check(key, _num(flat[key]) and flat[key] >= 0, "must be nonnegative")
    check("loss.curriculum_epoch", isinstance(flat["loss.curriculum_epoch"], int) and flat["loss.curriculum_epoch"] >= 0,
          "must be an integer >= 0")
    check("loss.perceptual_blocks", flat["loss.perceptual_blocks"] in (1, 2, 3, 4, 5), "must be in 1..5")
    check("classify.test_fraction", _num(flat["classify.test_fraction"]) and 0 < flat["classify.test_fraction"] < 1,
          "must be in (0, 1)")
    check("classify.seeds", isinstance(flat["classify.seeds"], list) and len(flat["classify.seeds"]) >= 1,
          "must be a nonempty list of integers")
    check("classify.include", isinstance(flat["classify.include"], list)
          and set(flat["classify.include"]) <= {"pose", "conf", "cov"}, "must be a subset of [pose, conf, cov]")
    w = flat["target.ssim.window"]
    check("target.ssim.window", isinstance(w, int) and w >= 3 and w % 2 == 1, "must be an odd integer >= 3")


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def model_config(cfg: Mapping[str, Any]):
    from .model import ModelConfig

    m = cfg["model"]
    return ModelConfig(
        n_keypoints=m["k"], sigma=m["sigma"], resolution=cfg["data"]["resolution"], encoder=m["encoder"],
        pretrained=m["pretrained"], encoder_widths=tuple(m["encoder_widths"]),
        decoder_widths=tuple(m["decoder_widths"]) if m["decoder_widths"] else None,
        pyramid_width=m["pyramid_width"], single_branch=m["single_branch"],
    )


def loss_weights(cfg: Mapping[str, Any]):
    from .objectives import LossWeights

    l = cfg["loss"]
    return LossWeights(w_r=l["w_r"], w_s=l["w_s"], curriculum_epoch=l["curriculum_epoch"], sigma_s=l["sigma_s"])


def dump(cfg: Mapping[str, Any]) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=False)
