'''
pyspacedet/config.py

Run configuration: defaults, JSON/TOML loading, flag overrides, and the
resolved-config record written next to every run's outputs.
'''

import copy
import json
import logging
import os

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.json"

DEFAULT_CONFIG = {
    "camera": {
        "gsd_m": 156.0,
        "altitude_m": 456000.0,
        "width_px": 641,
        "height_px": 512,
        "band": "LWIR",
    },
    "crop_extent_m": [100000.0, 80000.0],
    "distance_range_m": [20.0, 150.0],
    "p_multiply": 0.5,
    "contrast_jitter_range": [0.8, 1.2],
    "resample_kernel": "bicubic",
    "allow_partial": False,
    "class_names": ["spacecraft"],
    "assets": {
        "backgrounds": [],
        "sprites": [],
    },
    "seed": 0,
    "run": {},
    "trackfilter": {
        "gate_px": 10.0,
        "residual_thresh_px": 1.0,
        "background_flow": None,
        "max_missed": 2,
    },
    "distill": {
        "c": 384,
        "eta": 1e-3,
        "epochs": 200,
        "batch": 4,
        "reduction": "mean_sq",
        "upsample_kernel": "bicubic",
        "seeds": {"teacher": 0, "init": 1, "order": 2},
    },
    "bench": {
        "n_passes": 500,
        "warmup": 10,
        "input_spec": [832, 832, 3],
    },
}

# -----------------------------------------------------------------------------


class ConfigError(ValueError):
    """Raised when a configuration file or override is invalid."""
    pass


def _merge(base, override, prefix=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            logger.warning("[config] ignoring unknown key %s", name)
            continue
        if isinstance(base[key], dict) and base[key] and key not in ("assets", "run"):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {name} must be a table")
            out[key] = _merge(base[key], value, prefix=name + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _read_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}")


def _read_json(path):
    with open(path, "r") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(
                f"{path}:{err.lineno}:{err.colno}: {err.msg}")


def _resolve_assets(assets, base_dir):
    out = {"backgrounds": [], "sprites": []}
    for kind in ("backgrounds", "sprites"):
        entries = assets.get(kind, [])
        if not isinstance(entries, list):
            raise ConfigError(f"assets.{kind} must be a list")
        for i, entry in enumerate(entries):
            if isinstance(entry, str):
                entry = {"path": entry}
            if not isinstance(entry, dict) or "path" not in entry:
                raise ConfigError(f"assets.{kind}[{i}] needs a 'path'")
            entry = dict(entry)
            for key in ("path", "mask_path"):
                if entry.get(key) and not os.path.isabs(entry[key]):
                    entry[key] = os.path.normpath(
                        os.path.join(base_dir, entry[key]))
            out[kind].append(entry)
    return out


def validate_config(config):
    '''
    Check the value ranges the pipeline relies on; returns the config.
    '''
    cam = config["camera"]
    for key in ("gsd_m", "altitude_m"):
        if not float(cam[key]) > 0:
            raise ConfigError(f"camera.{key} must be positive")
    for key in ("width_px", "height_px"):
        if int(cam[key]) < 1:
            raise ConfigError(f"camera.{key} must be >= 1")
    lo, hi = config["distance_range_m"]
    if not 0 < lo <= hi:
        raise ConfigError(
            f"distance_range_m must satisfy 0 < lo <= hi, got {[lo, hi]}")
    if not 0.0 <= config["p_multiply"] <= 1.0:
        raise ConfigError("p_multiply must lie in [0, 1]")
    jlo, jhi = config["contrast_jitter_range"]
    if not 0 < jlo <= jhi:
        raise ConfigError("contrast_jitter_range must satisfy 0 < lo <= hi")
    if config["resample_kernel"] not in ("nearest", "bilinear", "bicubic"):
        raise ConfigError(
            f"resample_kernel must be nearest, bilinear or bicubic")
    if not isinstance(config["allow_partial"], bool):
        raise ConfigError("allow_partial must be true or false")
    return config


def load_config(path=None):
    '''
    Load a JSON or TOML config file and merge it over DEFAULT_CONFIG. Asset
    paths are resolved relative to the config file's directory.
    '''
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    path = str(path)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    if path.endswith(".toml"):
        raw = _read_toml(path)
    else:
        raw = _read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a table")
    config = _merge(DEFAULT_CONFIG, raw)
    config["assets"] = _resolve_assets(
        config.get("assets", {}), os.path.dirname(os.path.abspath(path)))
    logger.info("[config] loaded %s", path)
    return validate_config(config)


def resolve_config(config, **overrides):
    '''
    Apply flag overrides given as dotted keys (camera.gsd_m=...) and return
    a new config. None values leave the config untouched.
    '''
    out = copy.deepcopy(config)
    for dotted, value in overrides.items():
        if value is None:
            continue
        keys = dotted.replace("__", ".").split(".")
        node = out
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config key {dotted}")
            node = node[key]
        node[keys[-1]] = value
    return out


def write_resolved_config(config, out_dir, name=RESOLVED_CONFIG_NAME):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
