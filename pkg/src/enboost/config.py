"""Project configuration: one JSON document driving the whole pipeline.

The document is validated up front (types checked, unknown keys rejected)
before any command does work. Relative paths resolve against the config
file's directory.
"""
from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

from .boost import PoolConfig
from .data import Dataset, load_csv, synth_dataset
from .energy import (Capacitor, CostModel, PowerTrace, RequestPattern,
                     load_trace, synth_trace)
from .errors import ConfigError
from .nn import NetworkSpec, TensorShape
from .prune import PruneSchedule
from .qsched import EnvConfig, QHyperParams, RewardParams

# schema: {key: (type or nested schema, default)}; None default means required
_NUM = (int, float)

_SCHEMA = {
    "dataset": ({
        "generator": ({
            "seed": (int, 1),
            "classes": (int, 6),
            "samples_per_class": (int, 100),
            "shape": (list, [3, 12, 12]),
            "noise": (_NUM, 2.5),
        }, {}),
        "csv": ({
            "path": (str, None),
            "classes": (int, None),
            "shape": (list, None),
            "seed": (int, 0),
        }, None),
    }, {}),
    "network": ({
        "spec_path": (str, None),
    }, {}),
    "pool": ({
        "pool_size": (int, 6),
        "boost_learning_rate": (_NUM, 0.5),
        "train_epochs": (int, 12),
        "learning_rate": (_NUM, 0.1),
        "batch_size": (int, 32),
        "seed": (int, 0),
        "prune": ({
            "filters_removed_per_step": (int, 1),
            "retrain_epochs_per_step": (int, 4),
        }, {}),
    }, {}),
    "ensemble": ({
        "size": (int, 4),
    }, {}),
    "energy": ({
        "capacitor": ({
            # desk-scale store: the bundled ensemble's full execution is a few
            # percent of usable energy, so scheduling decisions matter
            "capacitance": (_NUM, 2.2e-3),
            "v_max": (_NUM, 4.2),
            "v_cutoff": (_NUM, 1.7),
        }, {}),
        "cost_model": ({
            "energy_per_mac": (_NUM, 1e-9),
            "per_inference_overhead": (_NUM, 1e-4),
            "sleep_power": (_NUM, 5e-6),
            "active_idle_power": (_NUM, 1e-3),
            "fc_retrain_energy_fraction": (_NUM, 0.1),
        }, {}),
        "trace": ({
            "csv": (str, None),
            "synthetic": ({
                "seed": (int, 7),
                "profile": (str, "day-night"),
                "duration": (_NUM, 3200.0),
                "period": (_NUM, 800.0),
                "high_power": (_NUM, 2e-4),
                "constant_power": (_NUM, None),
                "burst_rate": (_NUM, 0.02),
                "sample_interval": (_NUM, 1.0),
            }, {}),
        }, {}),
        "harvester_efficiency": (_NUM, 1.0),
        "power_thresholds": (list, None),
        "initial_voltage": (_NUM, None),
    }, {}),
    "scheduler": ({
        "reward": ({
            "beta": (_NUM, 0.05),
            "p_miss": (_NUM, 0.5),
        }, {}),
        "q": ({
            "learning_rate": (_NUM, 0.1),
            "discount": (_NUM, 0.9),
            "epsilon_start": (_NUM, 0.3),
            "epsilon_end": (_NUM, 0.01),
            "anneal_fraction": (_NUM, 0.8),
        }, {}),
        "episodes": (int, 120),
        "seed": (int, 0),
    }, {}),
    "simulation": ({
        "request_period": (_NUM, 10.0),
        "duration": (_NUM, None),
        "retrain_mode": (str, "off"),
        "retrain_learning_rate": (_NUM, 0.05),
        "seed": (int, 0),
    }, {}),
}


def _validate(doc, schema, path):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    out = {}
    unknown = set(doc) - set(schema)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    for key, (kind, default) in schema.items():
        here = f"{path}.{key}" if path else key
        if key in doc:
            value = doc[key]
            if isinstance(kind, dict):
                if value is None:
                    out[key] = None
                else:
                    out[key] = _validate(value, kind, here)
            else:
                if value is None:
                    out[key] = None
                elif kind is _NUM:
                    if isinstance(value, bool) or not isinstance(value, _NUM):
                        raise ConfigError(f"{here}: expected a number")
                    out[key] = float(value)
                elif not isinstance(value, kind) or isinstance(value, bool):
                    raise ConfigError(f"{here}: expected {getattr(kind, '__name__', kind)}")
                else:
                    out[key] = value
        else:
            if isinstance(kind, dict):
                out[key] = None if default is None else _validate(default, kind, here)
            else:
                out[key] = copy.deepcopy(default)
    return out


def validate_config(doc: dict) -> dict:
    cfg = _validate(doc, _SCHEMA, "")
    if cfg["dataset"]["csv"] is not None and cfg["dataset"]["csv"]["path"] is None:
        raise ConfigError("dataset.csv.path is required when dataset.csv is set")
    if cfg["pool"]["pool_size"] <= cfg["ensemble"]["size"]:
        raise ConfigError("pool.pool_size must exceed ensemble.size")
    if not 2 <= cfg["ensemble"]["size"]:
        raise ConfigError("ensemble.size must be >= 2")
    return cfg


def default_config() -> dict:
    return validate_config({})


def load_config(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return validate_config(doc)


# ---------------------------------------------------------------------------
# builders


def baseline_network() -> NetworkSpec:
    """The bundled desk-scale baseline: three conv stages over 3x12x12."""
    with resources.files("enboost.assets").joinpath("baseline_net.json").open() as f:
        return NetworkSpec.from_dict(json.load(f))


def make_network(cfg: dict, config_dir=".") -> NetworkSpec:
    spec_path = cfg["network"]["spec_path"]
    if spec_path is None:
        return baseline_network()
    return NetworkSpec.load(Path(config_dir) / spec_path)


def make_dataset(cfg: dict, config_dir=".") -> Dataset:
    csv_cfg = cfg["dataset"]["csv"]
    if csv_cfg is not None:
        shape = TensorShape(*csv_cfg["shape"])
        return load_csv(Path(config_dir) / csv_cfg["path"], shape,
                        csv_cfg["classes"], seed=csv_cfg["seed"])
    g = cfg["dataset"]["generator"]
    return synth_dataset(seed=g["seed"], classes=g["classes"],
                         samples_per_class=g["samples_per_class"],
                         shape=tuple(g["shape"]), noise=g["noise"])


def make_pool_config(cfg: dict, seed=None) -> PoolConfig:
    p = cfg["pool"]
    n = cfg["ensemble"]["size"]
    schedule = PruneSchedule(
        target_mac_fraction=1.0 / n,
        filters_removed_per_step=p["prune"]["filters_removed_per_step"],
        retrain_epochs_per_step=p["prune"]["retrain_epochs_per_step"])
    return PoolConfig(pool_size=p["pool_size"], ensemble_size=n,
                      boost_learning_rate=p["boost_learning_rate"],
                      prune=schedule, train_epochs=p["train_epochs"],
                      learning_rate=p["learning_rate"],
                      batch_size=p["batch_size"],
                      seed=p["seed"] if seed is None else seed)


def make_trace(cfg: dict, config_dir=".") -> PowerTrace:
    e = cfg["energy"]
    if e["trace"]["csv"] is not None:
        return load_trace(Path(config_dir) / e["trace"]["csv"],
                          harvester_efficiency=e["harvester_efficiency"])
    s = e["trace"]["synthetic"]
    return synth_trace(seed=s["seed"], profile=s["profile"],
                       duration=s["duration"], sample_interval=s["sample_interval"],
                       period=s["period"], high_power=s["high_power"],
                       burst_rate=s["burst_rate"],
                       constant_power=s["constant_power"])


def make_env(cfg: dict, config_dir=".") -> EnvConfig:
    e = cfg["energy"]
    cap = Capacitor(capacitance=e["capacitor"]["capacitance"],
                    v_max=e["capacitor"]["v_max"],
                    v_cutoff=e["capacitor"]["v_cutoff"],
                    voltage=e["capacitor"]["v_max"])
    cm = CostModel(**e["cost_model"])
    trace = make_trace(cfg, config_dir)
    sim = cfg["simulation"]
    duration = sim["duration"] if sim["duration"] is not None else trace.horizon
    requests = RequestPattern(period=sim["request_period"], horizon=duration)
    r = cfg["scheduler"]["reward"]
    thresholds = cfg["energy"]["power_thresholds"]
    return EnvConfig(capacitor=cap, trace=trace, cost_model=cm,
                     requests=requests,
                     reward=RewardParams(beta=r["beta"], p_miss=r["p_miss"]),
                     power_thresholds=tuple(thresholds) if thresholds else None,
                     eta=1.0,  # efficiency already folded into the trace
                     initial_voltage=e["initial_voltage"])


def make_qhyper(cfg: dict) -> QHyperParams:
    return QHyperParams(**cfg["scheduler"]["q"])
