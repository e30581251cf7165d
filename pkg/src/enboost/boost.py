"""Boosted candidate-pool construction: train a learner, prune it to the MAC
budget, bump the weights of the samples it got wrong, repeat M times.

Sample-weight update: w_i <- w_i * exp(-alpha * log p_true(x_i)), i.e. the
multiplier p_true^(-alpha), then mean-normalized back to 1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .nn import (NetworkSpec, WeakLearner, flatten_params, forward,
                 unflatten_params, train)
from .prune import PruneSchedule, prune_to_budget

PROB_FLOOR = 1e-6  # clamp inside log: the update is singular at p_true = 0


@dataclass
class SampleWeights:
    weights: np.ndarray
    generation: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights <= 0) or not np.all(np.isfinite(self.weights)):
            raise ConfigError("sample weights must be positive and finite")


@dataclass(frozen=True)
class PoolConfig:
    pool_size: int                 # M
    ensemble_size: int             # N
    boost_learning_rate: float = 0.5
    prune: PruneSchedule = None
    train_epochs: int = 12
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.ensemble_size:
            raise ConfigError("ensemble_size must be >= 2")
        if self.pool_size <= self.ensemble_size:
            raise ConfigError("pool_size must exceed ensemble_size")
        if self.boost_learning_rate <= 0:
            raise ConfigError("boost_learning_rate must be > 0")
        if self.prune is None:
            object.__setattr__(self, "prune",
                               PruneSchedule(target_mac_fraction=1.0 / self.ensemble_size))


def init_weights(train_size: int) -> SampleWeights:
    if train_size < 1:
        raise ConfigError("train_size must be >= 1")
    return SampleWeights(weights=np.ones(train_size), generation=0)


def normalize(weights: np.ndarray) -> np.ndarray:
    return weights / weights.mean()


def weight_multipliers(p_true, alpha: float) -> np.ndarray:
    """Pre-normalization boosting multiplier p_true^(-alpha), clamped away
    from the singularity at p_true = 0."""
    if alpha <= 0:
        raise ConfigError("alpha must be > 0")
    p = np.clip(np.asarray(p_true, dtype=np.float64), PROB_FLOOR, None)
    return np.exp(-alpha * np.log(p))


def update_weights(w: SampleWeights, learner: WeakLearner, dataset,
                   alpha: float) -> SampleWeights:
    """Multiply each weight by p_true^(-alpha) on the train split, then
    mean-normalize. Misclassified (low p_true) samples gain weight."""
    x, y = dataset.split("train")
    probs = forward(learner, x)
    p_true = probs[np.arange(len(y)), y]
    updated = w.weights * weight_multipliers(p_true, alpha)
    return SampleWeights(weights=normalize(updated), generation=w.generation + 1)


def build_pool(base_spec: NetworkSpec, dataset, cfg: PoolConfig):
    """Train, prune, and boost M weak learners. Learner m trains from a fresh
    seed (cfg.seed + m) under the weights left by learner m-1."""
    weights = init_weights(dataset.split_size("train"))
    pool = []
    for m in range(cfg.pool_size):
        learner = WeakLearner.initialize(base_spec, seed=cfg.seed + m,
                                         learner_id=f"learner-{m:02d}")
        learner, _ = train(learner, dataset, weights.weights,
                           epochs=cfg.train_epochs,
                           learning_rate=cfg.learning_rate,
                           seed=cfg.seed + m, batch_size=cfg.batch_size)
        learner = prune_to_budget(learner, dataset, weights.weights, cfg.prune,
                                  seed=cfg.seed + m,
                                  learning_rate=cfg.learning_rate,
                                  batch_size=cfg.batch_size)
        pool.append(learner)
        weights = update_weights(weights, learner, dataset,
                                 cfg.boost_learning_rate)
    return pool, weights


# ---------------------------------------------------------------------------
# pool persistence: manifest.json plus one spec json and one .npy per learner


def save_pool(pool, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, learner in enumerate(pool):
        spec_file = f"{learner.id}.spec.json"
        param_file = f"{learner.id}.params.npy"
        learner.spec.save(out / spec_file)
        np.save(out / param_file, flatten_params(learner.params))
        entries.append({"id": learner.id, "macs": learner.macs,
                        "eval_accuracy": learner.eval_accuracy,
                        "generation": i, "spec": spec_file, "params": param_file})
    manifest = {"version": 1, "learners": entries}
    with open(out / "pool.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_pool(pool_dir):
    root = Path(pool_dir)
    with open(root / "pool.json") as f:
        manifest = json.load(f)
    if manifest.get("version") != 1:
        raise ConfigError(f"unsupported pool manifest version in {pool_dir}")
    pool = []
    for entry in manifest["learners"]:
        spec = NetworkSpec.load(root / entry["spec"])
        flat = np.load(root / entry["params"])
        pool.append(WeakLearner(spec=spec, params=unflatten_params(spec, flat),
                                macs=entry["macs"],
                                eval_accuracy=entry["eval_accuracy"],
                                id=entry["id"]))
    return pool
