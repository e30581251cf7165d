"""Ensemble selection and voting: pick N of M pool learners by greedy
inclusion plus improvement-only swaps (backfitting), weight votes by
a_m = 0.5*log((1-e_m)/e_m), and measure the accuracy-vs-prefix profile the
runtime scheduler consumes."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .nn import forward

ERROR_CLAMP = 1e-4  # a_m diverges at e_m in {0, 1}


def learner_weight(error_rate: float, clamp: float = ERROR_CLAMP) -> float:
    if not 0.0 <= error_rate <= 1.0:
        raise ConfigError(f"error rate must be in [0,1], got {error_rate}")
    e = min(max(error_rate, clamp), 1.0 - clamp)
    return 0.5 * float(np.log((1.0 - e) / e))


def weighted_vote(prob_vectors, vote_weights):
    """(argmax class, aggregated score vector) for sum_m a_m * f_m(x).

    prob_vectors: (k, C) or list of per-learner vectors; ties break low.
    """
    probs = np.asarray(prob_vectors, dtype=np.float64)
    a = np.asarray(vote_weights, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != a.shape[0] or a.shape[0] < 1:
        raise ConfigError("need k >= 1 probability vectors and matching weights")
    if np.all(a <= 0):
        warnings.warn("all vote weights <= 0: degenerate ensemble", stacklevel=2)
    scores = a @ probs
    return int(np.argmax(scores)), scores


def _vote_batch(prob_stack, vote_weights):
    # prob_stack: (k, n, C) -> predicted class per sample
    scores = np.tensordot(np.asarray(vote_weights), prob_stack, axes=(0, 0))
    return scores.argmax(axis=1)


@dataclass
class EnsembleModel:
    learners: list            # ordered by descending individual eval accuracy
    vote_weights: list        # a_m aligned with learners
    acc_profile: list         # weighted-vote eval accuracy of prefixes 1..N
    delta_acc: list           # acc(k) - acc(k-1), acc(0) = chance level
    class_count: int

    @property
    def size(self) -> int:
        return len(self.learners)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.learners)


def subset_accuracy(prob_stack, vote_weights, labels) -> float:
    preds = _vote_batch(prob_stack, vote_weights)
    return float(np.mean(preds == labels))


def pool_eval_probs(pool, eval_x):
    """Stacked per-learner class probabilities on the eval split: (M, n, C)."""
    return np.stack([forward(l, eval_x) for l in pool])


def _weights_for(pool, indices):
    return [learner_weight(1.0 - pool[i].eval_accuracy) for i in indices]


def greedy_select(pool, n, probs, labels):
    """Forward-greedy subset growth; ties resolve to the lower pool index."""
    selected = []
    for _ in range(n):
        best_idx, best_acc = None, -1.0
        for cand in range(len(pool)):
            if cand in selected:
                continue
            trial = selected + [cand]
            acc = subset_accuracy(probs[trial], _weights_for(pool, trial), labels)
            if acc > best_acc:
                best_idx, best_acc = cand, acc
        selected.append(best_idx)
    return selected


def backfit_select(pool, n, eval_x, eval_y) -> EnsembleModel:
    """Greedy selection followed by improvement-only swap passes, capped at
    M*N passes. Never worse than pure forward-greedy by construction."""
    m = len(pool)
    if m < n:
        raise ConfigError(f"pool of {m} cannot fill ensemble of {n}")
    labels = np.asarray(eval_y)
    probs = pool_eval_probs(pool, eval_x)
    selected = greedy_select(pool, n, probs, labels)
    best_acc = subset_accuracy(probs[selected], _weights_for(pool, selected), labels)
    for _ in range(m * n):
        improved = False
        for pos in range(len(selected)):
            for cand in range(m):
                if cand in selected:
                    continue
                trial = list(selected)
                trial[pos] = cand
                acc = subset_accuracy(probs[trial], _weights_for(pool, trial), labels)
                if acc > best_acc:
                    selected, best_acc = trial, acc
                    improved = True
        if not improved:
            break
    # order by descending individual eval accuracy (stable on pool index)
    order = sorted(selected, key=lambda i: (-pool[i].eval_accuracy, i))
    learners = [pool[i] for i in order]
    model = EnsembleModel(
        learners=learners,
        vote_weights=[learner_weight(1.0 - l.eval_accuracy) for l in learners],
        acc_profile=[], delta_acc=[],
        class_count=learners[0].spec.class_count,
    )
    model.acc_profile, model.delta_acc = profile_accuracy(model, eval_x, eval_y)
    return model


def profile_accuracy(model: EnsembleModel, eval_x, eval_y):
    """acc(k) = weighted-vote accuracy of the first k learners; delta_acc(k)
    telescopes from acc(0) = chance level and may be negative."""
    labels = np.asarray(eval_y)
    probs = np.stack([forward(l, eval_x) for l in model.learners])
    acc_profile = []
    for k in range(1, model.size + 1):
        acc_profile.append(subset_accuracy(probs[:k], model.vote_weights[:k], labels))
    chance = 1.0 / model.class_count
    prev = chance
    delta = []
    for acc in acc_profile:
        delta.append(acc - prev)
        prev = acc
    return acc_profile, delta


def brute_force_select(pool, n, eval_x, eval_y):
    """Exhaustive best subset (test oracle for small pools)."""
    from itertools import combinations
    labels = np.asarray(eval_y)
    probs = pool_eval_probs(pool, eval_x)
    best, best_acc = None, -1.0
    for combo in combinations(range(len(pool)), n):
        acc = subset_accuracy(probs[list(combo)], _weights_for(pool, combo), labels)
        if acc > best_acc:
            best, best_acc = list(combo), acc
    return best, best_acc


# ---------------------------------------------------------------------------
# manifest persistence (learner files live in the pool directory)


def save_ensemble(model: EnsembleModel, path, pool_dir="."):
    manifest = {
        "version": 1,
        "class_count": model.class_count,
        "pool_dir": str(pool_dir),
        "learners": [l.id for l in model.learners],
        "vote_weights": model.vote_weights,
        "acc_profile": model.acc_profile,
        "delta_acc": model.delta_acc,
        "total_macs": model.total_macs,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_ensemble(path, pool=None) -> EnsembleModel:
    from .boost import load_pool
    path = Path(path)
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("version") != 1:
        raise ConfigError(f"unsupported ensemble manifest version in {path}")
    if "delta_acc" not in manifest or not manifest["delta_acc"]:
        raise ConfigError(f"{path}: manifest lacks delta_acc; rebuild the ensemble")
    if pool is None:
        pool = load_pool(path.parent / manifest["pool_dir"])
    by_id = {l.id: l for l in pool}
    try:
        learners = [by_id[i] for i in manifest["learners"]]
    except KeyError as exc:
        raise ConfigError(f"{path}: learner {exc} missing from pool") from exc
    return EnsembleModel(learners=learners,
                         vote_weights=list(manifest["vote_weights"]),
                         acc_profile=list(manifest["acc_profile"]),
                         delta_acc=list(manifest["delta_acc"]),
                         class_count=manifest["class_count"])
