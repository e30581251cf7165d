"""Iterative L2-norm filter pruning down to a MAC budget, with interleaved
retraining. Removing a conv filter also removes the matching input-channel
slices of the next parameterized layer, so memory shrinks faster than MACs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetInfeasibleError, ShapeError
from .nn import (CONV, FC, NetworkSpec, LayerSpec, WeakLearner, copy_params,
                 count_macs, evaluate, train)


@dataclass(frozen=True)
class PruneSchedule:
    target_mac_fraction: float
    filters_removed_per_step: int = 1
    retrain_epochs_per_step: int = 2

    def __post_init__(self):
        if not 0.0 < self.target_mac_fraction <= 1.0:
            raise ShapeError(
                f"target_mac_fraction must be in (0, 1], got {self.target_mac_fraction}")
        if self.filters_removed_per_step < 1:
            raise ShapeError("filters_removed_per_step must be >= 1")
        if self.retrain_epochs_per_step < 0:
            raise ShapeError("retrain_epochs_per_step must be >= 0")

    def to_dict(self):
        return {"target_mac_fraction": self.target_mac_fraction,
                "filters_removed_per_step": self.filters_removed_per_step,
                "retrain_epochs_per_step": self.retrain_epochs_per_step}


def conv_layer_indices(spec: NetworkSpec):
    return [i for i, l in enumerate(spec.layers) if l.kind == CONV]


def rank_filters(learner: WeakLearner):
    """Per conv layer: [(filter index, L2 norm of its weights)], ascending by
    norm; ties broken by lower filter index (stable sort)."""
    out = {}
    for idx in conv_layer_indices(learner.spec):
        w, _ = learner.params[idx]
        norms = np.sqrt((w ** 2).sum(axis=(1, 2, 3)))
        order = np.argsort(norms, kind="stable")
        out[idx] = [(int(f), float(norms[f])) for f in order]
    if not out:
        raise ShapeError("learner has no conv layer to rank")
    return out


def _next_param_layer(spec: NetworkSpec, idx):
    """Index of the next conv or fc layer consuming layer idx's channels."""
    for j in range(idx + 1, len(spec.layers)):
        if spec.layers[j].kind in (CONV, FC):
            return j
    return None


def prune_step(learner: WeakLearner, victims: dict) -> WeakLearner:
    """Remove the given {conv layer index: [filter indices]} and the matching
    downstream input channels. Surviving parameters are copied verbatim."""
    if not any(victims.values()):
        return learner.copy()
    spec = learner.spec
    shapes = spec.shapes()
    layers = list(spec.layers)
    params = copy_params(learner.params)
    for idx, filter_ids in sorted(victims.items()):
        if not filter_ids:
            continue
        layer = layers[idx]
        if layer.kind != CONV:
            raise ShapeError(f"layer {idx} is not conv")
        keep = np.array([f for f in range(layer.filters) if f not in set(filter_ids)])
        if keep.size == 0:
            raise BudgetInfeasibleError(idx)
        if keep.size + len(set(filter_ids)) != layer.filters:
            raise ShapeError(f"victim index out of range in layer {idx}")
        w, b = params[idx]
        params[idx] = (w[keep], b[keep])
        layers[idx] = LayerSpec(kind=CONV, filters=int(keep.size), kernel=layer.kernel,
                                stride=layer.stride, padding=layer.padding,
                                activation=layer.activation)
        nxt = _next_param_layer(spec, idx)
        if nxt is not None:
            nw, nb = params[nxt]
            if layers[nxt].kind == CONV:
                params[nxt] = (nw[:, keep], nb)
            else:
                # fc consumes channel-major flattened input: channel c owns
                # columns [c*hw, (c+1)*hw) where hw is the spatial size at fc.
                fc_in = shapes[nxt - 1] if nxt > 0 else spec.input_shape
                hw = fc_in.height * fc_in.width
                cols = np.concatenate([np.arange(c * hw, (c + 1) * hw) for c in keep])
                params[nxt] = (nw[:, cols], nb)
    new_spec = NetworkSpec(input_shape=spec.input_shape, layers=tuple(layers),
                           class_count=spec.class_count)
    return WeakLearner(spec=new_spec, params=params, macs=count_macs(new_spec),
                       eval_accuracy=0.0, id=learner.id)


def _single_filter_mac_cost(spec: NetworkSpec, idx) -> int:
    """MACs freed by removing one filter from conv layer idx (own layer plus
    the downstream channel slice)."""
    layers = list(spec.layers)
    layer = layers[idx]
    if layer.filters == 1:
        return 0
    layers[idx] = LayerSpec(kind=CONV, filters=layer.filters - 1, kernel=layer.kernel,
                            stride=layer.stride, padding=layer.padding,
                            activation=layer.activation)
    reduced = NetworkSpec(input_shape=spec.input_shape, layers=tuple(layers),
                          class_count=spec.class_count)
    return count_macs(spec) - count_macs(reduced)


def max_single_filter_macs(spec: NetworkSpec) -> int:
    """Largest MAC contribution of any single prunable filter (budget slack)."""
    best = 0
    for idx in conv_layer_indices(spec):
        layer = spec.layers[idx]
        layers = list(spec.layers)
        layers[idx] = LayerSpec(kind=CONV, filters=layer.filters + 1, kernel=layer.kernel,
                                stride=layer.stride, padding=layer.padding,
                                activation=layer.activation)
        grown = NetworkSpec(input_shape=spec.input_shape, layers=tuple(layers),
                            class_count=spec.class_count)
        best = max(best, count_macs(grown) - count_macs(spec))
    return best


def prune_to_budget(learner: WeakLearner, dataset, sample_weights,
                    schedule: PruneSchedule, seed, learning_rate=0.1,
                    batch_size=32) -> WeakLearner:
    """Prune globally-lowest-L2 filters until count_macs <= ceil(fraction *
    original), retraining between steps and after the final one."""
    if schedule.target_mac_fraction == 1.0:
        return learner.copy()
    target = math.ceil(schedule.target_mac_fraction * learner.macs)
    current = learner
    while current.macs > target:
        ranked = rank_filters(current)
        # global candidate list, each layer may lose all but one filter
        candidates = []
        for idx, entries in ranked.items():
            budget = len(entries) - 1
            for f, norm in entries[:budget]:
                candidates.append((norm, idx, f))
        candidates.sort(key=lambda t: (t[0], t[1], t[2]))
        if not candidates:
            blocking = max(conv_layer_indices(current.spec),
                           key=lambda i: _single_filter_mac_cost(current.spec, i))
            raise BudgetInfeasibleError(blocking)
        victims = {}
        remaining = {idx: len(entries) for idx, entries in ranked.items()}
        for norm, idx, f in candidates:
            if len([v for vs in victims.values() for v in vs]) >= schedule.filters_removed_per_step:
                break
            if remaining[idx] <= 1:
                continue
            victims.setdefault(idx, []).append(f)
            remaining[idx] -= 1
        current = prune_step(current, victims)
        if schedule.retrain_epochs_per_step > 0:
            current, _ = train(current, dataset, sample_weights,
                               epochs=schedule.retrain_epochs_per_step,
                               learning_rate=learning_rate, seed=seed,
                               batch_size=batch_size)
    ex, ey = dataset.split("eval")
    current = current.copy()
    current.eval_accuracy = evaluate(current, ex, ey)
    return current
