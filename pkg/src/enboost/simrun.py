"""Discrete-event runtime: serves periodic inference requests on the
harvesting-powered device, executes the learner prefix chosen by a policy,
optionally interleaves FC-only retraining on the shared forward pass, and
accumulates mean-accuracy / failure-rate metrics.

Service is instantaneous in simulated time; "concurrent inference and
training" means one learner's forward pass is reused for both, not thread
parallelism.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .energy import Device, inference_cost
from .ensemble import EnsembleModel, weighted_vote
from .errors import ConfigError
from .nn import forward, train_fc_only
from .qsched import EnvConfig, QTable, StateTracker, act, _make_device

RETRAIN_MODES = ("off", "high-energy", "low-energy", "auto")

# request outcomes
SERVED = "served"
MISS_OFF = "miss-off"            # device below cutoff at arrival
MISS_DECLINED = "miss-declined"  # policy stopped at l = 0
MISS_BROWNOUT = "miss-brownout"  # energy ran out mid-prefix


class QPolicy:
    """Greedy lookup into a trained table."""

    def __init__(self, table: QTable):
        self.table = table
        self.name = "qtable"

    def decide(self, state) -> int:
        return act(self.table, state)


class FixedKPolicy:
    """Always executes min(k, N) learners when energy allows."""

    def __init__(self, k: int, n: int):
        self.k = min(k, n)
        self.name = "all" if self.k >= n else f"fixed:{k}"

    def decide(self, state) -> int:
        return 1 if state.l < self.k else 0


@dataclass
class SimConfig:
    env: EnvConfig
    ensemble: EnsembleModel
    dataset: Dataset
    policy: object
    duration: float = None          # defaults to request horizon
    seed: int = 0
    retrain_mode: str = "off"
    retrain_learning_rate: float = 0.05
    sample_split: str = "test"

    def __post_init__(self):
        if self.retrain_mode not in RETRAIN_MODES:
            raise ConfigError(f"unknown retrain mode {self.retrain_mode!r}")
        if self.duration is None:
            self.duration = min(self.env.requests.horizon, self.env.trace.horizon)
        if self.duration > self.env.trace.horizon + 1e-9:
            raise ConfigError("duration exceeds trace horizon")


@dataclass
class SimReport:
    policy: str
    total_requests: int
    failures: int
    correct: int
    events: list                    # per-request dict rows
    learners_histogram: dict        # executed count -> requests
    retrain_events: int
    initial_energy: float
    harvested_energy: float
    consumed_energy: float
    final_energy: float
    seed: int

    @property
    def successes(self) -> int:
        return self.total_requests - self.failures

    @property
    def failure_rate(self):
        if self.total_requests == 0:
            return None
        return self.failures / self.total_requests

    @property
    def mean_accuracy(self):
        if self.successes == 0:
            return None
        return self.correct / self.successes

    def energy_closure_error(self) -> float:
        return abs(self.final_energy -
                   (self.initial_energy + self.harvested_energy - self.consumed_energy))

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "seed": self.seed,
            "total_requests": self.total_requests,
            "failures": self.failures,
            "successes": self.successes,
            "correct": self.correct,
            "failure_rate": self.failure_rate,
            "mean_accuracy": self.mean_accuracy,
            "learners_histogram": {str(k): v for k, v in
                                   sorted(self.learners_histogram.items())},
            "retrain_events": self.retrain_events,
            "initial_energy_J": self.initial_energy,
            "harvested_energy_J": self.harvested_energy,
            "consumed_energy_J": self.consumed_energy,
            "final_energy_J": self.final_energy,
        }


def _round_robin_mode(mode, e_now):
    if mode == "auto":
        if e_now >= 2:
            return "high-energy"
        if e_now == 1:
            return "low-energy"
        return "off"
    return mode


def run(cfg: SimConfig) -> SimReport:
    """Policy-driven inference with no retraining."""
    return _drive(cfg, retrain=False)[0]


def run_concurrent_training(cfg: SimConfig, drift_dataset: Dataset):
    """Inference plus FC-only retraining per the configured mode.

    Requests draw labeled samples from the drift dataset; one learner at a
    time is retrained, rotating round-robin across requests. Returns
    (SimReport, accuracy before, accuracy after) where the accuracy lists are
    per-learner on the drift eval split.
    """
    if cfg.retrain_mode == "off":
        raise ConfigError("run_concurrent_training requires a retrain mode")
    from .nn import evaluate
    cfg = replace(cfg, dataset=drift_dataset)
    ex, ey = drift_dataset.split("eval")
    before = [evaluate(l, ex, ey) for l in cfg.ensemble.learners]
    report, learners = _drive(cfg, retrain=True)
    after = [evaluate(l, ex, ey) for l in learners]
    return report, before, after


def _drive(cfg: SimConfig, retrain: bool):
    env = cfg.env
    model = cfg.ensemble
    n = model.size
    learners = [l.copy() for l in model.learners]
    costs = [inference_cost(l.macs, env.cost_model) for l in learners]
    one_cost = max(costs)
    device = _make_device(env)
    tracker = StateTracker(n, env.capacitor, one_cost, env.power_thresholds)
    sx, sy = cfg.dataset.split(cfg.sample_split)
    req_times = np.arange(env.requests.period, cfg.duration + 1e-9,
                          env.requests.period)
    initial_energy = device.cap.energy
    events = []
    histogram = {}
    failures = 0
    correct = 0
    retrain_events = 0
    retrain_cursor = 0
    for req_no, t_req in enumerate(req_times):
        device.advance(float(t_req))
        # requests cycle through the split so an unconstrained run reproduces
        # the offline split accuracy exactly
        sample_idx = req_no % len(sy)
        row = {
            "time": float(t_req),
            "voltage": device.cap.voltage,
            "p_harv": device.p_harv,
            "sample_index": sample_idx,
            "learners_run": 0,
            "retrained_learner": -1,
            "predicted": -1,
            "correct": 0,
            "inference_energy": 0.0,
            "retrain_energy": 0.0,
        }
        if not device.cap.is_on:
            row["event"] = MISS_OFF
            failures += 1
            events.append(row)
            continue

        e_now0 = tracker.observe(device, l=0, r=1).e_now
        mode = _round_robin_mode(cfg.retrain_mode, e_now0) if retrain else "off"
        if mode == "high-energy":
            target = n
        elif mode == "low-energy":
            target = max(n - 1, 1)
        else:
            target = None  # policy decides

        x = sx[sample_idx]
        label = int(sy[sample_idx])
        if mode != "off":
            retrain_idx = retrain_cursor % target
            retrain_cursor += 1
        else:
            retrain_idx = -1
        probs = []
        outcome = SERVED
        retrain_this = -1
        l = 0
        while l < n:
            state = tracker.observe(device, l=l, r=1 if l == 0 else 0)
            if target is None:
                if cfg.policy.decide(state) == 0:
                    break
            elif l >= target:
                break
            if not device.draw(costs[l]):
                if l == 0:
                    outcome = MISS_BROWNOUT
                break
            row["inference_energy"] += costs[l]
            if l == retrain_idx:
                # shared forward pass: prediction uses the pre-update outputs
                increment = env.cost_model.fc_retrain_energy_fraction * costs[l]
                if device.draw(increment):
                    updated, pre_probs = train_fc_only(
                        learners[l], x[None], [label], [1.0],
                        cfg.retrain_learning_rate)
                    probs.append(pre_probs[0])
                    learners[l] = updated
                    row["retrain_energy"] += increment
                    retrain_events += 1
                    retrain_this = l
                else:
                    probs.append(forward(learners[l], x))
            else:
                probs.append(forward(learners[l], x))
            l += 1
        row["learners_run"] = l
        histogram[l] = histogram.get(l, 0) + 1
        if l == 0:
            if outcome == SERVED:
                outcome = MISS_DECLINED
            failures += 1
        else:
            tracker.record_post_inference(device)
            pred, _ = weighted_vote(np.stack(probs), model.vote_weights[:l])
            row["predicted"] = pred
            row["correct"] = int(pred == label)
            correct += row["correct"]
        row["retrained_learner"] = retrain_this
        row["event"] = outcome
        events.append(row)
    device.advance(cfg.duration)
    report = SimReport(
        policy=getattr(cfg.policy, "name", cfg.retrain_mode),
        total_requests=len(req_times),
        failures=failures,
        correct=correct,
        events=events,
        learners_histogram=histogram,
        retrain_events=retrain_events,
        initial_energy=initial_energy,
        harvested_energy=device.harvested,
        consumed_energy=device.consumed,
        final_energy=device.cap.energy,
        seed=cfg.seed,
    )
    return report, learners


# ---------------------------------------------------------------------------
# rendering

EVENT_FIELDS = ["time", "event", "voltage", "p_harv", "sample_index",
                "learners_run", "retrained_learner", "predicted", "correct",
                "inference_energy", "retrain_energy"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def events_csv(report: SimReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVENT_FIELDS)
    for row in report.events:
        writer.writerow([_fmt(row[k]) for k in EVENT_FIELDS])
    return buf.getvalue()


def failure_rate_reduction(report: SimReport, baseline: SimReport):
    if baseline.failure_rate in (None, 0.0) or report.failure_rate is None:
        return None
    return 1.0 - report.failure_rate / baseline.failure_rate


def render_report(report: SimReport, fmt="text", baseline: SimReport = None) -> str:
    d = report.to_dict()
    if baseline is not None:
        d["baseline_policy"] = baseline.policy
        d["failure_rate_reduction_vs_baseline"] = failure_rate_reduction(report, baseline)
    if fmt == "json":
        return json.dumps(d, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        keys = sorted(k for k in d if k != "learners_histogram")
        writer.writerow(keys)
        writer.writerow([_fmt(d[k]) if d[k] is not None else "n/a" for k in keys])
        return buf.getvalue()
    if fmt == "text":
        lines = [f"policy: {d['policy']} (seed {d['seed']})",
                 f"requests: {d['total_requests']}  failures: {d['failures']}",
                 f"failure rate: {_na(d['failure_rate'])}",
                 f"mean accuracy: {_na(d['mean_accuracy'])}",
                 f"learners per request: {d['learners_histogram']}",
                 f"retrain events: {d['retrain_events']}",
                 (f"energy J: start {d['initial_energy_J']:.4f} "
                  f"harvested {d['harvested_energy_J']:.4f} "
                  f"consumed {d['consumed_energy_J']:.4f} "
                  f"final {d['final_energy_J']:.4f}")]
        if baseline is not None:
            lines.append("failure-rate reduction vs "
                         f"{baseline.policy}: {_na(d['failure_rate_reduction_vs_baseline'])}")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}")


def _na(v):
    return "n/a" if v is None else f"{v:.4f}"
