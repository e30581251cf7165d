"""Tabular Q-learning scheduler: per decision point it either executes the
next weak learner (a=1) or stops and aggregates (a=0).

Reward: a=1 pays delta_acc(l+1) minus beta * (1 - usable-energy fraction);
declining an unserved request (r=1, a=0) pays -p_miss. The r flag marks a
request that has not produced any learner execution yet, so it is 1 at the
l=0 decision point of a request and 0 afterwards.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .energy import (Capacitor, CostModel, Device, PowerTrace, RequestPattern,
                     discretize_energy, discretize_energy_fraction,
                     discretize_power, inference_cost, power_terciles,
                     ENERGY_LEVELS, POWER_LEVELS)
from .errors import ConfigError, TableLoadError

QTABLE_VERSION = 1
E_LAST_WINDOW = 10  # trailing requests feeding the mean-energy feature


@dataclass(frozen=True)
class SchedulerState:
    e_now: int   # 0..3
    e_last: int  # 0..3
    p_harv: int  # 0..2
    l: int       # 0..N learners already executed this request
    r: int       # active-request flag


def state_space_size(n: int) -> int:
    return ENERGY_LEVELS * ENERGY_LEVELS * POWER_LEVELS * (n + 1) * 2


def encode_state(s: SchedulerState, n: int) -> int:
    """Mixed-radix index over (e_now, e_last, p_harv, l, r)."""
    if not (0 <= s.e_now < ENERGY_LEVELS and 0 <= s.e_last < ENERGY_LEVELS
            and 0 <= s.p_harv < POWER_LEVELS and 0 <= s.l <= n and s.r in (0, 1)):
        raise ConfigError(f"state field out of range: {s}")
    idx = s.e_now
    idx = idx * ENERGY_LEVELS + s.e_last
    idx = idx * POWER_LEVELS + s.p_harv
    idx = idx * (n + 1) + s.l
    idx = idx * 2 + s.r
    return idx


def decode_state(index: int, n: int) -> SchedulerState:
    if not 0 <= index < state_space_size(n):
        raise ConfigError(f"state index {index} out of range")
    index, r = divmod(index, 2)
    index, l = divmod(index, n + 1)
    index, p_harv = divmod(index, POWER_LEVELS)
    e_now, e_last = divmod(index, ENERGY_LEVELS)
    return SchedulerState(e_now=e_now, e_last=e_last, p_harv=p_harv, l=l, r=r)


@dataclass(frozen=True)
class RewardParams:
    beta: float = 0.05
    p_miss: float = 0.5
    delta_acc: tuple = ()

    def __post_init__(self):
        if self.beta < 0 or self.p_miss < 0:
            raise ConfigError("beta and p_miss must be >= 0")
        object.__setattr__(self, "delta_acc", tuple(self.delta_acc))


def reward(s: SchedulerState, a: int, params: RewardParams,
           energy_fraction: float) -> float:
    """energy_fraction is the continuous usable-energy fraction at s (the
    discretized e_now bin is too coarse for the penalty magnitude)."""
    if a == 1:
        if s.l >= len(params.delta_acc):
            raise ConfigError("action 1 is masked when all learners have run")
        return params.delta_acc[s.l] - params.beta * (1.0 - energy_fraction)
    if s.r == 1:
        return -params.p_miss
    return 0.0


@dataclass(frozen=True)
class QHyperParams:
    learning_rate: float = 0.1
    discount: float = 0.9
    epsilon_start: float = 0.3
    epsilon_end: float = 0.01
    anneal_fraction: float = 0.8

    def to_dict(self):
        return {"learning_rate": self.learning_rate, "discount": self.discount,
                "epsilon_start": self.epsilon_start, "epsilon_end": self.epsilon_end,
                "anneal_fraction": self.anneal_fraction}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class QTable:
    values: np.ndarray   # (state count, 2)
    n: int
    hyper: QHyperParams = field(default_factory=QHyperParams)

    @classmethod
    def zeros(cls, n, hyper=None) -> "QTable":
        return cls(values=np.zeros((state_space_size(n), 2)), n=n,
                   hyper=hyper or QHyperParams())

    def masked_max(self, s: SchedulerState) -> float:
        idx = encode_state(s, self.n)
        if s.l >= self.n:
            return float(self.values[idx, 0])
        return float(self.values[idx].max())


def act(table: QTable, s: SchedulerState) -> int:
    """Greedy action; a=1 is masked at l=N and exact ties resolve to a=0."""
    if s.l >= table.n:
        return 0
    q0, q1 = table.values[encode_state(s, table.n)]
    return 1 if q1 > q0 else 0


def q_update(table: QTable, s: SchedulerState, a: int, r: float,
             s_next, terminal=False, discount=None):
    """One-step Q-learning update in place; terminal transitions bootstrap 0.

    discount overrides the table's gamma for this transition; the offline
    trainer passes 1.0 for decision points inside a single request, so that
    gamma measures request-to-request time, not prefix depth."""
    idx = encode_state(s, table.n)
    if terminal:
        bootstrap = 0.0
    else:
        gamma = table.hyper.discount if discount is None else discount
        bootstrap = gamma * table.masked_max(s_next)
    q = table.values[idx, a]
    table.values[idx, a] = q + table.hyper.learning_rate * (r + bootstrap - q)
    return table


@dataclass
class EnvConfig:
    capacitor: Capacitor
    trace: PowerTrace
    cost_model: CostModel
    requests: RequestPattern
    reward: RewardParams
    power_thresholds: tuple = None
    eta: float = 1.0
    initial_voltage: float = None

    def __post_init__(self):
        if self.power_thresholds is None:
            self.power_thresholds = power_terciles(self.trace)


class StateTracker:
    """Builds SchedulerState observations for one simulated run, including the
    trailing mean battery level over the last 10 served requests (running mean
    until 10 exist)."""

    def __init__(self, n, cap_template: Capacitor, one_learner_cost,
                 power_thresholds):
        self.n = n
        self.cap_template = cap_template
        self.one_learner_cost = one_learner_cost
        self.power_thresholds = power_thresholds
        self.history = []

    def observe(self, device: Device, l: int, r: int) -> SchedulerState:
        e_now = discretize_energy(device.cap, self.one_learner_cost)
        if self.history:
            mean_frac = float(np.mean(self.history[-E_LAST_WINDOW:]))
        else:
            mean_frac = device.cap.usable_fraction
        e_last = discretize_energy_fraction(mean_frac, self.cap_template,
                                            self.one_learner_cost)
        p = discretize_power(device.p_harv, self.power_thresholds)
        return SchedulerState(e_now=e_now, e_last=e_last, p_harv=p, l=l, r=r)

    def record_post_inference(self, device: Device):
        self.history.append(device.cap.usable_fraction)


def _make_device(env: EnvConfig) -> Device:
    cap = env.capacitor
    if env.initial_voltage is not None:
        cap = replace(cap, voltage=env.initial_voltage)
    return Device(cap=cap, trace=env.trace, cost_model=env.cost_model, eta=env.eta)


def train_offline(env: EnvConfig, ensemble_model, episodes, seed,
                  hyper: QHyperParams = None):
    """Episodic epsilon-greedy Q-learning against the simulated device.

    Each episode replays the trace from the start. Misses that happen while
    the device is off are charged (as -p_miss) to the reward of the previous
    action, which is what lets the agent learn to conserve energy. Returns
    (QTable, per-episode cumulative reward list).
    """
    n = ensemble_model.size
    params = replace(env.reward, delta_acc=tuple(ensemble_model.delta_acc))
    hyper = hyper or QHyperParams()
    table = QTable.zeros(n, hyper)
    costs = [inference_cost(l.macs, env.cost_model) for l in ensemble_model.learners]
    one_cost = max(costs)
    rng = np.random.default_rng(seed)
    curve = []
    anneal_len = max(1, int(episodes * hyper.anneal_fraction))
    for episode in range(episodes):
        frac = min(1.0, episode / anneal_len)
        epsilon = hyper.epsilon_start + frac * (hyper.epsilon_end - hyper.epsilon_start)
        device = _make_device(env)
        tracker = StateTracker(n, env.capacitor, one_cost, env.power_thresholds)
        horizon = min(env.requests.horizon, env.trace.horizon)
        req_times = np.arange(env.requests.period, horizon + 1e-9,
                              env.requests.period)
        total_reward = 0.0
        # (s, a, accumulated reward, discount) awaiting its successor state;
        # discount 1.0 marks transitions that stay inside one request
        pending = None
        for t_req in req_times:
            device.advance(float(t_req))
            if not device.cap.is_on:
                if pending is not None:
                    s_p, a_p, r_p, _ = pending
                    pending = (s_p, a_p, r_p - params.p_miss, hyper.discount)
                total_reward -= params.p_miss
                continue
            l = 0
            while True:
                s = tracker.observe(device, l=l, r=1 if l == 0 else 0)
                if pending is not None:
                    q_update(table, pending[0], pending[1], pending[2], s,
                             discount=pending[3])
                    pending = None
                if l >= n:
                    a = 0
                elif rng.random() < epsilon:
                    a = int(rng.integers(0, 2))
                else:
                    a = act(table, s)
                r_now = reward(s, a, params, device.cap.usable_fraction)
                total_reward += r_now
                if a == 0:
                    pending = (s, a, r_now, hyper.discount)
                    break
                if not device.draw(costs[l]):
                    # the learner could not run: revoke its accuracy gain; at
                    # l = 0 the request fails outright, like a decline
                    penalty = params.delta_acc[l] + (params.p_miss if l == 0 else 0.0)
                    pending = (s, a, r_now - penalty, hyper.discount)
                    total_reward -= penalty
                    break
                pending = (s, a, r_now, 1.0)
                l += 1
            if l > 0:
                tracker.record_post_inference(device)
        if pending is not None:
            q_update(table, pending[0], pending[1], pending[2], None, terminal=True)
        curve.append(total_reward)
    return table, curve


# ---------------------------------------------------------------------------
# persistence: JSON header + full-precision value array


def save_qtable(table: QTable, path):
    doc = {
        "version": QTABLE_VERSION,
        "n": table.n,
        "hyperparameters": table.hyper.to_dict(),
        "values": [[float(v) for v in row] for row in table.values],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_qtable(path, expected_n=None) -> QTable:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise TableLoadError(f"cannot read q-table {path}: {exc}") from exc
    if doc.get("version") != QTABLE_VERSION:
        raise TableLoadError(f"{path}: unsupported q-table version {doc.get('version')}")
    n = doc.get("n")
    if expected_n is not None and n != expected_n:
        raise TableLoadError(f"{path}: table trained for N={n}, expected N={expected_n}")
    values = np.asarray(doc["values"], dtype=np.float64)
    if values.shape != (state_space_size(n), 2):
        raise TableLoadError(f"{path}: value array shape {values.shape} wrong for N={n}")
    return QTable(values=values, n=n,
                  hyper=QHyperParams.from_dict(doc["hyperparameters"]))
