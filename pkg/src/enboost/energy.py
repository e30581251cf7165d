"""Harvesting-powered device model: supercapacitor charge dynamics, power
traces (CSV replay or synthetic), the per-learner energy cost model, and the
discretizers that turn continuous energy/power readings into scheduler state
bins."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, TraceError


@dataclass
class Capacitor:
    capacitance: float = 0.47   # farads
    v_max: float = 4.2          # regulated charging ceiling, volts
    v_cutoff: float = 1.7       # device browns out below this, volts
    voltage: float = 4.2

    def __post_init__(self):
        if not 0.0 < self.v_cutoff < self.v_max:
            raise ConfigError("need 0 < v_cutoff < v_max")
        if not 0.0 <= self.voltage <= self.v_max:
            raise ConfigError("voltage outside [0, v_max]")

    @property
    def energy(self) -> float:
        return 0.5 * self.capacitance * self.voltage ** 2

    @property
    def max_energy(self) -> float:
        return 0.5 * self.capacitance * self.v_max ** 2

    @property
    def cutoff_energy(self) -> float:
        return 0.5 * self.capacitance * self.v_cutoff ** 2

    @property
    def usable_energy(self) -> float:
        """Energy stored above the cutoff voltage; what the device can spend."""
        return max(0.0, self.energy - self.cutoff_energy)

    @property
    def max_usable_energy(self) -> float:
        return self.max_energy - self.cutoff_energy

    @property
    def usable_fraction(self) -> float:
        return self.usable_energy / self.max_usable_energy

    @property
    def is_on(self) -> bool:
        return self.voltage >= self.v_cutoff

    def with_energy(self, joules: float) -> "Capacitor":
        e = min(max(joules, 0.0), self.max_energy)
        return replace(self, voltage=float(np.sqrt(2.0 * e / self.capacitance)))


def step(cap: Capacitor, harvested_power, load_power, dt, eta=1.0):
    """Advance charge by (P_harv*eta - P_load)*dt, clamped to [0, full].

    Returns (capacitor, deficit flag); the flag is set when stored energy hit
    zero, i.e. the load could not be fully served.
    """
    if dt <= 0:
        raise ConfigError("dt must be > 0")
    e = cap.energy + (harvested_power * eta - load_power) * dt
    deficit = e < 0.0
    return cap.with_energy(e), deficit


@dataclass(frozen=True)
class PowerTrace:
    times: np.ndarray     # seconds, strictly increasing
    power: np.ndarray     # watts, >= 0
    source: str = "synthetic"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        p = np.asarray(self.power, dtype=np.float64)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "power", p)
        if t.shape != p.shape or t.ndim != 1 or t.size == 0:
            raise TraceError("trace needs matching 1-d time and power arrays")
        if np.any(np.diff(t) <= 0):
            raise TraceError("trace timestamps must be strictly increasing")
        if np.any(p < 0):
            raise TraceError("harvested power must be >= 0")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def power_at(self, t: float) -> float:
        """Piecewise-constant lookup (value holds until the next sample)."""
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        idx = min(max(idx, 0), self.times.size - 1)
        return float(self.power[idx])


def load_trace(path, harvester_efficiency=1.0) -> PowerTrace:
    """CSV replay; two schemas sniffed by header:
    timestamp_s,voltage_V,current_A  or  timestamp_s,power_W."""
    path = Path(path)
    times, power = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise TraceError(f"{path}: empty trace")
        header = [h.strip() for h in header]
        if header == ["timestamp_s", "voltage_V", "current_A"]:
            vi_schema = True
        elif header == ["timestamp_s", "power_W"]:
            vi_schema = False
        else:
            raise TraceError(f"{path}: unrecognized header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if vi_schema:
                    t, v, i = (float(x) for x in row)
                    p = v * i * harvester_efficiency
                else:
                    t, p_raw = (float(x) for x in row)
                    p = p_raw * harvester_efficiency
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: malformed row: {exc}") from exc
            times.append(t)
            power.append(p)
    return PowerTrace(times=np.asarray(times), power=np.asarray(power),
                      source=f"file:{path}")


def synth_trace(seed, profile, duration, sample_interval=1.0,
                period=200.0, high_power=0.02, burst_rate=0.02,
                constant_power=None) -> PowerTrace:
    """Deterministic synthetic traces.

    profile "day-night": square wave, high_power for the first half of each
    period and 0 for the second half. "bursty": Poisson-ish random bursts.
    "constant": fixed power (constant_power).
    """
    if duration <= 0:
        raise ConfigError("duration must be > 0")
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, duration, sample_interval)
    if profile == "day-night":
        phase = np.mod(t, period)
        p = np.where(phase < period / 2.0, high_power, 0.0)
    elif profile == "bursty":
        on = rng.random(t.size) < burst_rate
        p = np.where(on, high_power * rng.uniform(0.5, 1.5, size=t.size), 0.0)
    elif profile == "constant":
        if constant_power is None:
            raise ConfigError("constant profile needs constant_power")
        p = np.full(t.size, float(constant_power))
    else:
        raise ConfigError(f"unknown trace profile {profile!r}")
    return PowerTrace(times=t, power=p, source=f"synthetic:{profile}:{seed}")


@dataclass(frozen=True)
class CostModel:
    energy_per_mac: float = 1e-9          # joules
    per_inference_overhead: float = 1e-4  # joules per learner execution
    sleep_power: float = 5e-6             # watts
    active_idle_power: float = 1e-3       # watts
    fc_retrain_energy_fraction: float = 0.1  # FC-backward cost / forward cost

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ConfigError(f"cost model field {name} must be >= 0")


def inference_cost(learner_macs: int, cost_model: CostModel) -> float:
    return learner_macs * cost_model.energy_per_mac + cost_model.per_inference_overhead


@dataclass(frozen=True)
class RequestPattern:
    period: float          # seconds between inference requests
    horizon: float         # total simulated seconds

    def __post_init__(self):
        if self.period <= 0:
            raise ConfigError("request period must be > 0")
        if self.horizon <= 0:
            raise ConfigError("horizon must be > 0")


# ---------------------------------------------------------------------------
# scheduler-state discretizers (Table-style bins)

ENERGY_LEVELS = 4   # 0 depleted / 1 low / 2 high / 3 full
POWER_LEVELS = 3    # 0 low / 1 mid / 2 high

_FULL_TOLERANCE = 1e-9


def discretize_energy(cap: Capacitor, one_learner_cost: float) -> int:
    """0 if the usable store cannot cover one learner; 3 at full charge;
    else 1 below half of max usable, 2 at or above."""
    usable = cap.usable_energy
    if usable < one_learner_cost:
        return 0
    if usable >= cap.max_usable_energy - _FULL_TOLERANCE:
        return 3
    return 1 if usable < 0.5 * cap.max_usable_energy else 2


def discretize_energy_fraction(fraction: float, cap: Capacitor,
                               one_learner_cost: float) -> int:
    """Same bins, applied to a usable-energy fraction (for trailing means)."""
    usable = fraction * cap.max_usable_energy
    if usable < one_learner_cost:
        return 0
    if usable >= cap.max_usable_energy - _FULL_TOLERANCE:
        return 3
    return 1 if usable < 0.5 * cap.max_usable_energy else 2


def discretize_power(p_harv: float, thresholds) -> int:
    """0 below t1, 1 in [t1, t2), 2 at or above t2 (right-closed top bin)."""
    t1, t2 = thresholds
    if not t1 < t2:
        raise ConfigError(f"need t1 < t2, got {thresholds}")
    if p_harv < t1:
        return 0
    return 1 if p_harv < t2 else 2


def power_terciles(trace: PowerTrace):
    """Default power-level thresholds: terciles of the training trace."""
    q1, q2 = np.quantile(trace.power, [1.0 / 3.0, 2.0 / 3.0])
    t1, t2 = float(q1), float(q2)
    pos = trace.power[trace.power > 0]
    if t1 <= 0:
        # traces with long zero stretches: keep zero harvest in the low bin
        t1 = float(pos.min()) / 2.0 if pos.size else 1e-9
    if t2 <= t1:
        top = float(trace.power.max())
        t2 = (t1 + top) / 2.0 if top > t1 else 2.0 * t1
    return (t1, t2)


# ---------------------------------------------------------------------------
# single-owner device state used by the simulation drivers


@dataclass
class Device:
    cap: Capacitor
    trace: PowerTrace
    cost_model: CostModel
    eta: float = 1.0
    t: float = 0.0
    harvested: float = 0.0     # absorbed energy (post-clamp), joules
    consumed: float = 0.0      # served load energy, joules

    def advance(self, until: float, load_power=None):
        """Integrate harvest minus a constant load power up to time `until`,
        splitting at trace sample boundaries for exact bookkeeping."""
        if load_power is None:
            load_power = self.cost_model.sleep_power
        while self.t < until - 1e-12:
            idx = int(np.searchsorted(self.trace.times, self.t, side="right"))
            boundary = self.trace.times[idx] if idx < self.trace.times.size else np.inf
            seg_end = min(until, float(boundary))
            dt = seg_end - self.t
            if dt <= 0:
                break
            p_harv = self.trace.power_at(self.t) * self.eta
            before = self.cap.energy
            self.cap, deficit = step(self.cap, p_harv, load_power, dt, eta=1.0)
            delta = self.cap.energy - before
            # attribute the clamped delta: absorbed harvest vs served load
            served_load = min(load_power * dt, before + p_harv * dt)
            absorbed = delta + served_load
            self.harvested += absorbed
            self.consumed += served_load
            self.t = seg_end

    def draw(self, joules: float) -> bool:
        """Instantaneous usable-energy spend; False if the store cannot cover
        it (nothing is deducted on failure)."""
        if joules < 0:
            raise ConfigError("draw must be >= 0")
        if self.cap.usable_energy < joules:
            return False
        self.cap = self.cap.with_energy(self.cap.energy - joules)
        self.consumed += joules
        return True

    @property
    def p_harv(self) -> float:
        return self.trace.power_at(self.t) * self.eta
