"""Supercapacitor dynamics, power traces, the energy cost model, and the
scheduler-state discretizers."""
import numpy as np
import pytest

from enboost.energy import (Capacitor, CostModel, Device, PowerTrace,
                            RequestPattern, discretize_energy,
                            discretize_energy_fraction, discretize_power,
                            inference_cost, load_trace, power_terciles, step,
                            synth_trace)
from enboost.errors import ConfigError, TraceError


# ---------------------------------------------------------------------------
# capacitor


def test_stored_energy_half_c_v_squared():
    cap = Capacitor(capacitance=0.47, v_max=4.2, v_cutoff=1.7, voltage=3.6)
    assert abs(cap.energy - 3.0456) < 1e-12


def test_usable_energy_above_cutoff():
    cap = Capacitor(capacitance=0.47, v_max=4.2, v_cutoff=1.7, voltage=3.6)
    assert abs(cap.usable_energy - 2.36645) < 1e-12
    assert cap.is_on


def test_usable_energy_floors_at_zero_below_cutoff():
    cap = Capacitor(voltage=1.0)
    assert cap.usable_energy == 0.0
    assert not cap.is_on


def test_with_energy_round_trip():
    cap = Capacitor(voltage=2.5)
    assert abs(cap.with_energy(cap.energy).voltage - 2.5) < 1e-12


def test_with_energy_clamps():
    cap = Capacitor()
    assert cap.with_energy(-1.0).voltage == 0.0
    assert abs(cap.with_energy(1e9).voltage - cap.v_max) < 1e-12


def test_capacitor_validation():
    with pytest.raises(ConfigError):
        Capacitor(v_cutoff=5.0, v_max=4.2)
    with pytest.raises(ConfigError):
        Capacitor(voltage=9.0)


# ---------------------------------------------------------------------------
# step


def test_step_balanced_power_is_identity():
    cap = Capacitor(voltage=3.0)
    out, deficit = step(cap, harvested_power=0.01, load_power=0.01, dt=50.0)
    assert abs(out.energy - cap.energy) < 1e-12
    assert not deficit


def test_step_net_harvest_adds_energy():
    cap = Capacitor(voltage=3.0)
    out, _ = step(cap, 0.02, 0.0, dt=10.0)
    assert abs(out.energy - (cap.energy + 0.2)) < 1e-12


def test_step_clamps_at_full_and_empty():
    cap = Capacitor(voltage=4.2)
    out, deficit = step(cap, 1.0, 0.0, dt=1e6)
    assert abs(out.energy - cap.max_energy) < 1e-12
    assert not deficit
    out, deficit = step(Capacitor(voltage=2.0), 0.0, 1.0, dt=1e6)
    assert out.energy == 0.0
    assert deficit


def test_step_efficiency_scales_harvest():
    cap = Capacitor(voltage=3.0)
    out, _ = step(cap, 0.02, 0.0, dt=10.0, eta=0.5)
    assert abs(out.energy - (cap.energy + 0.1)) < 1e-12


def test_step_rejects_nonpositive_dt():
    with pytest.raises(ConfigError):
        step(Capacitor(), 0.0, 0.0, dt=0.0)


# ---------------------------------------------------------------------------
# traces


def test_load_trace_volt_ampere_schema(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("timestamp_s,voltage_V,current_A\n0.0,2.0,0.001\n1.0,1.5,0.002\n")
    trace = load_trace(p)
    assert np.allclose(trace.power, [0.002, 0.003])
    assert trace.power_at(0.5) == 0.002


def test_load_trace_power_schema_with_efficiency(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("timestamp_s,power_W\n0.0,0.01\n2.0,0.02\n")
    trace = load_trace(p, harvester_efficiency=0.5)
    assert np.allclose(trace.power, [0.005, 0.01])


def test_load_trace_errors(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("")
    with pytest.raises(TraceError):
        load_trace(p)
    p.write_text("volts,amps\n")
    with pytest.raises(TraceError, match="unrecognized header"):
        load_trace(p)
    p.write_text("timestamp_s,power_W\n0.0,0.01\n0.0,0.02\n")
    with pytest.raises(TraceError, match="strictly increasing"):
        load_trace(p)
    p.write_text("timestamp_s,power_W\n0.0,0.01\n1.0,oops\n")
    with pytest.raises(TraceError, match=":3:"):
        load_trace(p)


def test_power_trace_rejects_negative_power():
    with pytest.raises(TraceError):
        PowerTrace(times=np.array([0.0, 1.0]), power=np.array([0.1, -0.1]))


def test_power_at_holds_last_sample():
    trace = PowerTrace(times=np.array([0.0, 10.0]), power=np.array([1.0, 2.0]))
    assert trace.power_at(-5.0) == 1.0
    assert trace.power_at(9.99) == 1.0
    assert trace.power_at(10.0) == 2.0
    assert trace.power_at(1e9) == 2.0


def test_synth_constant_profile():
    trace = synth_trace(0, "constant", duration=10.0, constant_power=0.005)
    assert np.all(trace.power == 0.005)
    with pytest.raises(ConfigError):
        synth_trace(0, "constant", duration=10.0)


def test_synth_day_night_square_wave():
    trace = synth_trace(0, "day-night", duration=400.0, period=100.0,
                        high_power=0.02)
    assert trace.power_at(10.0) == 0.02
    assert trace.power_at(60.0) == 0.0
    assert trace.power_at(110.0) == 0.02
    assert abs(np.mean(trace.power == 0.0) - 0.5) < 0.01


def test_synth_bursty_deterministic():
    a = synth_trace(7, "bursty", duration=500.0)
    b = synth_trace(7, "bursty", duration=500.0)
    assert np.array_equal(a.power, b.power)
    assert not np.array_equal(a.power, synth_trace(8, "bursty", duration=500.0).power)


def test_synth_unknown_profile():
    with pytest.raises(ConfigError):
        synth_trace(0, "lunar", duration=10.0)


# ---------------------------------------------------------------------------
# cost model


def test_inference_cost_examples():
    cm = CostModel(per_inference_overhead=0.0)
    assert inference_cost(0, cm) == 0.0
    assert abs(inference_cost(1_000_000, cm) - 1e-3) < 1e-15
    default = CostModel()
    assert abs(inference_cost(1_000_000, default) - 1.1e-3) < 1e-15
    # equal MACs, equal cost regardless of architecture
    assert inference_cost(78624, default) == inference_cost(78624, default)


def test_cost_model_validation():
    with pytest.raises(ConfigError):
        CostModel(energy_per_mac=-1.0)


def test_request_pattern_validation():
    with pytest.raises(ConfigError):
        RequestPattern(period=0.0, horizon=10.0)
    with pytest.raises(ConfigError):
        RequestPattern(period=1.0, horizon=-1.0)


# ---------------------------------------------------------------------------
# discretizers


def test_discretize_energy_bins():
    cap = Capacitor(capacitance=0.47, v_max=4.2, v_cutoff=1.7)
    cost = 1e-3
    full = cap.with_energy(cap.max_energy)
    assert discretize_energy(full, cost) == 3
    below = cap.with_energy(cap.cutoff_energy + 0.5 * cost)
    assert discretize_energy(below, cost) == 0
    low = cap.with_energy(cap.cutoff_energy + 0.3 * cap.max_usable_energy)
    assert discretize_energy(low, cost) == 1
    high = cap.with_energy(cap.cutoff_energy + 0.6 * cap.max_usable_energy)
    assert discretize_energy(high, cost) == 2


def test_discretize_energy_fraction_matches_energy():
    cap = Capacitor(capacitance=0.47, v_max=4.2, v_cutoff=1.7)
    cost = 1e-3
    for frac in (0.0, 0.2, 0.5, 0.8, 1.0):
        direct = discretize_energy(
            cap.with_energy(cap.cutoff_energy + frac * cap.max_usable_energy),
            cost)
        assert discretize_energy_fraction(frac, cap, cost) == direct


def test_discretize_power_bins():
    th = (0.001, 0.01)
    assert discretize_power(0.0, th) == 0
    assert discretize_power(0.001, th) == 1
    assert discretize_power(0.005, th) == 1
    assert discretize_power(0.01, th) == 2
    assert discretize_power(5.0, th) == 2
    with pytest.raises(ConfigError):
        discretize_power(0.0, (0.01, 0.01))


def test_power_terciles_uniform_trace():
    rng = np.random.default_rng(0)
    trace = PowerTrace(times=np.arange(30000, dtype=np.float64),
                       power=rng.uniform(0.0, 0.03, size=30000))
    t1, t2 = power_terciles(trace)
    bins = np.array([discretize_power(p, (t1, t2)) for p in trace.power])
    for level in range(3):
        assert abs(np.mean(bins == level) - 1.0 / 3.0) < 0.02


def test_power_terciles_zero_heavy_fallback():
    power = np.concatenate([np.zeros(80), np.full(20, 0.02)])
    trace = PowerTrace(times=np.arange(100, dtype=np.float64), power=power)
    t1, t2 = power_terciles(trace)
    assert 0.0 < t1 < t2
    assert discretize_power(0.0, (t1, t2)) == 0
    assert discretize_power(0.02, (t1, t2)) == 2


# ---------------------------------------------------------------------------
# device


def make_device(voltage=3.0, power=0.002):
    trace = synth_trace(0, "constant", duration=1000.0, constant_power=power)
    return Device(cap=Capacitor(voltage=voltage), trace=trace,
                  cost_model=CostModel())


def test_device_energy_closure():
    dev = make_device()
    e0 = dev.cap.energy
    dev.advance(100.0)
    assert dev.draw(0.5)
    dev.advance(400.0, load_power=0.01)
    assert abs(dev.cap.energy - (e0 + dev.harvested - dev.consumed)) < 1e-9


def test_device_closure_across_clamps():
    # force both clamps: full charge then depletion
    trace = synth_trace(0, "day-night", duration=4000.0, period=2000.0,
                        high_power=0.05)
    dev = Device(cap=Capacitor(voltage=4.0), trace=trace,
                 cost_model=CostModel())
    e0 = dev.cap.energy
    dev.advance(1000.0)                    # charges to full, clamp on top
    assert abs(dev.cap.energy - dev.cap.max_energy) < 1e-9
    dev.advance(4000.0, load_power=0.05)   # discharges to empty, clamp at 0
    assert dev.cap.energy == 0.0
    assert abs(dev.cap.energy - (e0 + dev.harvested - dev.consumed)) < 1e-9


def test_device_draw_semantics():
    dev = make_device(voltage=3.0, power=0.0)
    usable = dev.cap.usable_energy
    assert not dev.draw(usable + 1e-6)
    assert dev.consumed == 0.0            # failed draw deducts nothing
    assert dev.draw(usable)
    assert dev.cap.usable_energy < 1e-9
    with pytest.raises(ConfigError):
        dev.draw(-1.0)


def test_device_advance_is_time_monotone():
    dev = make_device()
    dev.advance(50.0)
    assert dev.t == 50.0
    dev.advance(10.0)   # no-op: already past
    assert dev.t == 50.0
