import csv
import json

import pytest

from panalloc.acceptance import (
    allocations_valid, conservation_error, uptime_scenario, init_overhead, init_overhead_scenario, scenario_path, soc_monotone,
    trace_fingerprint,
)
from panalloc.core import Activity, load_energy_catalog
from panalloc.errors import InvalidScenario
from panalloc.simulator import (
    MonitorState, RawContext, context_monitor_step, load_scenario, run, scenario_from_dict, uptime_metrics,
)

import oracles

CAT = load_energy_catalog()


def _phone(i=1, **kw):
    d = {"id": i, "kind": "Phone", "battery_capacity_mAh": 2300, "full_battery_hours": 48,
         "functions": ["Accelerometer"]}
    d.update(kw)
    return d


def _scenario(**kw):
    data = {"name": "t", "horizon_s": 3600, "devices": [_phone()]}
    data.update(kw)
    return scenario_from_dict(data, catalog=CAT)


def _soc_at(trace, device, t):
    """SoC at ``t`` by linear interpolation between samples (drain is piecewise linear)."""
    pts = [(ts, s) for (ts, d, s) in trace.soc_series if d == device]
    before = [p for p in pts if p[0] <= t][-1]
    after = [p for p in pts if p[0] >= t][0]
    if after[0] == before[0]:
        return before[1]
    return before[1] + (after[1] - before[1]) * (t - before[0]) / (after[0] - before[0])


# --- baseline drain -----------------------------------------------------------------


def test_idle_phone_loses_one_48th_per_hour():
    trace = run(_scenario())
    e = trace.energy[1]
    assert e["baseline"] == pytest.approx(oracles.mah_to_mJ(2300) / 48, rel=1e-9)
    # a lone device forms no group and sends no messages
    assert e["init"] == 0 and e["message"] == 0
    assert _soc_at(trace, 1, 3600) == pytest.approx(100 - 100 / 48, rel=1e-9)
    assert trace.uptime_s[1] == 3600 == trace.system_uptime_s


def test_flat_battery_dies_at_the_predicted_time():
    trace = run(_scenario(horizon_s=86400, devices=[_phone(full_battery_hours=10, initial_soc_percent=50)]))
    assert trace.uptime_s[1] == pytest.approx(5 * 3600, abs=1e-3)
    assert trace.energy[1]["final"] == 0


# --- context monitor -----------------------------------------------------------------


def test_monitor_reports_threshold_crossing():
    state = MonitorState(1, threshold_percent=20, soc_percent=21)
    assert context_monitor_step(state, 0, RawContext(21)) == []
    (change,) = context_monitor_step(state, 1, RawContext(20))
    assert (change.name, change.old, change.new) == ("battery", 21, 20)
    assert context_monitor_step(state, 2, RawContext(19)) == []


def test_monitor_ignores_soc_without_boundary():
    state = MonitorState(1, soc_percent=60)
    assert context_monitor_step(state, 0, RawContext(59)) == []


def test_monitor_debounces_activity():
    state = MonitorState(1, debounce_s=10, activity=Activity.WALKING)
    assert context_monitor_step(state, 0, RawContext(80, activity=Activity.STILL)) == []
    assert state.pending_deadline() == 10
    assert context_monitor_step(state, 5, RawContext(80, activity=Activity.WALKING)) == []
    assert context_monitor_step(state, 20, RawContext(80, activity=Activity.WALKING)) == []
    assert state.activity is Activity.WALKING


def test_monitor_reports_persistent_activity():
    state = MonitorState(1, debounce_s=10)
    context_monitor_step(state, 0, RawContext(80, activity=Activity.WALKING))
    assert context_monitor_step(state, 9.5, RawContext(80, activity=Activity.WALKING)) == []
    (change,) = context_monitor_step(state, 10, RawContext(80, activity=Activity.WALKING))
    assert change.name == "activity" and change.new is Activity.WALKING


def test_monitor_reports_binary_flips():
    state = MonitorState(1)
    names = [c.name for c in context_monitor_step(state, 0, RawContext(100, charging=True, network=(1, b"x")))]
    assert names == ["charging", "network"]


# --- two-device uptime scenario -----------------------------------------------------------------


@pytest.fixture(scope="module")
def afv_trace():
    return run(uptime_scenario("afv"))


def test_sensing_moves_to_watch_when_phone_crosses_threshold(afv_trace):
    moves = afv_trace.executors("Accelerometer")
    assert moves[0] == (0.0, [1])
    t_switch, devs = moves[1]
    assert devs == [2]
    assert _soc_at(afv_trace, 1, t_switch) == pytest.approx(21, abs=0.1)  # floor(SoC) reaches 20
    assert afv_trace.allocations()[1]["reasons"] == [{"device": 1, "change": "battery"}]


def test_both_low_picks_the_cheaper_executor(afv_trace):
    t_low, devs = afv_trace.executors("Accelerometer")[2]
    assert _soc_at(afv_trace, 2, t_low) == pytest.approx(21, abs=0.1)
    assert devs == [1]  # the phone's sensor is far cheaper than the watch's


def test_afv_outlives_both_static_baselines(afv_trace):
    watch_only, phone_only = run(uptime_scenario("watch_only")), run(uptime_scenario("phone_only"))
    assert afv_trace.uptime_s[2] > watch_only.uptime_s[2]
    assert afv_trace.uptime_s[1] > phone_only.uptime_s[1]
    gains = uptime_metrics(afv_trace, watch_only)["gain_vs"]
    assert gains["baseline"] == "uptime_watch_only"
    assert gains["per_device"][2]["hours"] > 0


def test_scenario_invariants(afv_trace):
    assert conservation_error(afv_trace) < 1e-6
    assert soc_monotone(afv_trace)
    assert allocations_valid(afv_trace)


@pytest.mark.parametrize("name", ["quality_activity", "heart_rate_shirt", "monetary_switch"])
def test_bundled_scenarios_conserve_energy(name):
    trace = run(load_scenario(scenario_path(name)))
    assert conservation_error(trace) < 1e-6
    assert allocations_valid(trace)
    assert soc_monotone(trace)


def test_runs_are_bit_identical():
    s = load_scenario(scenario_path("quality_activity"))
    assert trace_fingerprint(run(s)) == trace_fingerprint(run(s))


def test_threshold_is_respected_after_crossing(afv_trace):
    low, checked = set(), 0
    for e in afv_trace.events:
        if e["type"] == "context" and e.get("name") == "battery":
            low.add(e["device"])
        if e["type"] == "allocation" and len(low) == 1:
            (executor,) = e["placement"]["Accelerometer"]
            assert executor not in low
            checked += 1
    assert checked >= 1


# --- quality mode ---------------------------------------------------------------------


def test_quality_follows_activity_after_debounce():
    trace = run(load_scenario(scenario_path("quality_activity")))
    assert trace.executors("Accelerometer") == [(0.0, [1]), (10.0, [3]), (130.0, [2]), (250.0, [1])]


def test_short_activity_flip_causes_no_reallocation():
    trace = run(load_scenario(scenario_path("quality_activity")))
    assert not [t for t, _ in trace.executors("Accelerometer") if 200 <= t <= 216]


# --- Tier-2 and monetary ---------------------------------------------------------------


def test_tier2_sensor_is_used_while_present():
    trace = run(load_scenario(scenario_path("heart_rate_shirt")))
    assert trace.executors("HeartRate") == [(0.0, [2]), (300.0, [4]), (600.0, [2])]
    assert 4 not in trace.tier1


def test_monetary_mode_follows_free_network():
    trace = run(load_scenario(scenario_path("monetary_switch")))
    assert trace.executors("InternetUpload") == [(0.0, [1]), (600.0, [2]), (1200.0, [1])]


# --- group formation and messages ------------------------------------------------------


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_group_formation_energy(n):
    assert init_overhead(n, CAT) == 600.0 * (n - 1) + 1800.0


def test_group_formation_is_shared_equally():
    trace = run(init_overhead_scenario(4, CAT))
    shares = {e["init"] for e in trace.energy.values()}
    assert shares == {(600.0 * 3 + 1800.0) / 4}


def test_message_energy_can_be_switched_off():
    s = uptime_scenario("afv").with_changes(horizon_s=600)
    on, off = run(s), run(s.with_changes(include_message_energy=False))
    assert on.energy[2]["message"] > 0
    assert off.energy[1]["message"] == off.energy[2]["message"] == 0


def test_assignment_message_is_charged_to_both_ends():
    trace = run(uptime_scenario("afv").with_changes(horizon_s=1))
    (msg,) = [e for e in trace.events if e["type"] == "message" and e["kind"] == "AssignmentsMsg"]
    assert (msg["sender"], msg["receiver"]) == (2, 1)  # the watch is master
    n = msg["wire_size"]
    assert msg["energy_mJ"]["2"] == pytest.approx(oracles.bt_transfer(oracles.WATCH_BT, n))
    assert msg["energy_mJ"]["1"] == pytest.approx(oracles.bt_transfer(oracles.PHONE_BT, n))


# --- validation and outputs -----------------------------------------------------------------


@pytest.mark.parametrize("patch", [
    {"devices": [_phone(), _phone()]},
    {"soc_threshold_percent": 0},
    {"horizon_s": 0},
    {"strategy": "random"},
    {"strategy": "static", "static_device": 9},
    {"devices": [_phone(initial_soc_percent=120)]},
    {"registrations": [{"app_id": "a", "function": "Accelerometer", "origin": 9}]},
    {"context_script": [{"t_s": 5, "device": 1, "activity": "Walking"}, {"t_s": 1, "device": 1, "activity": "Still"}]},
    {"devices": [_phone(), {"id": 4, "kind": "Tier2Sensor", "paired_host": 7, "functions": ["HeartRate"]}]},
    {"devices": [{"id": 1}]},
])
def test_invalid_scenarios(patch):
    with pytest.raises(InvalidScenario):
        _scenario(**patch)


def test_malformed_scenario_file(tmp_path):
    p = tmp_path / "s.json"
    p.write_text("{")
    with pytest.raises(InvalidScenario):
        load_scenario(p)


def test_uptime_against_itself_is_zero_gain():
    trace = run(_scenario())
    m = uptime_metrics(trace, trace)
    assert m["gain_vs"]["system"] == {"hours": 0.0, "percent": 0.0}
    assert m["system_uptime_s"] == 3600


def test_trace_outputs(tmp_path):
    trace = run(_scenario())
    trace.write_csv(tmp_path / "soc.csv")
    trace.write_json(tmp_path / "events.json")
    with open(tmp_path / "soc.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t_s", "device_id", "soc_percent"]
    assert len(rows) > 2
    assert json.loads((tmp_path / "events.json").read_text())["scenario"] == "t"
