from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egoplan import world
from egoplan.geometry import rect_corners, rects_intersect
from egoplan.kinematics import SelfState
from egoplan.world import (InfeasibleGeometryError, LaneGeometry, LogParseError, NonUniformTimeStepError,
                           OtherVehicle, Scene, StressConfig, VehicleDims)


def test_dims_and_lanes():
    with pytest.raises(ValueError):
        VehicleDims(0.0, 4.0)
    lanes = LaneGeometry(3, 3.7, 1.0)
    assert lanes.road_y_max - lanes.road_y_min == pytest.approx(3 * 3.7)
    assert lanes.lane_center(1) == pytest.approx(1.0 + 1.5 * 3.7)
    assert lanes.lane_index(1.0 + 3.8) == 1


def test_scene_rejects_duplicate_ids():
    car = OtherVehicle(1, SelfState(10, 5.55, 1, 0, 10), VehicleDims())
    with pytest.raises(ValueError, match="duplicate"):
        Scene(0, SelfState(0, 5.55, 1, 0, 10), VehicleDims(), (car, car), LaneGeometry())


def test_stress_lead_stops_within_closed_form_time():
    cfg = StressConfig()
    log = world.make_stress_scenario(cfg)
    lead = log.tracks[1]
    t_stop = cfg.onset + cfg.speed / -cfg.lead_decel    # 1 + 20/6
    speeds = lead.states[:, 4]
    ts = np.arange(len(speeds)) * cfg.dt
    assert np.all(speeds[ts >= t_stop + 1e-9] == 0.0)
    assert np.all(speeds[ts < t_stop - cfg.dt] > 0.0)


def test_stress_lead_speed_formula():
    cfg = StressConfig()
    log = world.make_stress_scenario(cfg)
    for k, row in enumerate(log.tracks[1].states):
        t = k * cfg.dt
        expect = cfg.speed if t < cfg.onset else max(0.0, cfg.speed + cfg.lead_decel * (t - cfg.onset))
        assert row[4] == expect


def test_stress_zero_decel_constant_speeds():
    log = world.make_stress_scenario(StressConfig(lead_decel=0.0))
    for tr in log.tracks.values():
        assert np.all(tr.states[:, 4] == 20.0)
        assert np.allclose(np.diff(tr.states[:, 0]), 2.0)


def test_stress_infeasible_geometry():
    with pytest.raises(InfeasibleGeometryError):
        world.make_stress_scenario(StressConfig(rear_gap=3.0))
    with pytest.raises(ValueError):
        world.make_stress_scenario(StressConfig(speed=0.0))


def test_traffic_deterministic_and_single_car():
    a = world.make_traffic_scenario(5, duration=3.0)
    b = world.make_traffic_scenario(5, duration=3.0)
    assert a == b
    one = world.make_traffic_scenario(5, density=1e-3, duration=3.0)
    assert list(one.tracks) == [0]


def test_traffic_no_overlaps_any_frame():
    log = world.make_traffic_scenario(11, density=0.5, lane_count=3, duration=30.0)
    # brute force: every pair of rectangles at every frame
    for frame in range(log.first_frame, log.last_frame + 1, 1):
        cars = log.cars_at(frame)
        rects = [rect_corners(*s[:4], d.length, d.width) for _, s, d in cars]
        for i in range(len(rects)):
            for j in range(i + 1, len(rects)):
                assert not rects_intersect(rects[i], rects[j]), (frame, cars[i][0], cars[j][0])


def test_traffic_validation():
    with pytest.raises(ValueError):
        world.make_traffic_scenario(0, density=0.0)
    with pytest.raises(ValueError):
        world.make_traffic_scenario(0, duration=0.0)


def test_log_roundtrip_exact(tmp_path):
    log = world.make_traffic_scenario(3, duration=2.0)
    p = tmp_path / "log.csv"
    world.save_log(log, p)
    assert world.load_log(p) == log
    stress = world.make_stress_scenario()
    world.save_log(stress, p)
    assert world.load_log(p) == stress


def _write(tmp_path, body):
    p = tmp_path / "x.csv"
    p.write_text(body)
    return p


HEAD = "# dt=0.1\nt,car_id,x,y,ux,uy,s,w,l\n"


def test_log_parse_errors(tmp_path):
    with pytest.raises(LogParseError, match="empty"):
        world.load_log(_write(tmp_path, ""))
    with pytest.raises(LogParseError) as e:
        world.load_log(_write(tmp_path, HEAD + "0.0,0,0,0,1,0,10,1.8,abc\n"))
    assert e.value.line == 3
    with pytest.raises(LogParseError, match="header"):
        world.load_log(_write(tmp_path, "# dt=0.1\nfoo,bar\n"))
    with pytest.raises(LogParseError, match="backwards"):
        world.load_log(_write(tmp_path, HEAD + "0.1,0,0,0,1,0,10,1.8,4.8\n0.0,0,0,0,1,0,10,1.8,4.8\n"))
    with pytest.raises(NonUniformTimeStepError):
        world.load_log(_write(tmp_path, HEAD + "0.0,0,0,0,1,0,10,1.8,4.8\n0.3,0,0,0,1,0,10,1.8,4.8\n"))
    with pytest.raises(NonUniformTimeStepError):
        world.load_log(_write(tmp_path, HEAD + "0.05,0,0,0,1,0,10,1.8,4.8\n"))


def test_log_normalizes_heading(tmp_path):
    log = world.load_log(_write(tmp_path, HEAD + "0.0,0,0,0,3,4,10,1.8,4.8\n"))
    assert log.normalized_headings
    row = log.tracks[0].states[0]
    assert (row[2], row[3]) == pytest.approx((0.6, 0.8))
    ok = world.load_log(_write(tmp_path, HEAD + "0.0,0,0,0,1,0,10,1.8,4.8\n"))
    assert not ok.normalized_headings


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_traffic_no_initial_overlap(seed, density):
    log = world.make_traffic_scenario(seed, density=density, duration=1.0)
    assert world.overlapping_pairs(log, 0) == []
    assert log.tracks[0].states[0, 0] == 0.0


@given(st.floats(0.0, 15.0))
def test_stress_lead_speed_closed_form(t):
    cfg = StressConfig()
    v = world.lead_speed_at(t, cfg)
    assert v == (cfg.speed if t < cfg.onset else max(0.0, cfg.speed + cfg.lead_decel * (t - cfg.onset)))
    assert 0.0 <= v <= cfg.speed
