import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajrefine.synth import (MAX_SPEED, MAX_TURN_PER_STEP, DatasetFormatError, DatasetSplit,
                              GeneratorConfig, agent_routes, generate_dataset, generate_scenario,
                              ingest_csv, parse_column_map, read_dataset, read_scenarios,
                              scenario_to_dict, write_dataset, write_scenarios)


def test_same_seed_and_index_is_byte_identical():
    cfg = GeneratorConfig(rng_seed=11)
    a, b = generate_scenario(cfg, 4), generate_scenario(cfg, 4)
    assert a == b
    assert json.dumps(scenario_to_dict(a)) == json.dumps(scenario_to_dict(b))
    assert generate_scenario(cfg, 5) != a


def test_keep_lane_futures_stay_on_their_centerline():
    cfg = GeneratorConfig(rng_seed=2, maneuver_mix={"keep-lane": 1.0})
    for index in range(10):
        s = generate_scenario(cfg, index)
        for agent, (maneuver, route, world) in zip(s.agents, agent_routes(cfg, index)):
            assert maneuver == "keep-lane"
            lateral = route.distance_to(world.to_local(agent.future))
            assert lateral.max() < 0.5


def test_zero_noise_past_continues_the_kinematic_path():
    quiet = GeneratorConfig(rng_seed=5, noise_sigma=0.0)
    noisy = replace(quiet, noise_sigma=0.05)
    for index in range(5):
        a, b = generate_scenario(quiet, index), generate_scenario(noisy, index)
        for qa, na in zip(a.agents, b.agents):
            np.testing.assert_array_equal(qa.future, na.future)     # futures are noise-free
            full = np.vstack([qa.past, qa.future])
            step = np.hypot(*np.diff(full, axis=0).T)
            # smooth kinematics: consecutive step lengths change little
            assert np.abs(np.diff(step)).max() < 0.1
    diffs = np.concatenate([(nb.past - qa.past).ravel() for index in range(5)
                            for qa, nb in zip(generate_scenario(quiet, index).agents,
                                              generate_scenario(noisy, index).agents)])
    assert 0.04 < diffs.std() < 0.06


def test_plausibility_and_interaction_guarantees():
    cfg = GeneratorConfig(rng_seed=9, noise_sigma=0.0)
    for index in range(30):
        s = generate_scenario(cfg, index)
        gaps = []
        for a in s.agents:
            full = np.vstack([a.past, a.future])
            step = np.diff(full, axis=0)
            assert (np.hypot(*step.T) / cfg.step_dt <= MAX_SPEED + 1e-9).all()
            moving = np.hypot(*step.T) > 1e-3
            heading = np.arctan2(step[:, 1], step[:, 0])
            dh = np.abs((np.diff(heading) + np.pi) % (2 * np.pi) - np.pi)
            assert (dh[moving[1:] & moving[:-1]] <= MAX_TURN_PER_STEP).all()
        for i in range(s.n_agents):
            for j in range(i + 1, s.n_agents):
                gaps.append(np.hypot(*(s.agents[i].future - s.agents[j].future).T).min())
        assert min(gaps) < 15.0


def test_scenario_shapes_follow_config():
    cfg = GeneratorConfig(rng_seed=1, past_steps=8, future_steps=4, agents_per_scene=(2, 2))
    s = generate_scenario(cfg, 0)
    assert s.n_agents == 2
    assert all(a.past.shape == (8, 2) and a.future.shape == (4, 2) for a in s.agents)
    assert len(s.scene_xy) > 0 and set(np.unique(s.scene_attr)) <= {0, 1, 2}


@pytest.mark.parametrize("bad, message", [
    ({"n_scenarios": 0}, "n_scenarios must be ≥ 1"),
    ({"maneuver_mix": {"keep-lane": 0.5}}, "sum to 1"),
    ({"maneuver_mix": {"fly": 1.0}}, "unknown maneuvers"),
    ({"lanes_per_scene": (0, 2)}, "lanes_per_scene"),
    ({"past_steps": 1}, "past_steps"),
    ({"lane_sample_spacing": 0.0}, "spacing"),
])
def test_invalid_configs(bad, message):
    with pytest.raises(ValueError, match=message):
        replace(GeneratorConfig(), **bad).validate()


def test_dataset_round_trip_is_exact(tmp_path):
    split = generate_dataset(GeneratorConfig(rng_seed=3, n_scenarios=100))
    info = write_dataset(split, tmp_path, {"seed": 3})
    back = read_dataset(tmp_path)
    for name in ("train", "val", "test"):
        assert getattr(back, name) == getattr(split, name)
        lines = (tmp_path / f"{name}.jsonl").read_text().splitlines()
        assert info["counts"][name] == len(lines) == len(getattr(split, name))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["counts"] == info["counts"]


def test_empty_split_round_trip(tmp_path):
    write_dataset(DatasetSplit(), tmp_path)
    assert (tmp_path / "train.jsonl").read_text() == ""
    back = read_dataset(tmp_path)
    assert back.train == [] and back.val == [] and back.test == []


def test_splits_must_be_disjoint():
    s = generate_scenario(GeneratorConfig(), 0)
    with pytest.raises(ValueError, match="appears in both"):
        DatasetSplit(train=[s], val=[s])


def test_truncated_final_line_names_line_number(tmp_path):
    path = tmp_path / "x.jsonl"
    write_scenarios([generate_scenario(GeneratorConfig(), i) for i in range(3)], path)
    text = path.read_text()
    path.write_text(text[:-40])
    with pytest.raises(DatasetFormatError, match="line 3"):
        read_scenarios(path)


def test_bad_fields_are_reported(tmp_path):
    obj = scenario_to_dict(generate_scenario(GeneratorConfig(), 0))
    path = tmp_path / "x.jsonl"
    path.write_text(json.dumps({**obj, "v": 2}) + "\n")
    with pytest.raises(DatasetFormatError, match="schema version 2"):
        read_scenarios(path)
    broken = dict(obj)
    del broken["scene"]
    path.write_text(json.dumps(obj) + "\n" + json.dumps(broken) + "\n")
    with pytest.raises(DatasetFormatError, match="line 2: missing field 'scene'"):
        read_scenarios(path)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 50))
def test_generation_is_a_pure_function(seed, index):
    cfg = GeneratorConfig(rng_seed=seed)
    assert generate_scenario(cfg, index) == generate_scenario(GeneratorConfig(rng_seed=seed), index)


# ---------------------------------------------------------------- CSV ingestion


def write_tracks(path, rows, header="scenario_id,agent_id,timestep,x,y,semantic"):
    path.write_text(header + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")


def track_rows(sid, aid, n, sem=0, x0=0.0):
    return [(sid, aid, t, x0 + 1.5 * t, 0.1 * t, sem) for t in range(n)]


def test_ingest_single_agent(tmp_path):
    write_tracks(tmp_path / "t.csv", track_rows("s1", "car", 8))
    (tmp_path / "scene.csv").write_text("scenario_id,x,y,attribute\ns1,1.0,2.0,0\ns1,3.0,4.0,2\n")
    rep = ingest_csv(tmp_path / "t.csv", tmp_path / "scene.csv", past_steps=5, future_steps=3)
    assert len(rep.scenarios) == 1 and rep.n_dropped == 0
    s = rep.scenarios[0]
    assert s.n_agents == 1 and s.agents[0].past.shape == (5, 2) and s.agents[0].future.shape == (3, 2)
    np.testing.assert_array_equal(s.scene_attr, [0, 2])


def test_ingest_drops_short_history(tmp_path):
    rows = track_rows("s1", "a", 8) + track_rows("s1", "b", 4, x0=5.0)
    write_tracks(tmp_path / "t.csv", rows)
    rep = ingest_csv(tmp_path / "t.csv", past_steps=5, future_steps=3)
    assert rep.dropped_agents == {"s1": 1}
    assert [a.agent_id for a in rep.scenarios[0].agents] == ["a"]


def test_ingest_ignores_row_order(tmp_path):
    rows = track_rows("s1", "a", 8) + track_rows("s1", "b", 8, 1, 3.0) + track_rows("s0", "c", 6)
    write_tracks(tmp_path / "sorted.csv", rows)
    shuffled = [rows[i] for i in np.random.default_rng(0).permutation(len(rows))]
    write_tracks(tmp_path / "shuffled.csv", shuffled)
    a = ingest_csv(tmp_path / "sorted.csv", past_steps=5, future_steps=3).scenarios
    b = ingest_csv(tmp_path / "shuffled.csv", past_steps=5, future_steps=3).scenarios
    assert a == b and [s.scenario_id for s in a] == ["s0", "s1"]
    assert a[0].agents[0].future is None          # 6 rows: enough history, no full future


def test_ingest_column_map_and_errors(tmp_path):
    rows = track_rows("s1", "a", 6)
    write_tracks(tmp_path / "t.csv", rows, header="sid,agent_id,timestep,px,y,semantic")
    with pytest.raises(ValueError, match="missing required column"):
        ingest_csv(tmp_path / "t.csv", past_steps=5, future_steps=1)
    cmap = parse_column_map("scenario_id=sid, x=px")
    assert cmap == {"scenario_id": "sid", "x": "px"}
    assert len(ingest_csv(tmp_path / "t.csv", column_map=cmap, past_steps=5, future_steps=1).scenarios) == 1
    write_tracks(tmp_path / "dup.csv", rows + [("s1", "a", 2, 9.0, 9.0, 0)])
    with pytest.raises(ValueError, match="not strictly increasing"):
        ingest_csv(tmp_path / "dup.csv", past_steps=5, future_steps=1)
    with pytest.raises(ValueError):
        parse_column_map("x")
