import math
from dataclasses import replace

from signnav.plots import emit_plots, qc_color, read_stats_csv, trajectory_svg, training_svg
from signnav.trainer import STATS_COLUMNS, stats_to_csv
from signnav.world import TRAJECTORY_COLUMNS, Action, TrajectoryLog, make_world, start_state


def sample_log(n=7):
    log = TrajectoryLog()
    s = start_state((1.0, 1.0, 0.0))
    for t in range(n):
        s = replace(s, x=s.x + 0.1, time_step=t + 1)
        log.record(s, Action(0.25, 0.0), -0.01, 0, 0.1 * t, t % 2 == 0, False)
    return log


def test_empty_stats_give_header_only(tmp_path):
    emit_plots(tmp_path, stats=[])
    assert (tmp_path / "training.csv").read_text() == ",".join(STATS_COLUMNS) + "\n"
    assert (tmp_path / "training.svg").read_text().startswith("<svg")


def test_empty_trajectory_gives_header_only(tmp_path):
    world = make_world((0, 0, 4, 4), seed=0)
    emit_plots(tmp_path, trajectories=[(world, TrajectoryLog(), (1, 1), (3, 3))])
    assert (tmp_path / "trajectory_000.csv").read_text() == ",".join(TRAJECTORY_COLUMNS) + "\n"
    assert 'class="waypoint"' not in (tmp_path / "trajectory_000.svg").read_text()


def test_outputs_are_deterministic(tmp_path):
    world = make_world((0, 0, 4, 4), circles=[(2, 2, 0.3)], boxes=[(3, 0, 3.5, 1)], seed=0)
    stats = [{"update": i, "env_steps": 100 * i, "success_rate": 0.1 * i, "mean_reward": -0.01} for i in range(1, 4)]
    a = emit_plots(tmp_path / "a", stats, [(world, sample_log(), (1, 1), (3, 3))])
    b = emit_plots(tmp_path / "b", stats, [(world, sample_log(), (1, 1), (3, 3))])
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_one_marker_per_logged_step():
    world = make_world((0, 0, 4, 4), circles=[(2, 2, 0.3)], seed=0)
    svg = trajectory_svg(world, sample_log(11), (1, 1), (3, 3))
    assert svg.count('class="waypoint"') == 11
    assert svg.count('class="obstacle"') == 1
    assert svg.count('class="start"') == 1 and svg.count('class="goal"') == 1


def test_qc_colors():
    assert qc_color(0.0) == "#0040ff"
    assert qc_color(1.0) == "#ff4000"
    assert qc_color(math.nan) == "#808080"


def test_stats_round_trip():
    rows = [{c: (i if c in ("update", "env_steps", "episodes") else 0.5 * i) for c in STATS_COLUMNS}
            for i in range(3)]
    assert stats_to_csv(read_stats_csv(stats_to_csv(rows))) == stats_to_csv(rows)


def test_training_svg_handles_flat_and_missing_curves():
    rows = [{"env_steps": 1, "success_rate": 0.5}, {"env_steps": 2, "success_rate": 0.5}]
    svg = training_svg(rows)
    assert svg.count("<polyline") == 1
