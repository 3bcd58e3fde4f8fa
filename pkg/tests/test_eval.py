import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from signnav.evaluation import (DIFFICULTY_RANGES, EpisodeResult, EvalResult, ScriptedAgent, TrialConfig,
                                ablation_to_csv, compute_spl, compute_sr, episodes_from_csv, episodes_to_csv,
                                evaluate_policy, generate_episode_set, held_action_collides, results_to_csv,
                                run_safety_trials)
from signnav.shield import CollisionPredictor, Shield
from signnav.world import Action, EpisodeSpec, geodesic_distance, get_world, make_world, start_state


# -- SPL ---------------------------------------------------------------------

def test_spl_examples():
    assert compute_spl([(1, 3.0, 3.0)]) == 1.0
    assert compute_spl([(0, 3.0, 3.0)]) == 0.0
    assert compute_spl([(1, 4.0, 2.0), (0, 1.0, 2.0)]) == 0.25
    assert compute_spl([(1, 1.0, 2.0)]) == 1.0  # p < L is capped by max()


def test_spl_rejects_nonpositive_length():
    with pytest.raises(ValueError):
        compute_spl([(1, 1.0, 0.0)])


def test_spl_never_exceeds_sr_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        s = rng.integers(0, 2, n)
        length = rng.uniform(0.1, 10, n)
        p = rng.uniform(0, 20, n)
        assert compute_spl(zip(s, p, length)) <= compute_sr(s) + 1e-15


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 50), st.floats(0.01, 20)), min_size=1, max_size=20))
def test_spl_bounded_by_sr(rows):
    spl = compute_spl(rows)
    assert 0.0 <= spl <= compute_sr(s for s, _, _ in rows) + 1e-12


def test_eval_result_aggregates():
    r = EvalResult([EpisodeResult(1, 2.0, 2.0, 10, 2), EpisodeResult(0, 5.0, 2.0, 30, 0)])
    assert r.sr == 0.5 and r.spl == 0.5
    assert r.correction_rate == pytest.approx(2 / 40)
    assert results_to_csv(r).splitlines()[0].startswith("episode,success")


# -- episode sets ------------------------------------------------------------

def test_episode_set_is_deterministic():
    a = generate_episode_set(10, "easy", 1)
    assert a == generate_episode_set(10, "easy", 1)
    assert a != generate_episode_set(10, "easy", 2)


@pytest.mark.parametrize("difficulty", ["easy", "medium", "hard"])
def test_episode_lengths_in_range_and_match_geodesic(difficulty):
    lo, hi = DIFFICULTY_RANGES[difficulty]
    for ep in generate_episode_set(6, difficulty, 5, world_seeds=(1000, 1001, 1002)):
        world = get_world(ep.world_seed, ep.profile)
        assert lo <= ep.optimal_length < hi
        assert abs(geodesic_distance(ep.start[:2], ep.goal[:2], world) - ep.optimal_length) < 1e-9
        assert world.is_free(*ep.start[:2]) and world.is_free(*ep.goal[:2])


def test_episode_set_validation():
    with pytest.raises(ValueError):
        generate_episode_set(0)
    with pytest.raises(ValueError):
        generate_episode_set(3, "extreme")


def test_episode_csv_round_trip():
    eps = generate_episode_set(5, "easy", 3)
    text = episodes_to_csv(eps)
    assert episodes_from_csv(text) == eps
    assert episodes_to_csv(episodes_from_csv(text)) == text


# -- evaluation --------------------------------------------------------------

CORRIDOR = make_world((0.0, 0.0, 8.0, 2.0), seed=0, profile="corridor")


def corridor_episode(start_x, goal_x):
    length = geodesic_distance((start_x, 1.05), (goal_x, 1.05), CORRIDOR)
    return EpisodeSpec(0, "corridor", (start_x, 1.05, 0.0), (goal_x, 1.05, 0.0), "easy", length)


def test_immediate_stop_inside_success_region():
    ep = corridor_episode(3.55, 4.05)
    res = evaluate_policy(ScriptedAgent([np.zeros((0, 2))]), [ep], world=CORRIDOR)
    e = res.episodes[0]
    assert e.success == 1 and e.steps == 1 and e.path_length == 0.0
    assert res.spl == 1.0


def test_never_stopping_policy_times_out():
    ep = corridor_episode(1.05, 4.05)
    spin = np.tile([-1.0, 1.0], (60, 1))
    res = evaluate_policy(ScriptedAgent([spin]), [ep], max_steps=50, world=CORRIDOR)
    assert res.episodes[0].success == 0 and res.episodes[0].steps == 50


def test_scripted_corridor_run_is_near_optimal():
    eps = [corridor_episode(1.05, 4.05), corridor_episode(2.05, 6.05)]
    # full speed straight ahead until 0.1 m short of the goal, then stop
    scripts = [np.tile([1.0, 0.0], (int(round((ep.goal[0] - ep.start[0] - 0.1) / 0.025)), 1)) for ep in eps]
    agent = ScriptedAgent(scripts)
    res = evaluate_policy(agent, eps, world=CORRIDOR)
    assert res.sr == 1.0
    assert res.spl > 0.9


def test_disconnected_episode_is_skipped():
    ep = EpisodeSpec(0, "corridor", (1.05, 1.05, 0.0), (4.05, 1.05, 0.0), "easy", math.inf)
    res = evaluate_policy(ScriptedAgent([np.zeros((0, 2))]), [ep], world=CORRIDOR)
    assert res.skipped == [0] and res.episodes == []


def test_policy_evaluation_is_deterministic():
    torch.manual_seed(0)
    from signnav.policy import NavPolicy
    policy = NavPolicy()
    eps = generate_episode_set(3, "easy", 9)
    a = results_to_csv(evaluate_policy(policy, eps, max_steps=20))
    b = results_to_csv(evaluate_policy(policy, eps, max_steps=20))
    assert a == b


def test_ablation_csv_header():
    row = {"variant": "sign", "seed": 0, "env_steps": 10, "train_sr": 0.5, "sr": 0.25, "spl": 0.2}
    assert ablation_to_csv([row]) == "variant,seed,env_steps,train_sr,sr,spl\nsign,0,10,0.5,0.25,0.2\n"


# -- safety trials -----------------------------------------------------------

def never_unsafe():
    qc = CollisionPredictor()
    with torch.no_grad():
        for p in qc.parameters():
            p.zero_()
        qc.net[-1].bias.fill_(-20.0)
    return Shield(qc)


def test_obstacle_free_pair_always_succeeds_without_corrections():
    world = make_world((0.0, 0.0, 10.0, 10.0), seed=0)
    report = run_safety_trials(world, [((1.0, 5.0), (9.0, 5.0))], never_unsafe(), TrialConfig(trials_per_pair=3))
    agg = report.aggregate()
    assert agg["sr"] == 1.0 and agg["correction_rate"] == 0.0 and agg["collisions"] == 0


def test_pole_on_the_line_is_hit_without_shield():
    world = make_world((0.0, 0.0, 10.0, 10.0), circles=[(5.0, 5.0, 0.3)], seed=0)
    cfg = TrialConfig(trials_per_pair=2, position_jitter=0.0, heading_jitter=0.0, yaw_noise=0.0)
    report = run_safety_trials(world, [((1.0, 5.0), (9.0, 5.0))], None, cfg)
    assert report.aggregate()["collisions"] == 2 and report.aggregate()["sr"] == 0.0


def test_trials_are_reproducible_and_csv_has_aggregate_row():
    world = get_world(7, "poles")
    pairs = [((1.0, 2.5), (9.0, 7.5))]
    cfg = TrialConfig(trials_per_pair=2)
    a = run_safety_trials(world, pairs, None, cfg).to_csv()
    assert a == run_safety_trials(world, pairs, None, cfg).to_csv()
    assert a.strip().splitlines()[-1].startswith("all,")


def test_held_action_probe():
    world = make_world((0.0, 0.0, 10.0, 10.0), circles=[(5.0, 5.0, 0.3)], seed=0)
    s = start_state((4.0, 5.0, 0.0))
    assert held_action_collides(s, Action(0.25, 0.0), world, 40)
    assert not held_action_collides(s, Action(0.25, 0.0), world, 10)
