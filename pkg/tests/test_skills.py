import math
from dataclasses import replace

import numpy as np
import pytest

from occgrasp import sim, skills
from occgrasp.geometry import ObjectShape, compute_goal
from occgrasp.neural import Mlp, gradient_check
from occgrasp.sim import Contact, Scenario
from occgrasp.skills import (
    GRASP_ACTION,
    PUSH_ACTION,
    PivotPolicy,
    SacConfig,
    SkillObs,
    evaluate_pivot,
    grasp_execute,
    pivot_act,
    pivot_reward,
    plan_approach,
    push_act,
    randomize_obs,
    skill_obs,
    train_pivot,
)


@pytest.mark.parametrize("d, want", [(math.pi / 2, 0.0), (0.0, math.pi / 2), (math.pi / 4, math.pi / 4)])
def test_pivot_reward(d, want):
    assert pivot_reward(d) == pytest.approx(want)


def test_skill_obs_layout():
    sc = Scenario()
    o = skill_obs(sim.reset(sc, 0))
    v = o.as_vector()
    assert v.shape == (12,)
    assert SkillObs.from_vector(v) == o
    with pytest.raises(ValueError):
        SkillObs.from_vector(np.zeros(5))


def test_randomize_obs():
    o = SkillObs((0.1, 0.2, 0.3), (0.0, 0.0, 0.0), (1.0, 0.0, 2.0, 0.0, 0.5, 0.0))
    assert randomize_obs(o, 5) == randomize_obs(o, 5)
    assert randomize_obs(o, 5, enabled=False) == o
    assert randomize_obs(o, 5) != o


def test_pivot_act_bounded_and_deterministic():
    pol = PivotPolicy.create(hidden=32, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(50):
        obs = rng.normal(scale=5.0, size=12)
        a = pivot_act(pol, obs)
        assert np.all(np.abs(a) <= sim.V_MAX)
        assert np.array_equal(a, pivot_act(pol, obs))
        s = pivot_act(pol, obs, "stochastic", np.random.default_rng(1))
        assert np.all(np.abs(s) <= sim.V_MAX)


def test_zero_actor_gives_zero_action():
    pol = PivotPolicy.create(hidden=8)
    pol.actor.set_params(np.zeros_like(pol.actor.params))
    assert not pivot_act(pol, np.ones(12)).any()


def test_policy_checkpoint_roundtrip(tmp_path):
    pol = PivotPolicy.create(hidden=8, seed=2)
    pol.entropy_temperature = 0.123
    pol.save(tmp_path / "p.bin")
    back = PivotPolicy.load(tmp_path / "p.bin")
    assert back.to_bytes() == pol.to_bytes()
    with pytest.raises(ValueError):
        PivotPolicy.from_bytes(b"x" * 40)


def test_scripted_constants():
    assert push_act() == (0.0, -0.005, 0.0) == PUSH_ACTION
    assert push_act() == push_act()
    assert max(abs(c) for c in push_act()) <= sim.V_MAX
    assert GRASP_ACTION == (0.0, 0.0, -0.01)


def test_plan_approach():
    assert len(plan_approach((0.1, 0.2, 0.3), (0.1, 0.2, 0.3))) == 1
    pts = plan_approach((0, 0, 0), (0.1, 0, 0), 0.01)
    assert len(pts) == 11
    assert np.array_equal(pts[-1], [0.1, 0, 0])
    assert np.allclose(np.diff(np.array(pts), axis=0), [0.01, 0, 0])
    with pytest.raises(ValueError):
        plan_approach((0, 0, 0), (1, 0, 0), 0.0)


def _at(sc, theta, y):
    return replace(sim.reset(sc, 0), object_pose=sim.object_pose_from(sc, theta, y))


def test_grasp_outcomes():
    sc = Scenario()
    goal = compute_goal(sc.wall, sc.shape, sc.gripper)
    ok, st, path = grasp_execute(sc, _at(sc, math.pi / 2, goal[1]))
    assert ok
    dz = np.diff(np.array(path)[:, 2])
    assert np.allclose(dz[:-1], GRASP_ACTION[2] * sc.dt * skills.CONTROL_SUBSTEPS)
    assert not grasp_execute(sc, _at(sc, 0.0, goal[1]))[0]
    behind = sc.wall.end_y + sc.shape.size_y / 2
    assert not grasp_execute(sc, _at(sc, math.pi / 2, behind))[0]


def test_grasp_too_thick_for_gripper():
    sc = Scenario(shape=ObjectShape("box", 0.1, 0.1, 0.079))
    goal = compute_goal(sc.wall, sc.shape, sc.gripper)
    assert not grasp_execute(sc, _at(sc, math.pi / 2, goal[1]))[0]


def test_approach_stops_at_first_contact():
    sc = Scenario()
    st = sim.reset(sc, 0)
    touch = sim.place_contact(sc, st, Contact("far", -sc.shape.size_x, 0.01, 0.0))
    st2, path = skills.approach(sc, st, touch.eef_pose.position, 0)
    assert st2.contact is not None and st2.contact.face == "far"
    assert np.linalg.norm(np.diff(np.array(path), axis=0), axis=1).max() <= skills.APPROACH_STEP + 1e-12


def test_run_push_completes_from_upright():
    sc = Scenario()
    goal = compute_goal(sc.wall, sc.shape, sc.gripper)
    st = _at(sc, math.pi / 2, goal[1] + 0.08)
    p = st.object_pose
    a, b = sim.world_to_body(sc, p.theta, p.x, 0.02)
    st = sim.place_contact(sc, st, Contact("+y", a, b, sc.shape.size_y / 2))
    st, outcome, n = skills.run_push(sc, st, goal)
    assert outcome == "complete"
    assert 0.05 / (0.005 * 0.1) - 2 <= n <= 0.05 / (0.005 * 0.1) + 2


def test_sac_config_validation():
    with pytest.raises(ValueError):
        SacConfig(batch_size=10, replay_capacity=5)


def test_actor_gradient_matches_finite_differences():
    pol = PivotPolicy.create(hidden=16, seed=4)
    rng = np.random.default_rng(0)
    obs = rng.normal(size=(8, 12))
    clean = rng.normal(size=(8, 12))

    def f(p):
        a = Mlp(pol.actor.layer_widths, pol.actor.activations, params=p)
        loss, grad, _ = skills.actor_loss_grad(a, *pol.critics, obs, clean, 0.3, np.random.default_rng(7))
        return loss, grad
    ok, err = gradient_check(f, pol.actor.params, n_coords=60)
    assert ok, err


def tiny_cfg(**kw):
    base = dict(batch_size=64, replay_capacity=2000, total_env_steps=600, warmup_steps=200,
                eval_interval=300, eval_episodes=2, hidden=16, steps_per_update=4, seed=3)
    base.update(kw)
    return SacConfig(**base)


def test_zero_learning_rate_leaves_policy_unchanged(tmp_path):
    cfg = tiny_cfg(learning_rate=0.0)
    init = PivotPolicy.create(cfg.hidden, seed=cfg.seed)
    pol = train_pivot(cfg, metrics_path=tmp_path / "m.csv")
    assert np.array_equal(pol.actor.params, init.actor.params)
    assert evaluate_pivot(pol, 3, seed=1) == evaluate_pivot(init, 3, seed=1)
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "step,eval_return,success_rate" and len(rows) == 4


def test_training_is_deterministic():
    a = train_pivot(tiny_cfg())
    b = train_pivot(tiny_cfg())
    assert a.to_bytes() == b.to_bytes()
