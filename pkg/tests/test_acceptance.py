"""Acceptance suite: one PASS/FAIL line per criterion.

The trained criteria (pivot, CVAE, end to end, determinism) share two full
pipeline runs under master seed 0. Set OCCGRASP_ACCEPT_RUN to a finished run
directory to reuse it as the first run; the second run is always fresh.
Run with ``pytest tests/test_acceptance.py -s`` to see lines as they happen;
they are also repeated in the terminal summary.
"""
import csv
import filecmp
import math
import os
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from occgrasp import pipeline, sim
from occgrasp.config import load_config
from occgrasp.cvae import SKILL_PIVOT, SKILL_PUSH, CvaeModel, decode, elbo_loss, gaussian_kl, monte_carlo_kl, \
    push_start_state
from occgrasp.geometry import (
    PIVOT_THRESHOLD,
    PUSH_THRESHOLD,
    compute_goal,
    pivot_complete,
    push_complete,
    trace_rotation_distance,
    wrap_angle,
)
from occgrasp.harness import make_scenario
from occgrasp.high import GRASP, PIVOT, PUSH, create_qnet, high_reward
from occgrasp.neural import backward, forward, gradient_check
from occgrasp.sim import Contact, Scenario
from occgrasp.skills import (
    GRASP_ACTION,
    SKILL_HORIZON,
    PivotPolicy,
    SkillObs,
    actor_loss_grad,
    evaluate_pivot,
    push_act,
    randomize_obs,
)

REPORT = []
MASTER = 0


def report(n, ok, detail):
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    REPORT.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- 1

# (action, v_pivot, v_push) -> penalized; hand-derived from the reward terms
PENALIZED = {
    (PIVOT, 0, 0): True, (PIVOT, 0, 1): False, (PIVOT, 1, 0): True, (PIVOT, 1, 1): True,
    (PUSH, 0, 0): False, (PUSH, 0, 1): True, (PUSH, 1, 0): False, (PUSH, 1, 1): True,
    (GRASP, 0, 0): True, (GRASP, 0, 1): True, (GRASP, 1, 0): True, (GRASP, 1, 1): False,
}


def test_c01_reward_truth_table():
    t0 = time.perf_counter()
    goal = (0.0, 0.2, 0.05)
    obj = (0.0, 0.22, 0.05)           # 0.02 m from the goal, upright: bonus applies
    bad = []
    for (a, vp, vq), pen in PENALIZED.items():
        for grasped in (False, True):
            want = -0.02 + 0.05 + (-30.0 if pen else 0.0) + (1.05 if grasped else 0.0)
            got = high_reward(obj, goal, 0.0, a, vp, vq, grasped)
            if abs(got - want) > 1e-12:
                bad.append((a, vp, vq, grasped, got, want))
    thr = [pivot_complete(10 * math.pi / 180), not pivot_complete(10 * math.pi / 180 + 1e-12),
           push_complete((0, 0.0299, 0), (0, 0, 0)), not push_complete((0, 0.03, 0), (0, 0, 0)),
           PIVOT_THRESHOLD == 10 * math.pi / 180, PUSH_THRESHOLD == 0.03]
    # no bonus when the object lies flat
    flat = high_reward(obj, goal, math.pi / 2, PUSH, 0, 0, False)
    thr.append(abs(flat - -0.02) < 1e-12)
    dt = time.perf_counter() - t0
    ok = not bad and all(thr) and dt < 1.0
    assert report(1, ok, f"{24 - len(bad)}/24 combinations exact, thresholds ok={all(thr)}, {dt:.3f} s"), bad


# ---------------------------------------------------------------- 2

def test_c02_rotation_distance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    a = rng.uniform(-math.pi, math.pi, 100_000)
    b = rng.uniform(-math.pi, math.pi, 100_000)
    err = max(abs(trace_rotation_distance(x, y) - abs(wrap_angle(y - x))) for x, y in zip(a, b))
    dt = time.perf_counter() - t0
    assert report(2, err <= 1e-9 and dt < 5, f"max |trace - |wrap|| = {err:.2e} over 1e5 pairs, {dt:.2f} s")


# ---------------------------------------------------------------- 3

def _mse(net, x, y):
    def f(p):
        saved = net.params.copy()
        net.set_params(p)
        try:
            out, tape = forward(net, x)
            err = out - y
            return float(np.mean(err ** 2)), backward(net, tape, 2 * err / err.size)
        finally:
            net.set_params(saved)
    return f


def test_c03_gradients_on_deployed_shapes():
    t0 = time.perf_counter()
    cfg = load_config()
    rng = np.random.default_rng(3)
    pol = PivotPolicy.create(cfg.sac.hidden, seed=1)
    model = CvaeModel.create(cfg.sim.n_points, cfg.cvae.latent_dim, cfg.cvae.hidden, cfg.cvae.dropout, seed=2)
    nets = {"actor": pol.actor, "critic": pol.critics[0], "cvae encoder": model.encoder,
            "cvae decoder": model.decoder, "q-network": create_qnet(cfg.dqn.hidden, seed=3)}
    worst = {}
    for name, net in nets.items():
        x = rng.normal(size=(4, net.layer_widths[0]))
        y = rng.normal(size=(4, net.layer_widths[-1]))
        _, worst[name] = gradient_check(_mse(net, x, y), net.params.copy(), n_coords=40)
    # composite losses: actor objective through the critics, and the ELBO
    obs, clean = rng.normal(size=(8, 12)), rng.normal(size=(8, 12))

    def actor_obj(p):
        saved = pol.actor.params.copy()
        pol.actor.set_params(p)
        try:
            loss, g, _ = actor_loss_grad(pol.actor, *pol.critics, obs, clean, 0.2, np.random.default_rng(5))
            return loss, g
        finally:
            pol.actor.set_params(saved)
    _, worst["actor objective"] = gradient_check(actor_obj, pol.actor.params.copy(), n_coords=40)
    clouds = rng.normal(scale=0.05, size=(4, cfg.sim.n_points, 3))
    batch = (clouds, np.array([0, 1, 0, 1]), clouds.mean(axis=1) + 0.01)

    def elbo(p):
        saved = model.decoder.params.copy()
        model.decoder.set_params(p)
        try:
            r = elbo_loss(model, batch, seed=6, mode="eval")
            return r.loss, r.dec_grad
        finally:
            model.decoder.set_params(saved)
    _, worst["elbo (decoder)"] = gradient_check(elbo, model.decoder.params.copy(), n_coords=40)
    dt = time.perf_counter() - t0
    top = max(worst.values())
    ok = top <= 1e-4 and dt < 30
    assert report(3, ok, f"max relative error {top:.1e} over {len(worst)} checks, {dt:.1f} s"), worst


# ---------------------------------------------------------------- 4

def test_c04_kl_against_sampling():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        mu = rng.normal(size=8)
        sigma = rng.uniform(0.3, 2.0, size=8)
        exact = float(gaussian_kl(mu, 2 * np.log(sigma)))
        mc = monte_carlo_kl(mu, sigma, 100_000, seed=i)
        worst = max(worst, abs(mc - exact) / exact)
    dt = time.perf_counter() - t0
    assert report(4, worst <= 0.01 and dt < 30, f"max relative gap {100 * worst:.2f}% over 100 cases, {dt:.1f} s")


# ---------------------------------------------------------------- 5

def test_c05_physics_oracles():
    t0 = time.perf_counter()
    sc = Scenario()
    rng = np.random.default_rng(5)
    # interpenetration under random commands
    depth = 0.0
    steps = 0
    while steps < 10_000:
        s = sim.place_contact(sc, sim.reset(sc, steps),
                              Contact("far", -sc.shape.size_x, float(rng.uniform(0, sc.shape.size_z)), 0.0))
        for _ in range(100):
            s, _ = sim.step_eef(sc, s, rng.uniform(-sim.V_MAX, sim.V_MAX, 3))
            depth = max(depth, sim.penetration_depth(sc, s))
            steps += 1
    # pure tangential command: angle grows at v / rho
    c = Contact("far", -sc.shape.size_x, 0.01, 0.0)
    s = sim.place_contact(sc, sim.reset(sc, 0), c)
    v, n = 0.02, 200
    for _ in range(n):
        jx, jz = sim.arc_jacobian(s.object_pose.theta, c.a, c.b)
        rho = math.hypot(jx, jz)
        s, _ = sim.step_eef(sc, s, [v * jx / rho, 0.0, v * jz / rho])
    angle_err = abs(s.object_pose.theta - v / rho * n * sc.dt)
    # quasi-static rest: with the fingertip clear, nothing moves
    rest_ok = True
    for theta in (0.0, math.pi / 2):
        st = sim.reset(sc, 1)
        st = replace(st, object_pose=sim.object_pose_from(sc, theta, st.object_pose.y))
        before = st.object_pose
        for _ in range(200):
            st, w = sim.step_eef(sc, st, [0.0, 0.0, 0.0])
        rest_ok &= st.object_pose == before and not w.as_vector().any()
    dt = time.perf_counter() - t0
    ok = depth <= 1e-6 and angle_err <= 1e-3 and rest_ok and dt < 120
    assert report(5, ok, f"max penetration {depth:.1e} m over {steps} steps, tangential angle error "
                         f"{angle_err:.1e} rad, rest invariant={rest_ok}, {dt:.1f} s")


# ---------------------------------------------------------------- 6

def test_c06_skill_constants_and_noise():
    t0 = time.perf_counter()
    exact = push_act() == (0.0, -0.005, 0.0) and GRASP_ACTION == (0.0, 0.0, -0.01)
    zero = SkillObs((0.0,) * 3, (0.0,) * 3, (0.0,) * 6)
    rng = np.random.default_rng(6)
    draws = np.array([randomize_obs(zero, rng).as_vector() for _ in range(100_000 // 12 + 1)]).ravel()[:100_000]
    var = float(np.var(draws))
    sc = make_scenario("nominal", 0.2)
    st = sim.reset(sc, 0)
    noise = []
    for i in range(100_000 // 192 + 1):
        clean = sim.render_point_cloud(sc, st, 64, 0.0, i).points
        noisy = sim.render_point_cloud(sc, st, 64, 0.003, i).points
        noise.append((noisy - clean).ravel())
    std = float(np.std(np.concatenate(noise)[:100_000]))
    dt = time.perf_counter() - t0
    ok = exact and abs(var - 0.2) <= 0.01 and abs(std - 0.003) <= 0.00015 and dt < 60
    assert report(6, ok, f"constants bit-exact={exact}, randomization variance {var:.4f}, "
                         f"cloud noise std {std:.5f}, {dt:.1f} s")


# ---------------------------------------------------------------- 9

def test_c09_dqn_matches_oracle():
    cfg = load_config()
    t0 = time.perf_counter()
    frac, bad, _ = pipeline.oracle_check(cfg, 5)
    dt = time.perf_counter() - t0
    cfg.dqn_section.penalty_rule = "prose"
    frac_p, _, _ = pipeline.oracle_check(cfg, 5)
    ok = frac == 1.0 and dt <= 600
    assert report(9, ok, f"agreement {100 * frac:.1f}% of reachable states (k_max 5, default rule), "
                         f"{dt:.1f} s; relaxed rule {100 * frac_p:.1f}%"), bad


# ---------------------------------------------------------------- trained runs

ARTIFACTS = (pipeline.PIVOT_FILE, pipeline.CONTACTS_FILE, pipeline.CVAE_FILE, pipeline.HIGH_FILE)


def _timed_run(out: Path) -> dict:
    cfg = load_config(out_dir=str(out))
    times = {}
    for name, fn in (("pivot", pipeline.stage_pivot), ("collect", pipeline.stage_collect),
                     ("cvae", pipeline.stage_cvae), ("high", pipeline.stage_high), ("eval", pipeline.stage_eval)):
        t0 = time.perf_counter()
        fn(cfg, MASTER)
        times[name] = time.perf_counter() - t0
    return times


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    reuse = os.environ.get("OCCGRASP_ACCEPT_RUN")
    if reuse and all((Path(reuse) / f).exists() for f in ARTIFACTS + ("eval.csv",)):
        first = Path(reuse)
    else:
        first = base / "run1"
        _timed_run(first)
    second = base / "run2"
    times = _timed_run(second)
    return first, second, times


def _matrix(path):
    with open(path) as fh:
        return {(r["object"], float(r["wall_length"])): r for r in csv.DictReader(fh)}


@pytest.mark.slow
def test_c07_pivot_skill(runs):
    first, _, times = runs
    pol = PivotPolicy.load(first / pipeline.PIVOT_FILE)
    cfg = load_config()
    sc = make_scenario("nominal", 0.2)
    rate, _ = evaluate_pivot(pol, 50, seed=7, scenario=sc)
    ok = rate >= 0.8 and cfg.sac.total_env_steps <= 200_000 and times["pivot"] <= 1800
    assert report(7, ok, f"pivot success {100 * rate:.0f}% over 50 episodes (horizon {SKILL_HORIZON} steps), "
                         f"{cfg.sac.total_env_steps} env steps, {times['pivot'] / 60:.1f} min")


@pytest.mark.slow
def test_c08_cvae(runs):
    first, _, times = runs
    model = CvaeModel.load(first / pipeline.CVAE_FILE)
    with open(first / "cvae_metrics.csv") as fh:
        dist = float(list(csv.DictReader(fh))[-1]["heldout_distance"])
    rng = np.random.default_rng(8)
    sc = make_scenario("nominal", 0.2)
    st = sim.reset(sc, 0)
    cloud = sim.render_point_cloud(sc, st, model.n_points, 0.003, 1)
    piv = decode(model, cloud, SKILL_PIVOT, rng.standard_normal((1000, model.latent_dim)))
    midline = sc.shape.size_z / 2
    goal = compute_goal(sc.wall, sc.shape, sc.gripper)
    up = push_start_state(sc, float(goal[1] + 0.06))
    cloud_u = sim.render_point_cloud(sc, up, model.n_points, 0.003, 2)
    push = decode(model, cloud_u, SKILL_PUSH, rng.standard_normal((1000, model.latent_dim)))
    median_y = float(np.median(cloud_u.points[:, 1]))
    t = times["collect"] + times["cvae"]
    ok = dist <= 0.01 and piv[:, 2].mean() < midline and push[:, 1].mean() > median_y and t <= 1200
    assert report(8, ok, f"held-out distance {dist:.4f} m; pivot mean z {piv[:, 2].mean():.4f} < {midline:.4f}; "
                         f"push mean y {push[:, 1].mean():.4f} > median {median_y:.4f}; "
                         f"collect+train {t / 60:.1f} min")


def _e2e_summary(m):
    nominal = [m[("nominal", l)] for l in (0.1, 0.2, 0.3, 0.4)]
    rates = [float(r["success_rate"]) for r in nominal]
    pushes = [float(r["mean_push"]) for r in nominal]
    unseen = {o: float(r["success_rate"]) for (o, _), r in m.items() if o != "nominal"}
    ok = (min(rates) >= 0.9 and all(b >= a for a, b in zip(pushes, pushes[1:]))
          and len(unseen) == 5 and min(unseen.values()) >= 0.7)
    text = (f"nominal success {[round(r, 2) for r in rates]}, mean pushes {[round(p, 2) for p in pushes]}, "
            f"unseen {dict((k, round(v, 2)) for k, v in unseen.items())}")
    return ok, text


@pytest.mark.slow
def test_c10_end_to_end(runs):
    first, _, times = runs
    ok, text = _e2e_summary(_matrix(first / "eval.csv"))
    ok = ok and times["eval"] <= 1200
    report(10, ok, f"default rule: {text}; eval {times['eval'] / 60:.1f} min")
    # same frozen skills, selector retrained under the relaxed penalty rule;
    # reported for comparison only
    alt = Path(str(first) + "_relaxed")
    shutil.rmtree(alt, ignore_errors=True)
    alt.mkdir(parents=True)
    for f in (pipeline.PIVOT_FILE, pipeline.CVAE_FILE):
        shutil.copy(first / f, alt / f)
    cfg = load_config(out_dir=str(alt))
    cfg.dqn_section.penalty_rule = "prose"
    pipeline.stage_high(cfg, MASTER)
    pipeline.stage_eval(cfg, MASTER)
    alt_ok, alt_text = _e2e_summary(_matrix(alt / "eval.csv"))
    REPORT.append(f"   relaxed rule (informational, {'meets' if alt_ok else 'misses'} the targets): {alt_text}")
    print(REPORT[-1])
    assert ok


@pytest.mark.slow
def test_c11_determinism(runs):
    first, second, _ = runs
    names = list(ARTIFACTS) + ["eval.csv", "pivot_metrics.csv", "cvae_metrics.csv", "high_log.csv"]
    traces = sorted(p.name for p in (first / "traces").glob("*.jsonl"))
    diff = [n for n in names if not filecmp.cmp(first / n, second / n, shallow=False)]
    diff += [t for t in traces if not filecmp.cmp(first / "traces" / t, second / "traces" / t, shallow=False)]
    same_set = traces == sorted(p.name for p in (second / "traces").glob("*.jsonl"))
    ok = not diff and same_set and len(traces) > 0
    assert report(11, ok, f"{len(names)} artifacts and {len(traces)} traces compared, "
                          f"{len(diff)} differ"), diff[:10]
