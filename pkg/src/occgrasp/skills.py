"""Low-level skills: a SAC-trained pivot, scripted push and grasp, and the
straight-line approach planner that brings the fingertip to a contact.

One skill step holds a velocity command for ``CONTROL_SUBSTEPS`` simulator
steps (0.1 s at the default ``dt``).
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import sim
from .geometry import (
    ObjectShape,
    PlanarPose,
    WallConfig,
    pivot_complete,
    push_complete,
    rotation_distance,
)
from .neural import (
    Adam,
    Mlp,
    NumericalError,
    backward,
    backward_full,
    clip_global_norm,
    forward,
    mlp_from_bytes,
    mlp_to_bytes,
    soft_update,
)
from .sim import V_MAX, Contact, Scenario, SimState

log = logging.getLogger(__name__)

PUSH_ACTION = (0.0, -0.005, 0.0)
GRASP_ACTION = (0.0, 0.0, -0.01)
CONTROL_SUBSTEPS = 10
SKILL_HORIZON = 200
PIVOT_EPISODE_STEPS = 400
OBS_DIM = 12
ACT_DIM = 3
LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
APPROACH_STANDOFF = 0.03
APPROACH_STEP = 0.01
SAFE_CLEARANCE = 0.05


# ---------------------------------------------------------------- observations

@dataclass(frozen=True)
class SkillObs:
    eef_position: tuple
    eef_orientation: tuple
    external_wrench: tuple

    def as_vector(self) -> np.ndarray:
        return np.array(self.eef_position + self.eef_orientation + self.external_wrench, dtype=float)

    @classmethod
    def from_vector(cls, v) -> "SkillObs":
        v = [float(c) for c in v]
        if len(v) != OBS_DIM:
            raise ValueError("skill observation has 12 components")
        return cls(tuple(v[:3]), tuple(v[3:6]), tuple(v[6:]))


def skill_obs(state: SimState) -> SkillObs:
    e = state.eef_pose
    # the fingertip never rotates, so its orientation is the zero Euler triple
    return SkillObs((e.x, e.y, e.z), (0.0, 0.0, 0.0), tuple(sim.external_wrench(state).as_vector()))


def pivot_reward(d: float) -> float:
    return math.pi / 2 - d


def randomize_obs(obs: SkillObs, seed=None, variance: float = 0.2,
                  enabled: bool = True) -> SkillObs:
    """Add independent zero-mean Gaussian noise with the given variance."""
    if not enabled:
        return obs
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v = obs.as_vector() + rng.normal(0.0, math.sqrt(variance), size=OBS_DIM)
    return SkillObs.from_vector(v)


# ---------------------------------------------------------------- policy

@dataclass
class PivotPolicy:
    actor: Mlp
    critics: tuple
    entropy_temperature: float = 0.2

    @classmethod
    def create(cls, hidden: int = 128, seed: int = 0) -> "PivotPolicy":
        rng = np.random.default_rng(seed)
        actor = Mlp([OBS_DIM, hidden, hidden, 2 * ACT_DIM], ["relu", "relu", "identity"], rng=rng)
        critics = tuple(Mlp([OBS_DIM + ACT_DIM, hidden, hidden, 1], ["relu", "relu", "identity"], rng=rng)
                        for _ in range(2))
        return cls(actor, critics)

    def copy(self) -> "PivotPolicy":
        return PivotPolicy(self.actor.copy(), tuple(c.copy() for c in self.critics), self.entropy_temperature)

    def to_bytes(self) -> bytes:
        parts = [b"OGPIVOT1", struct.pack("<d", self.entropy_temperature), mlp_to_bytes(self.actor)]
        parts += [mlp_to_bytes(c) for c in self.critics]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PivotPolicy":
        if buf[:8] != b"OGPIVOT1":
            raise ValueError("not a pivot policy checkpoint")
        (alpha,) = struct.unpack_from("<d", buf, 8)
        actor, off = mlp_from_bytes(buf, 16)
        c1, off = mlp_from_bytes(buf, off)
        c2, off = mlp_from_bytes(buf, off)
        return cls(actor, (c1, c2), alpha)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PivotPolicy":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _split_head(out: np.ndarray):
    mean = out[..., :ACT_DIM]
    log_std = np.clip(out[..., ACT_DIM:], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def pivot_act(policy: PivotPolicy, obs, mode: str = "deterministic", rng=None) -> np.ndarray:
    """Fingertip velocity in ``[-V_MAX, V_MAX]^3``."""
    x = obs.as_vector() if isinstance(obs, SkillObs) else np.asarray(obs, dtype=float)
    out, _ = forward(policy.actor, x)
    mean, log_std = _split_head(out)
    if mode == "deterministic":
        u = mean
    else:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        u = mean + np.exp(log_std) * rng.standard_normal(ACT_DIM)
    return V_MAX * np.tanh(u)


# ---------------------------------------------------------------- scripted skills

def push_act() -> tuple:
    return PUSH_ACTION


def plan_approach(eef, target, step: float = APPROACH_STEP) -> list:
    """Evenly spaced straight-line waypoints, spacing at most ``step``."""
    if not step > 0:
        raise ValueError("step must be positive")
    p0 = np.asarray(eef.position if isinstance(eef, PlanarPose) else eef, dtype=float)
    p1 = np.asarray(target.position if isinstance(target, PlanarPose) else target, dtype=float)
    dist = float(np.linalg.norm(p1 - p0))
    n = int(math.ceil(dist / step - 1e-9))
    if n == 0:
        return [p1.copy()]
    pts = [p0 + (p1 - p0) * (k / n) for k in range(n)]
    pts.append(p1.copy())
    return pts


def grasp_pose(sc: Scenario, state: SimState) -> np.ndarray:
    """Fingertip centre above the overhanging part of the object."""
    exp = sim.exposure(sc, state)
    gy = sc.wall.end_y - max(exp, 0.0) / 2
    h = sim.object_height(sc, state.object_pose.theta)
    return np.array([state.object_pose.x, gy, h + SAFE_CLEARANCE])


def _fingers_hit_wall(sc: Scenario, state: SimState, centre: np.ndarray) -> bool:
    g, w = sc.gripper, sc.wall
    y_lo, y_hi = centre[1] - g.finger_width / 2, centre[1] + g.finger_width / 2
    if not w.covers_y(y_lo, y_hi):
        return False
    th = state.object_pose.theta
    half_thick = (sc.shape.size_x * abs(math.cos(th)) + sc.shape.size_z * abs(math.sin(th))) / 2
    outer_x = state.object_pose.x + half_thick + g.finger_clearance
    return outer_x > w.face_x and centre[2] < w.height


def grasp_execute(sc: Scenario, state: SimState, gripper=None) -> tuple[bool, SimState, list]:
    """Move above the grasp location, then descend at ``GRASP_ACTION``.

    Returns ``(success, final_state, fingertip_path)``.
    """
    if gripper is not None:
        sc = replace(sc, gripper=gripper)
    ok_start = sim.graspable(sc, state)
    start = grasp_pose(sc, state)
    state = retreat(sc, state)
    state = replace(state, eef_pose=PlanarPose(*start, 0.0))
    depth = sim.object_height(sc, state.object_pose.theta) / 2
    path = [start.copy()]
    p = start.copy()
    dz = GRASP_ACTION[2] * sc.dt * CONTROL_SUBSTEPS
    collided = False
    if sc.shape.size_z + 2 * sc.gripper.finger_clearance > sc.gripper.max_opening:
        collided = True
    while not collided and p[2] > depth + 1e-12:
        p = p.copy()
        p[2] = max(p[2] + dz, depth)
        path.append(p)
        if _fingers_hit_wall(sc, state, p):
            collided = True
    state = replace(state, eef_pose=PlanarPose(*p, 0.0))
    return bool(ok_start and not collided), state, path


# ---------------------------------------------------------------- execution helpers

def retreat(sc: Scenario, state: SimState) -> SimState:
    """Lift off and return to the camera standoff; the object settles."""
    x, y, z = sim.standoff_position(sc, state.object_pose.y)
    theta = sim.rest_angle(sc, state.object_pose.theta) if state.contact is not None else state.object_pose.theta
    return SimState(
        object_pose=sim.object_pose_from(sc, theta, state.object_pose.y),
        eef_pose=PlanarPose(x, y, z, 0.0),
        contact_mode="free",
        in_contact_with_wall=sim.braced(sc, state.object_pose.y),
        time=state.time,
    )


def approach_direction(skill_id: int) -> np.ndarray:
    """Direction the fingertip travels into the contact for each skill."""
    if skill_id == 0:
        return np.array([1.0, 0.0, 0.0])
    return np.array([0.0, -1.0, 0.0])


def approach(sc: Scenario, state: SimState, target, skill_id: int) -> tuple[SimState, list]:
    """Standoff -> above the pre-contact point -> pre-contact -> target.

    Each leg is a linear interpolation; motion stops at the first contact.
    """
    target = np.asarray(target, dtype=float)
    pre = target - APPROACH_STANDOFF * approach_direction(skill_id)
    safe_z = max(sim.object_height(sc, state.object_pose.theta), pre[2]) + SAFE_CLEARANCE
    e = state.eef_pose.position
    legs = [np.array([pre[0], pre[1], safe_z]), pre, target]
    path = [e.copy()]
    for goal in legs:
        for wp in plan_approach(state.eef_pose.position, goal)[1:]:
            state = sim.move_eef_to(sc, state, wp)
            path.append(state.eef_pose.position.copy())
            if state.contact is not None:
                return state, path
    return state, path


def hold(sc: Scenario, state: SimState, action) -> SimState:
    engaged = state.contact is not None
    for _ in range(CONTROL_SUBSTEPS):
        state, _ = sim.step_eef(sc, state, action)
        if engaged and state.contact is None:
            break
    return state


def run_pivot(sc: Scenario, state: SimState, policy: PivotPolicy,
              max_steps: int = SKILL_HORIZON) -> tuple[SimState, bool, int]:
    """Roll the pivot skill until upright, contact loss, or the horizon."""
    steps = 0
    for steps in range(1, max_steps + 1):
        if state.contact is None:
            steps -= 1
            break
        a = pivot_act(policy, skill_obs(state))
        state = hold(sc, state, a)
        if pivot_complete(rotation_distance(state.object_pose.theta)):
            break
    return state, pivot_complete(rotation_distance(state.object_pose.theta)), steps


def run_push(sc: Scenario, state: SimState, goal: np.ndarray,
             max_steps: int = SKILL_HORIZON) -> tuple[SimState, str, int]:
    """Scripted push; outcome is 'complete', 'toppled', 'lost' or 'horizon'."""
    for steps in range(1, max_steps + 1):
        if state.contact is None:
            return state, "lost", steps - 1
        state = hold(sc, state, push_act())
        if state.toppled:
            return state, "toppled", steps
        if push_complete(state.object_pose.position, goal):
            return state, "complete", steps
    return state, "horizon", max_steps


# ---------------------------------------------------------------- SAC training

@dataclass
class SacConfig:
    batch_size: int = 4096
    replay_capacity: int = 100_000
    discount: float = 0.99
    target_smoothing: float = 0.01
    steps_per_update: int = 8
    total_env_steps: int = 24_000
    warmup_steps: int = 2_000
    learning_rate: float = 3e-4
    hidden: int = 128
    eval_interval: int = 3_000
    eval_episodes: int = 20
    # in nats of the normalised action; kept >= 0 so the soft bonus never
    # makes ending an episode early look attractive
    target_entropy: float = 0.0
    episode_steps: int = PIVOT_EPISODE_STEPS
    initial_temperature: float = 0.05
    far_face_fraction: float = 0.75
    obs_noise_variance: float = 0.2
    randomize_sizes: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size > self.replay_capacity:
            raise ValueError("batch_size must not exceed replay_capacity")


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.clean = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.next_clean = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.ptr = 0

    def add(self, o, c, a, r, o2, c2, d):
        i = self.ptr
        self.obs[i], self.clean[i], self.act[i] = o, c, a
        self.rew[i], self.next_obs[i], self.next_clean[i], self.done[i] = r, o2, c2, d
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=n)
        return (self.obs[idx], self.clean[idx], self.act[idx], self.rew[idx],
                self.next_obs[idx], self.next_clean[idx], self.done[idx])


def pivot_training_scenario(rng: np.random.Generator, randomize_sizes: bool = True) -> Scenario:
    if randomize_sizes:
        shape = ObjectShape("box", float(rng.uniform(0.08, 0.12)), float(rng.uniform(0.08, 0.12)),
                            float(rng.uniform(0.025, 0.04)))
    else:
        shape = ObjectShape()
    return Scenario(shape=shape, wall=WallConfig(lateral_length_l=0.2))


def start_contact(sc: Scenario, rng: np.random.Generator, far_fraction: float) -> Contact:
    """Initial fingertip contact on the far end face or the top face."""
    sh = sc.shape
    dy = float(rng.uniform(-0.4, 0.4)) * sh.size_y
    if rng.random() < far_fraction:
        return Contact("far", -sh.size_x, float(rng.uniform(0.0, sh.size_z)), dy)
    return Contact("top", float(rng.uniform(-sh.size_x, 0.0)), sh.size_z, dy)


class PivotEnv:
    """Pivot task with the fingertip starting on the object's upper profile.

    In evaluation mode an episode ends at success, contact loss or the step
    cap. In training mode nothing is terminal: the episode runs on after
    success or contact loss (the fingertip may re-engage) and is truncated at
    the cap or after ``idle_limit`` consecutive steps without contact.
    """

    def __init__(self, rng: np.random.Generator, far_fraction: float = 0.75,
                 randomize_sizes: bool = True, scenario: Optional[Scenario] = None,
                 training: bool = False, idle_limit: int = 10,
                 max_steps: int = PIVOT_EPISODE_STEPS):
        self.training = training
        self.idle_limit = idle_limit
        self.max_steps = max_steps
        self.idle = 0
        self.rng = rng
        self.far_fraction = far_fraction
        self.randomize_sizes = randomize_sizes
        self.fixed = scenario
        self.sc = scenario
        self.state = None
        self.t = 0

    def reset(self, contact: Optional[Contact] = None) -> SimState:
        self.sc = self.fixed or pivot_training_scenario(self.rng, self.randomize_sizes)
        st = sim.reset(self.sc, int(self.rng.integers(2**31)))
        c = contact or start_contact(self.sc, self.rng, self.far_fraction)
        self.state = sim.place_contact(self.sc, st, c)
        self.t = 0
        self.idle = 0
        return self.state

    def step(self, action) -> tuple[SimState, float, bool, bool]:
        """Returns (state, reward, success, done)."""
        self.state = hold(self.sc, self.state, action)
        self.t += 1
        d = rotation_distance(self.state.object_pose.theta)
        success = pivot_complete(d)
        self.idle = self.idle + 1 if self.state.contact is None else 0
        if self.training:
            done = self.t >= self.max_steps or self.idle >= self.idle_limit
        else:
            done = success or self.idle > 0 or self.t >= self.max_steps
        return self.state, pivot_reward(d), success, done


def _actor_sample(actor: Mlp, obs: np.ndarray, rng: np.random.Generator):
    out, tape = forward(actor, obs)
    mean, log_std = _split_head(out)
    std = np.exp(log_std)
    eps = rng.standard_normal(mean.shape)
    u = mean + std * eps
    t = np.tanh(u)
    a = V_MAX * t
    # log-density of the normalised action tanh(u); entropy targets are
    # stated in that unit box rather than in m/s
    logp = (-0.5 * eps ** 2 - log_std - 0.5 * math.log(2 * math.pi)).sum(axis=1)
    logp -= (np.log(1 - t ** 2 + 1e-12)).sum(axis=1)
    return a, logp, (out, tape, mean, log_std, std, eps, u, t)


def _q(critic: Mlp, obs: np.ndarray, act: np.ndarray):
    return forward(critic, np.concatenate([obs, act / V_MAX], axis=1))


def actor_loss_grad(actor: Mlp, q1: Mlp, q2: Mlp, obs: np.ndarray, critic_obs: np.ndarray,
                    alpha: float, rng: np.random.Generator):
    """Loss ``mean(alpha * log pi(a|o) - min(Q1, Q2))`` and its parameter gradient."""
    a_new, logp, (out, tape_a, mean, log_std, std, eps, u, t) = _actor_sample(actor, obs, rng)
    q1v, tq1 = _q(q1, critic_obs, a_new)
    q2v, tq2 = _q(q2, critic_obs, a_new)
    use1 = q1v[:, 0] <= q2v[:, 0]
    n = len(obs)
    w = np.full((n, 1), 1.0 / n)
    _, gin1 = backward_full(q1, tq1, w * use1[:, None])
    _, gin2 = backward_full(q2, tq2, w * (~use1)[:, None])
    dq_da = (gin1 + gin2)[:, OBS_DIM:] / V_MAX
    du = -dq_da * V_MAX * (1 - t ** 2)
    # the tanh correction contributes d(log pi)/du = 2 tanh(u)
    du += alpha / n * 2 * t
    dlogstd = du * std * eps - alpha / n
    clipped = (out[:, ACT_DIM:] < LOG_STD_MIN) | (out[:, ACT_DIM:] > LOG_STD_MAX)
    dlogstd = np.where(clipped, 0.0, dlogstd)
    grad = backward(actor, tape_a, np.concatenate([du, dlogstd], axis=1))
    loss = float(np.mean(alpha * logp - np.minimum(q1v[:, 0], q2v[:, 0])))
    return loss, grad, logp


def evaluate_pivot(policy: PivotPolicy, episodes: int = 50, seed: int = 0,
                   scenario: Optional[Scenario] = None, far_fraction: float = 1.0,
                   randomize_sizes: bool = False) -> tuple[float, float]:
    """Deterministic rollouts; returns (success rate, mean per-step reward)."""
    rng = np.random.default_rng(seed)
    env = PivotEnv(rng, far_fraction, randomize_sizes, scenario)
    succ, rewards = 0, []
    for _ in range(episodes):
        st = env.reset()
        total, n = 0.0, 0
        while True:
            a = pivot_act(policy, skill_obs(st))
            st, r, success, done = env.step(a)
            total += r
            n += 1
            if done:
                break
        succ += int(success)
        rewards.append(total / n)
    return succ / episodes, float(np.mean(rewards))


def train_pivot(cfg: SacConfig, metrics_path=None, progress=None) -> PivotPolicy:
    """Soft actor-critic with twin critics, Polyak targets and learned temperature.

    The actor sees observations through ``randomize_obs``; the critics are
    trained on the noise-free observation.
    """
    rng = np.random.default_rng([cfg.seed, 11])
    env_rng = np.random.default_rng([cfg.seed, 12])
    noise_rng = np.random.default_rng([cfg.seed, 13])
    policy = PivotPolicy.create(cfg.hidden, seed=cfg.seed)
    actor, (q1, q2) = policy.actor, policy.critics
    t1, t2 = q1.copy(), q2.copy()
    opt_a = Adam(actor.params.size, cfg.learning_rate)
    opt_q1 = Adam(q1.params.size, cfg.learning_rate)
    opt_q2 = Adam(q2.params.size, cfg.learning_rate)
    log_alpha = math.log(cfg.initial_temperature)
    opt_alpha = Adam(1, cfg.learning_rate)
    target_entropy = cfg.target_entropy
    gamma = cfg.discount

    buf = ReplayBuffer(cfg.replay_capacity, OBS_DIM, ACT_DIM)
    env = PivotEnv(env_rng, cfg.far_face_fraction, cfg.randomize_sizes, training=True,
                   max_steps=cfg.episode_steps)
    noisy = lambda o: randomize_obs(o, noise_rng, cfg.obs_noise_variance,
                                    enabled=cfg.obs_noise_variance > 0).as_vector()
    st = env.reset()
    o_clean = skill_obs(st)
    o = noisy(o_clean)

    best_rate, best = -1.0, policy.copy()
    rows = []
    init_rate, init_ret = evaluate_pivot(policy, cfg.eval_episodes, seed=cfg.seed + 1000)
    rows.append((0, init_ret, init_rate))

    for step in range(1, cfg.total_env_steps + 1):
        if step <= cfg.warmup_steps:
            a = rng.uniform(-V_MAX, V_MAX, size=ACT_DIM)
        else:
            a, _, _ = _actor_sample(actor, o[None, :], rng)
            a = a[0]
        st, r, success, done = env.step(a)
        o2_clean = skill_obs(st)
        o2 = noisy(o2_clean)
        # episodes only ever truncate, so every transition bootstraps
        buf.add(o, o_clean.as_vector(), a, r, o2, o2_clean.as_vector(), 0.0)
        o, o_clean = o2, o2_clean
        if done:
            st = env.reset()
            o_clean = skill_obs(st)
            o = noisy(o_clean)

        if step > cfg.warmup_steps and step % cfg.steps_per_update == 0 and buf.size >= cfg.batch_size:
            alpha = math.exp(log_alpha)
            ob, cb, ab, rb, ob2, cb2, db = buf.sample(cfg.batch_size, rng)
            # critic targets
            a2, logp2, _ = _actor_sample(actor, ob2, rng)
            qt = np.minimum(_q(t1, cb2, a2)[0][:, 0], _q(t2, cb2, a2)[0][:, 0])
            y = rb + gamma * (1 - db) * (qt - alpha * logp2)
            for q, opt in ((q1, opt_q1), (q2, opt_q2)):
                pred, tape = _q(q, cb, ab)
                err = pred[:, 0] - y
                loss = float(np.mean(err ** 2))
                if not math.isfinite(loss):
                    raise NumericalError(f"critic loss diverged at env step {step}")
                g = backward(q, tape, (2 * err / len(err))[:, None])
                opt.update(q, clip_global_norm(g))
            _, ga, logp = actor_loss_grad(actor, q1, q2, ob, cb, alpha, rng)
            opt_a.update(actor, clip_global_norm(ga))
            # temperature
            g_alpha = -float(np.mean(logp + target_entropy)) * math.exp(log_alpha)
            log_alpha = float(opt_alpha.step(np.array([log_alpha]), np.array([g_alpha]))[0])
            soft_update(t1, q1, cfg.target_smoothing)
            soft_update(t2, q2, cfg.target_smoothing)
            policy.entropy_temperature = math.exp(log_alpha)

        if step % cfg.eval_interval == 0 or step == cfg.total_env_steps:
            rate, ret = evaluate_pivot(policy, cfg.eval_episodes, seed=cfg.seed + 1000)
            rows.append((step, ret, rate))
            log.info("pivot step %d success %.2f return %.3f alpha %.4f", step, rate, ret,
                     policy.entropy_temperature)
            if progress:
                progress(step, rate, ret)
            if rate > best_rate:
                best_rate, best = rate, policy.copy()

    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "eval_return", "success_rate"])
            w.writerows(rows)
    best.metrics = rows
    best.last = policy
    return best
