"""High-level skill selection: reward, DQN, and a tabular oracle.

Actions: 0 pivot, 1 push, 2 grasp.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (
    ObjectShape,
    WallConfig,
    GripperParams,
    compute_goal,
    pivot_complete,
    push_complete,
    rotation_distance,
)
from .neural import Adam, Mlp, NumericalError, backward, clip_global_norm, forward
from .sim import Scenario, object_pose_from

log = logging.getLogger(__name__)

PIVOT, PUSH, GRASP = 0, 1, 2
N_ACTIONS = 3
BONUS = 0.05
PENALTY = -30.0
DONE_REWARD = 1.05
MAX_DECISIONS = 15
# "literal": all four penalty clauses as written, including pivoting while the
# push flag is unset. "prose": only the cases described in words, i.e. picking
# a skill whose subtask is already complete or grasping before both are done.
PENALTY_RULES = ("literal", "prose")


@dataclass(frozen=True)
class HighObs:
    object_position: tuple
    object_orientation: tuple
    wall_length_l: float
    v_pivot: int
    v_push: int

    def as_vector(self) -> np.ndarray:
        return np.array(tuple(self.object_position) + tuple(self.object_orientation)
                        + (self.wall_length_l, self.v_pivot, self.v_push), dtype=float)


def make_obs(position, theta: float, wall_length: float, goal) -> HighObs:
    """Observation with flags recomputed from the given pose."""
    d = rotation_distance(theta)
    return HighObs(tuple(float(c) for c in position), (0.0, float(theta), 0.0), float(wall_length),
                   int(pivot_complete(d)), int(push_complete(position, goal)))


def obs_features(obs) -> np.ndarray:
    """Network input: lengths rescaled to roughly unit range."""
    v = obs.as_vector() if isinstance(obs, HighObs) else np.asarray(obs, dtype=float)
    v = v.copy()
    v[..., :3] /= 0.1
    v[..., 6] /= 0.1
    return v


def penalty_applies(a_high: int, v_pivot: int, v_push: int, rule: str = "literal") -> bool:
    if rule not in PENALTY_RULES:
        raise ValueError(f"unknown penalty rule {rule!r}")
    hit = ((a_high == PIVOT and v_pivot == 1) or (a_high == PUSH and v_push == 1)
           or (a_high == GRASP and v_pivot * v_push == 0))
    if rule == "literal":
        hit = hit or (a_high == PIVOT and v_push == 0)
    return hit


def high_reward(x_obj, x_goal, d: float, a_high: int, v_pivot: int, v_push: int, grasped: bool,
                rule: str = "literal") -> float:
    r = -float(np.linalg.norm(np.asarray(x_obj, dtype=float) - np.asarray(x_goal, dtype=float)))
    if pivot_complete(d):
        r += BONUS
    if penalty_applies(a_high, v_pivot, v_push, rule):
        r += PENALTY
    if grasped:
        r += DONE_REWARD
    return r


def q_values(qnet: Mlp, obs) -> np.ndarray:
    return forward(qnet, obs_features(obs))[0]


def greedy(q: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest action id
    return int(np.argmax(q))


def dqn_act(qnet: Mlp, obs, epsilon: float, seed=None) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return greedy(q_values(qnet, obs))


# ---------------------------------------------------------------- abstract MDP

@dataclass
class AbstractMdp:
    """States (v_pivot, pushes remaining k, grasped) under ideal skills.

    Pivoting always succeeds, each push of the upright object closes one step
    of ``push_step`` metres (a lying object does not move), and grasping
    succeeds exactly when the object is upright at the goal. Rewards come from
    ``high_reward`` evaluated on representative object poses.
    """
    k_max: int = 5
    discount: float = 0.95
    push_step: float = 0.1
    wall_length: float = 0.2
    shape: ObjectShape = ObjectShape()
    rule: str = "literal"

    def __post_init__(self):
        if not 0 <= self.k_max <= 10:
            raise ValueError("k_max must lie in 0..10")
        sc = Scenario(shape=self.shape, wall=WallConfig(lateral_length_l=self.wall_length))
        self.goal = compute_goal(sc.wall, sc.shape, GripperParams())
        self._sc = sc

    def states(self):
        return [(v, k, g) for v in (0, 1) for k in range(self.k_max + 1) for g in (0, 1)]

    def pose(self, state) -> tuple[np.ndarray, float]:
        v, k, _ = state
        theta = math.pi / 2 if v else 0.0
        p = object_pose_from(self._sc, theta, float(self.goal[1] + k * self.push_step))
        return p.position, theta

    def observe(self, state) -> HighObs:
        pos, theta = self.pose(state)
        return make_obs(pos, theta, self.wall_length, self.goal)

    def flags(self, state) -> tuple[int, int]:
        o = self.observe(state)
        return o.v_pivot, o.v_push

    def transition(self, state, a: int):
        v, k, g = state
        if g:
            return state
        if a == PIVOT:
            return (1, k, 0)
        if a == PUSH:
            return (v, max(k - 1, 0), 0) if v else state
        vp, vq = self.flags(state)
        return (v, k, 1) if vp and vq else state

    def reward(self, state, a: int, nxt) -> float:
        vp, vq = self.flags(state)
        pos, theta = self.pose(nxt)
        return high_reward(pos, self.goal, rotation_distance(theta), a, vp, vq, bool(nxt[2]), self.rule)

    def reachable(self):
        """Non-terminal states reachable from any flat start (0, k, 0)."""
        return [(v, k, 0) for v in (0, 1) for k in range(self.k_max + 1)]


def value_iteration(mdp: AbstractMdp, tol: float = 1e-10, max_iter: int = 100_000):
    states = mdp.states()
    V = {s: 0.0 for s in states}
    for _ in range(max_iter):
        delta = 0.0
        for s in states:
            if s[2]:
                continue
            best = max(_backup(mdp, V, s, a) for a in range(N_ACTIONS))
            delta = max(delta, abs(best - V[s]))
            V[s] = best
        if delta < tol:
            break
    Q = {s: np.array([_backup(mdp, V, s, a) for a in range(N_ACTIONS)]) for s in states if not s[2]}
    return V, Q


def _backup(mdp, V, s, a):
    nxt = mdp.transition(s, a)
    cont = 0.0 if nxt[2] else mdp.discount * V[nxt]
    return mdp.reward(s, a, nxt) + cont


def oracle_policy(mdp: AbstractMdp) -> dict:
    _, Q = value_iteration(mdp)
    return {s: greedy(q) for s, q in Q.items()}


def rollout_policy(mdp: AbstractMdp, policy, k: int, limit: int = MAX_DECISIONS) -> list:
    """Action sequence from the flat start with ``k`` pushes to go."""
    s, acts = (0, k, 0), []
    while not s[2] and len(acts) < limit:
        a = policy[s] if isinstance(policy, dict) else policy(s)
        acts.append(a)
        s = mdp.transition(s, a)
    return acts


class StubEnv:
    """Episode wrapper around the abstract MDP (ideal skill stubs)."""

    def __init__(self, mdp: AbstractMdp, rng: np.random.Generator):
        self.mdp = mdp
        self.rng = rng
        self.state = None
        self.t = 0

    def reset(self, k: Optional[int] = None) -> HighObs:
        k = int(self.rng.integers(self.mdp.k_max + 1)) if k is None else k
        self.state = (0, k, 0)
        self.t = 0
        return self.mdp.observe(self.state)

    def step(self, a: int):
        nxt = self.mdp.transition(self.state, a)
        r = self.mdp.reward(self.state, a, nxt)
        self.state = nxt
        self.t += 1
        grasped = bool(nxt[2])
        return self.mdp.observe(nxt), r, grasped, grasped or self.t >= MAX_DECISIONS, {"grasped": grasped}


def policy_agreement(qnet: Mlp, mdp: AbstractMdp) -> tuple[float, list]:
    """Fraction of reachable abstract states where the greedy DQN action
    equals the oracle's, plus the disagreeing states."""
    oracle = oracle_policy(mdp)
    bad = []
    states = mdp.reachable()
    for s in states:
        if greedy(q_values(qnet, mdp.observe(s))) != oracle[s]:
            bad.append(s)
    return 1.0 - len(bad) / len(states), bad


# ---------------------------------------------------------------- DQN

@dataclass
class DqnConfig:
    batch_size: int = 256
    replay_capacity: int = 50_000
    discount: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.6
    target_update_interval: int = 200
    total_decisions: int = 6_000
    learning_rate: float = 1e-3
    hidden: int = 128
    updates_per_decision: int = 1
    warmup_decisions: int = 500
    eval_interval: int = 1_000
    eval_episodes: int = 20
    huber_delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for e in (self.epsilon_start, self.epsilon_end):
            if not 0.0 <= e <= 1.0:
                raise ValueError("epsilon must lie in [0, 1]")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")

    def epsilon(self, decision: int) -> float:
        horizon = max(1, int(self.epsilon_decay_fraction * self.total_decisions))
        frac = min(1.0, decision / horizon)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


def create_qnet(hidden: int = 128, seed: int = 0) -> Mlp:
    return Mlp([9, hidden, hidden, N_ACTIONS], ["relu", "relu", "identity"], rng=np.random.default_rng(seed))


def evaluate_high(qnet: Mlp, env, episodes: int, seed: int = 0) -> tuple[float, float]:
    """Greedy episodes; returns (success rate, mean return)."""
    succ, rets = 0, []
    for i in range(episodes):
        obs = env.reset(seed=[seed, i]) if _takes_seed(env) else env.reset()
        total, done, info = 0.0, False, {}
        while not done:
            obs, r, _, done, info = env.step(greedy(q_values(qnet, obs)))
            total += r
        succ += int(info.get("grasped", False))
        rets.append(total)
    return succ / episodes, float(np.mean(rets))


def _takes_seed(env) -> bool:
    import inspect
    return "seed" in inspect.signature(env.reset).parameters


def train_high(env, cfg: DqnConfig, log_path=None, eval_env=None, progress=None) -> Mlp:
    """DQN with a periodically synced target network and uniform replay.

    ``env`` exposes ``reset()`` and ``step(a) -> (obs, reward, terminal,
    done, info)``; ``terminal`` marks a true end (grasp success) while
    ``done`` may also be a decision-limit truncation.
    """
    rng = np.random.default_rng([cfg.seed, 31])
    qnet = create_qnet(cfg.hidden, cfg.seed)
    target = qnet.copy()
    opt = Adam(qnet.params.size, cfg.learning_rate)
    cap = cfg.replay_capacity
    obs_buf = np.zeros((cap, 9))
    next_buf = np.zeros((cap, 9))
    act_buf = np.zeros(cap, dtype=int)
    rew_buf = np.zeros(cap)
    term_buf = np.zeros(cap)
    size = ptr = 0
    updates = 0
    rows = []
    best_key, best = None, qnet.copy()

    obs = env.reset()
    ep, ep_ret, ep_len = 0, 0.0, 0
    for decision in range(1, cfg.total_decisions + 1):
        eps = cfg.epsilon(decision - 1)
        a = dqn_act(qnet, obs, eps, rng)
        nxt, r, terminal, done, info = env.step(a)
        obs_buf[ptr], act_buf[ptr], rew_buf[ptr] = obs.as_vector(), a, r
        next_buf[ptr], term_buf[ptr] = nxt.as_vector(), float(terminal)
        ptr = (ptr + 1) % cap
        size = min(size + 1, cap)
        ep_ret += r
        ep_len += 1
        obs = nxt
        if done:
            rows.append((ep, ep_len, ep_ret, int(info.get("grasped", False))))
            ep += 1
            ep_ret, ep_len = 0.0, 0
            obs = env.reset()

        if decision > cfg.warmup_decisions and size >= cfg.batch_size:
            for _ in range(cfg.updates_per_decision):
                idx = rng.integers(0, size, size=cfg.batch_size)
                q_next, _ = forward(target, obs_features(next_buf[idx]))
                y = rew_buf[idx] + cfg.discount * (1 - term_buf[idx]) * q_next.max(axis=1)
                q, tape = forward(qnet, obs_features(obs_buf[idx]))
                sel = q[np.arange(len(idx)), act_buf[idx]]
                err = sel - y
                # Huber loss: the -30 penalty targets would otherwise swamp
                # the small value gaps between the remaining actions
                h = cfg.huber_delta
                loss = float(np.mean(np.where(np.abs(err) <= h, 0.5 * err ** 2, h * (np.abs(err) - 0.5 * h))))
                if not math.isfinite(loss):
                    raise NumericalError(f"DQN loss diverged at decision {decision}")
                g_out = np.zeros_like(q)
                g_out[np.arange(len(idx)), act_buf[idx]] = np.clip(err, -h, h) / len(idx)
                opt.update(qnet, clip_global_norm(backward(qnet, tape, g_out)))
                updates += 1
                if updates % cfg.target_update_interval == 0:
                    target.set_params(qnet.params)

        if eval_env is not None and (decision % cfg.eval_interval == 0 or decision == cfg.total_decisions):
            rate, ret = evaluate_high(qnet, eval_env, cfg.eval_episodes, seed=cfg.seed + 500)
            log.info("dqn decision %d eps %.2f success %.2f return %.2f", decision, eps, rate, ret)
            if progress:
                progress(decision, rate, ret)
            key = (rate, ret)
            if best_key is None or key >= best_key:   # ties go to the later network
                best_key, best = key, qnet.copy()

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "decisions", "return", "success"])
            w.writerows(rows)
    if eval_env is None:
        best = qnet
    best.episode_log = rows
    return best


def train_high_on_stubs(k_max: int = 5, cfg: Optional[DqnConfig] = None,
                        rule: str = "literal") -> tuple[Mlp, AbstractMdp]:
    cfg = cfg or DqnConfig()
    mdp = AbstractMdp(k_max=k_max, discount=cfg.discount, rule=rule)
    env = StubEnv(mdp, np.random.default_rng([cfg.seed, 32]))
    qnet = train_high(env, cfg)
    return qnet, mdp


ACTION_NAMES = {PIVOT: "pivot", PUSH: "push", GRASP: "grasp"}
