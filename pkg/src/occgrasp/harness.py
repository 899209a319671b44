"""Episode orchestration, evaluation matrices and trace files.

A decision follows the camera protocol: the fingertip waits at the standoff
while a cloud is rendered, the selector picks a skill, the contact is inferred
(CVAE for pivot and push, geometry for grasp), the fingertip approaches along
straight segments, the skill runs, and the fingertip retreats.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import sim
from .cvae import CvaeModel, infer_contact
from .geometry import GripperParams, ObjectShape, WallConfig, compute_goal, rotation_distance
from .high import (
    GRASP,
    MAX_DECISIONS,
    PIVOT,
    PUSH,
    HighObs,
    greedy,
    high_reward,
    make_obs,
    q_values,
)
from .neural import Mlp
from .skills import PivotPolicy, approach, grasp_execute, retreat, run_pivot, run_push
from .sim import Scenario

STAGES = ("pivot", "collect", "cvae", "high", "eval")
CLOUD_SIGMA = 0.003
N_SAMPLES = 32


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seed: a SeedSequence keyed by (master, stage index)."""
    ss = np.random.SeedSequence([int(master), STAGES.index(stage)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------- objects

OBJECTS = {
    "nominal": ObjectShape("box", 0.10, 0.10, 0.03),
    "large": ObjectShape("box", 0.14, 0.14, 0.035),
    "small": ObjectShape("box", 0.07, 0.07, 0.025),
    "long": ObjectShape("box", 0.14, 0.10, 0.03),
    "short": ObjectShape("box", 0.07, 0.10, 0.03),
    "gear": ObjectShape.cylinder(0.10, 0.025),
}
WALL_LENGTHS = (0.1, 0.2, 0.3, 0.4)


def make_scenario(obj: str | ObjectShape, wall_length: float, **kw) -> Scenario:
    shape = OBJECTS[obj] if isinstance(obj, str) else obj
    return Scenario(shape=shape, wall=WallConfig(lateral_length_l=float(wall_length)), **kw)


def scenario_dict(sc: Scenario) -> dict:
    return {"shape": asdict(sc.shape), "wall": asdict(sc.wall), "gripper": asdict(sc.gripper),
            "friction_mu": sc.friction_mu, "gravity": sc.gravity, "dt": sc.dt}


def scenario_from_dict(d: dict) -> Scenario:
    return Scenario(shape=ObjectShape(**d["shape"]), wall=WallConfig(**d["wall"]),
                    gripper=GripperParams(**d["gripper"]), friction_mu=d["friction_mu"],
                    gravity=d["gravity"], dt=d["dt"])


# ---------------------------------------------------------------- environment

@dataclass
class Policies:
    pivot: PivotPolicy
    cvae: CvaeModel
    qnet: Optional[Mlp] = None


def _pose_list(p) -> list:
    return [float(p.x), float(p.y), float(p.z), float(p.theta)]


class PipelineEnv:
    """High-level environment driving the simulator with the frozen skills.

    ``step`` returns ``(obs, reward, terminal, done, info)``; ``info['record']``
    holds the trace record of the decision.
    """

    def __init__(self, pivot: PivotPolicy, cvae: CvaeModel, sampler: Optional[Callable] = None,
                 rng: Optional[np.random.Generator] = None, rule: str = "literal",
                 cloud_sigma: float = CLOUD_SIGMA, n_samples: int = N_SAMPLES,
                 accessible: bool = False, max_decisions: int = MAX_DECISIONS):
        self.pivot = pivot
        self.cvae = cvae
        self.sampler = sampler or training_scenario
        self.rng = rng or np.random.default_rng(0)
        self.rule = rule
        self.cloud_sigma = cloud_sigma
        self.n_samples = n_samples
        self.accessible = accessible
        self.max_decisions = max_decisions
        self.sc = None
        self.state = None

    def reset(self, scenario: Optional[Scenario] = None, seed=None) -> HighObs:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.sc = scenario or self.sampler(self.rng)
        self.goal = compute_goal(self.sc.wall, self.sc.shape, self.sc.gripper)
        self.state = sim.reset(self.sc, int(self.rng.integers(2**31)))
        self.t = 0
        return self.observe()

    def observe(self) -> HighObs:
        p = self.state.object_pose
        return make_obs(p.position, p.theta, self.sc.wall.lateral_length_l, self.goal)

    def _execute(self, a: int, before):
        """Run one skill from ``before``; returns (state, contact, path, outcome, grasped)."""
        sc = self.sc
        cloud_seed, cvae_seed = (int(s) for s in self.rng.integers(2**31, size=2))
        contact, path, outcome, grasped = None, [before.eef_pose.position], "", False
        if a in (PIVOT, PUSH):
            cloud = sim.render_point_cloud(sc, before, self.cvae.n_points, self.cloud_sigma, cloud_seed)
            contact = infer_contact(self.cvae, cloud, a, self.n_samples, seed=cvae_seed)
            st, path = approach(sc, before, contact, a)
            if st.contact is None:
                outcome = "missed"
            elif a == PIVOT:
                st, ok, _ = run_pivot(sc, st, self.pivot)
                outcome = "complete" if ok else "failed"
            else:
                st, outcome, _ = run_push(sc, st, self.goal)
            st = retreat(sc, st)
        elif a == GRASP:
            grasped, st, path = grasp_execute(sc, before)
            outcome = "grasped" if grasped else "failed"
            if not grasped:
                st = retreat(sc, st)
        else:
            raise ValueError(f"unknown high-level action {a}")
        return st, contact, path, outcome, grasped

    def step(self, a: int):
        before = self.state
        obs = self.observe()
        st, contact, path, outcome, grasped = self._execute(a, before)
        self.state = st
        self.t += 1
        p = st.object_pose
        d = rotation_distance(p.theta)
        r = high_reward(p.position, self.goal, d, a, obs.v_pivot, obs.v_push, grasped, self.rule)
        nxt = self.observe()
        success = grasped or (self.accessible and bool(nxt.v_pivot))
        done = success or self.t >= self.max_decisions
        path = np.asarray(path, dtype=float)
        record = {
            "decision": self.t - 1,
            "skill": int(a),
            "contact": None if contact is None else [float(c) for c in contact],
            "eef_path": {"start": path[0].tolist(), "end": path[-1].tolist(), "n_waypoints": len(path),
                         "length": float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))},
            "object_before": _pose_list(before.object_pose),
            "object_after": _pose_list(p),
            "reward": r,
            "v_pivot": obs.v_pivot,
            "v_push": obs.v_push,
            "grasped": bool(grasped),
            "outcome": outcome,
        }
        return nxt, r, bool(grasped), done, {"grasped": bool(success), "record": record}


class IdealSkillEnv(PipelineEnv):
    """Same protocol with ideal skills: pivot always stands the object up,
    push moves it ``push_step`` toward the goal (or onto it), grasp is real."""

    def __init__(self, rule: str = "literal", push_step: float = 0.1, **kw):
        super().__init__(None, None, rule=rule, **kw)
        self.push_step = push_step

    def _execute(self, a: int, before):
        sc, p = self.sc, before.object_pose
        path = [before.eef_pose.position]
        if a == PIVOT:
            st = replace(before, object_pose=sim.object_pose_from(sc, sim.UPRIGHT_THETA, p.y))
            return st, None, path, "complete", False
        if a == PUSH:
            if not sim.rest_angle(sc, p.theta):
                return before, None, path, "missed", False
            gy = float(self.goal[1])
            y = max(gy, p.y - self.push_step)
            st = replace(before, object_pose=sim.object_pose_from(sc, p.theta, y))
            return st, None, path, "complete" if y == gy else "horizon", False
        if a == GRASP:
            grasped, st, path = grasp_execute(sc, before)
            return (st if grasped else retreat(sc, st)), None, path, "grasped" if grasped else "failed", grasped
        raise ValueError(f"unknown high-level action {a}")


def training_scenario(rng: np.random.Generator) -> Scenario:
    """Box sizes from the training range, wall length uniform in [0.1, 0.4]."""
    shape = ObjectShape("box", float(rng.uniform(0.08, 0.12)), float(rng.uniform(0.08, 0.12)),
                        float(rng.uniform(0.025, 0.04)))
    return Scenario(shape=shape, wall=WallConfig(lateral_length_l=float(rng.uniform(0.1, 0.4))))


# ---------------------------------------------------------------- traces

@dataclass
class EpisodeTrace:
    header: dict
    records: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return bool(self.final.get("success"))

    def skill_counts(self) -> list:
        counts = [0, 0, 0]
        for r in self.records:
            counts[r["skill"]] += 1
        return counts

    def dumps(self) -> str:
        lines = [json.dumps({"header": self.header}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"final": self.final}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "EpisodeTrace":
        lines = [json.loads(l) for l in text.splitlines() if l.strip()]
        return cls(lines[0]["header"], lines[1:-1], lines[-1]["final"])

    @classmethod
    def load(cls, path) -> "EpisodeTrace":
        with open(path) as fh:
            return cls.loads(fh.read())


def replay_rewards(trace: EpisodeTrace) -> list:
    """Recompute each decision's reward from the logged poses and flags."""
    goal = trace.header["goal"]
    rule = trace.header.get("rule", "literal")
    out = []
    for r in trace.records:
        x, y, z, th = r["object_after"]
        out.append(high_reward((x, y, z), goal, rotation_distance(th), r["skill"], r["v_pivot"],
                               r["v_push"], r["grasped"], rule))
    return out


def greedy_selector(qnet: Mlp) -> Callable:
    return lambda obs, rng: greedy(q_values(qnet, obs))


def random_selector(obs, rng) -> int:
    return int(rng.integers(3))


def run_episode(env: PipelineEnv, scenario: Scenario, seed: int,
                selector: Optional[Callable] = None, qnet: Optional[Mlp] = None) -> EpisodeTrace:
    """Run one episode; deterministic given ``seed``."""
    if selector is None:
        if qnet is None:
            raise ValueError("need a selector or a Q-network")
        selector = greedy_selector(qnet)
    sel_rng = np.random.default_rng([seed, 1])
    obs = env.reset(scenario, seed=[seed, 0])
    header = {"scenario": scenario_dict(scenario), "seed": int(seed), "goal": [float(g) for g in env.goal],
              "rule": env.rule, "accessible": env.accessible,
              "initial_object": _pose_list(env.state.object_pose)}
    trace = EpisodeTrace(header)
    done, info = False, {}
    while not done:
        a = selector(obs, sel_rng)
        obs, _, _, done, info = env.step(a)
        trace.records.append(info["record"])
    trace.final = {"success": bool(info.get("grasped")), "decisions": len(trace.records),
                   "object": _pose_list(env.state.object_pose)}
    return trace


# ---------------------------------------------------------------- evaluation

@dataclass
class CellStats:
    episodes: int = 0
    successes: int = 0
    skill_totals: list = field(default_factory=lambda: [0, 0, 0])

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0

    def mean_counts(self) -> list:
        return [t / self.episodes if self.episodes else 0.0 for t in self.skill_totals]


@dataclass
class EvalMatrix:
    cells: dict = field(default_factory=dict)   # (object, wall_length) -> CellStats

    def to_rows(self) -> list:
        rows = []
        for (obj, l), c in sorted(self.cells.items(), key=lambda kv: (list(OBJECTS).index(kv[0][0])
                                                                        if kv[0][0] in OBJECTS else 99,
                                                                        kv[0][1])):
            m = c.mean_counts()
            rows.append({"object": obj, "wall_length": f"{l:.2f}", "episodes": c.episodes,
                         "successes": c.successes, "success_rate": f"{c.success_rate:.4f}",
                         "mean_pivot": f"{m[0]:.4f}", "mean_push": f"{m[1]:.4f}", "mean_grasp": f"{m[2]:.4f}"})
        return rows

    def to_csv(self, path) -> None:
        rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["object"])
            w.writeheader()
            w.writerows(rows)


def _eval_cell(args):
    pivot, cvae, qnet, obj, l, episodes, seed, rule, accessible, trace_dir = args
    env = PipelineEnv(pivot, cvae, rule=rule, accessible=accessible)
    stats = CellStats()
    for i in range(episodes):
        ep_seed = int(np.random.SeedSequence([seed, list(OBJECTS).index(obj) if obj in OBJECTS else 99,
                                              int(round(l * 1000)), i]).generate_state(1)[0])
        trace = run_episode(env, make_scenario(obj, l), ep_seed, qnet=qnet)
        stats.episodes += 1
        stats.successes += int(trace.success)
        for k, c in enumerate(trace.skill_counts()):
            stats.skill_totals[k] += c
        if trace_dir is not None:
            trace.save(f"{trace_dir}/{obj}_l{l:.2f}_ep{i:03d}.jsonl")
    return (obj, l), stats


def evaluate(policies: Policies, cells, episodes_per_cell: int, seed: int, rule: str = "literal",
             accessible: bool = False, trace_dir=None, workers: int = 1) -> EvalMatrix:
    """``cells`` is an iterable of (object name, wall length)."""
    if episodes_per_cell < 1:
        raise ValueError("episodes_per_cell must be >= 1")
    if policies.qnet is None:
        raise ValueError("evaluation needs a trained Q-network")
    jobs = [(policies.pivot, policies.cvae, policies.qnet, obj, float(l), episodes_per_cell, seed, rule,
             accessible, trace_dir) for obj, l in cells]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_eval_cell, jobs))
    else:
        results = [_eval_cell(j) for j in jobs]
    return EvalMatrix(dict(results))


def standard_cells(objects=None, wall_lengths=WALL_LENGTHS, unseen_length: float = 0.2) -> list:
    """Nominal box across all wall lengths plus each other object at one length."""
    objects = objects or [o for o in OBJECTS if o != "nominal"]
    return [("nominal", l) for l in wall_lengths] + [(o, unseen_length) for o in objects]
