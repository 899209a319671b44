"""Staged training and evaluation writing artifacts into one output directory.

Stages run in order pivot -> collect -> cvae -> high -> eval; each stage
reads the previous stage's files, so any stage can be rerun on its own.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import plotting
from .config import Config, with_seed
from .cvae import CollectionEnv, ContactDataset, CvaeModel, collect_contacts, train_cvae
from .harness import (
    EpisodeTrace,
    PipelineEnv,
    Policies,
    evaluate,
    make_scenario,
    run_episode,
    stage_seed,
    training_scenario,
)
from .high import AbstractMdp, policy_agreement, train_high, train_high_on_stubs
from .neural import load_mlp, save_mlp
from .skills import PivotPolicy, train_pivot

log = logging.getLogger(__name__)

PIVOT_FILE = "pivot.bin"
CONTACTS_FILE = "contacts.txt"
CVAE_FILE = "cvae.bin"
HIGH_FILE = "high.bin"


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class Paths:
    out: str

    def __post_init__(self):
        os.makedirs(self.out, exist_ok=True)

    def __call__(self, name: str) -> str:
        return os.path.join(self.out, name)

    def need(self, name: str) -> str:
        p = self(name)
        if not os.path.exists(p):
            raise MissingArtifact(f"missing artifact: {p}")
        return p


def seeds_for(master: int) -> dict:
    return {s: stage_seed(master, s) for s in ("pivot", "collect", "cvae", "high", "eval")}


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def stage_pivot(cfg: Config, master: int) -> PivotPolicy:
    paths = Paths(cfg.out_dir)
    with_seed(cfg, seeds_for(master))
    policy = train_pivot(cfg.sac, metrics_path=paths("pivot_metrics.csv"))
    policy.save(paths(PIVOT_FILE))
    if policy.metrics:
        rows = [dict(zip(("step", "eval_return", "success_rate"), r)) for r in policy.metrics]
        plotting.plot_curve(rows, paths("pivot_curve.png"), "step", ["success_rate"], "eval success rate")
    return policy


def stage_collect(cfg: Config, master: int) -> ContactDataset:
    paths = Paths(cfg.out_dir)
    pivot = PivotPolicy.load(paths.need(PIVOT_FILE))
    env = CollectionEnv(n_points=cfg.sim.n_points)
    ds = collect_contacts(pivot, env, cfg.cvae_section.per_skill_count, seed=seeds_for(master)["collect"])
    ds.save(paths(CONTACTS_FILE))
    return ds


def stage_cvae(cfg: Config, master: int) -> CvaeModel:
    paths = Paths(cfg.out_dir)
    ds = ContactDataset.load(paths.need(CONTACTS_FILE))
    with_seed(cfg, seeds_for(master))
    model, report = train_cvae(ds, cfg.cvae)
    model.save(paths(CVAE_FILE))
    _write_rows(paths("cvae_metrics.csv"),
                ["step", "loss", "recon", "kl", "heldout_loss", "heldout_distance"], report.history)
    if report.history:
        rows = [{"step": h[0], "heldout_distance": h[5]} for h in report.history]
        plotting.plot_curve(rows, paths("cvae_curve.png"), "step", ["heldout_distance"], "held-out distance [m]")
    return model


def load_skills(out_dir) -> tuple[PivotPolicy, CvaeModel]:
    paths = Paths(out_dir)
    p, c = paths.need(PIVOT_FILE), paths.need(CVAE_FILE)
    return PivotPolicy.load(p), CvaeModel.load(c)


def load_policies(out_dir) -> Policies:
    pivot, cvae = load_skills(out_dir)
    return Policies(pivot, cvae, load_mlp(Paths(out_dir).need(HIGH_FILE)))


def pipeline_env(cfg: Config, pivot, cvae, rng, accessible: bool = False) -> PipelineEnv:
    return PipelineEnv(pivot, cvae, sampler=training_scenario, rng=rng, rule=cfg.dqn_section.penalty_rule,
                       cloud_sigma=cfg.sim.cloud_sigma, n_samples=cfg.cvae_section.n_samples,
                       accessible=accessible)


def stage_high(cfg: Config, master: int):
    paths = Paths(cfg.out_dir)
    pivot, cvae = load_skills(cfg.out_dir)
    with_seed(cfg, seeds_for(master))
    seed = cfg.dqn.seed
    env = pipeline_env(cfg, pivot, cvae, np.random.default_rng([seed, 41]))
    eval_env = pipeline_env(cfg, pivot, cvae, np.random.default_rng([seed, 42]))
    qnet = train_high(env, cfg.dqn, log_path=paths("high_log.csv"), eval_env=eval_env)
    save_mlp(qnet, paths(HIGH_FILE))
    return qnet


def stage_eval(cfg: Config, master: int, accessible=None):
    paths = Paths(cfg.out_dir)
    policies = load_policies(cfg.out_dir)
    ev = cfg.eval
    accessible = ev.accessible if accessible is None else accessible
    suffix = "_accessible" if accessible else ""
    trace_dir = paths("traces" + suffix)
    os.makedirs(trace_dir, exist_ok=True)
    cells = [("nominal", l) for l in ev.wall_lengths] + [(o, ev.unseen_wall_length) for o in ev.objects]
    matrix = evaluate(policies, cells, ev.episodes_per_cell, seeds_for(master)["eval"],
                      rule=cfg.dqn_section.penalty_rule, accessible=accessible, trace_dir=trace_dir,
                      workers=ev.workers)
    matrix.to_csv(paths(f"eval{suffix}.csv"))
    if any(o == "nominal" for o, _ in matrix.cells):
        plotting.plot_skill_frequency(matrix, paths(f"skill_frequency{suffix}.png"))
    plotting.plot_success(matrix, paths(f"success{suffix}.png"))
    return matrix


def rollout(cfg: Config, seed: int, obj: str = "nominal", wall_length: float = 0.2, path=None) -> EpisodeTrace:
    policies = load_policies(cfg.out_dir)
    env = pipeline_env(cfg, policies.pivot, policies.cvae, None, accessible=cfg.eval.accessible)
    trace = run_episode(env, make_scenario(obj, wall_length), seed, qnet=policies.qnet)
    trace.save(path or Paths(cfg.out_dir)(f"rollout_seed{seed}.jsonl"))
    return trace


def oracle_check(cfg: Config, k_max: int = 5) -> tuple[float, list, AbstractMdp]:
    qnet, mdp = train_high_on_stubs(k_max, cfg.dqn, rule=cfg.dqn_section.penalty_rule)
    frac, bad = policy_agreement(qnet, mdp)
    return frac, bad, mdp


def run_all(cfg: Config, master: int):
    stage_pivot(cfg, master)
    stage_collect(cfg, master)
    stage_cvae(cfg, master)
    stage_high(cfg, master)
    return stage_eval(cfg, master)
