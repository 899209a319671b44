"""Conditional VAE over fingertip contact locations.

Conditioning is the object point cloud plus a one-hot skill id. Clouds are
made permutation invariant by sorting each axis independently, and both the
cloud and the contact are expressed relative to the cloud centroid in
centimetres; the decoder therefore predicts an offset from the centroid.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import sim
from .geometry import ObjectShape, PlanarPose, WallConfig, compute_goal
from .neural import Adam, Mlp, NumericalError, backward_full, clip_global_norm, forward, \
    mlp_from_bytes, mlp_to_bytes
from .sim import Contact, PointCloud, Scenario

log = logging.getLogger(__name__)

SKILL_PIVOT, SKILL_PUSH = 0, 1
N_SKILLS = 2
CLOUD_NOISE_STD = 0.003
CONTACT_OFFSET = 0.01
UNIT = 0.01          # centimetres
CENTROID_UNIT = 0.1
_MAGIC = b"OGCVAE01"


class CollectionError(RuntimeError):
    pass


# ---------------------------------------------------------------- dataset

@dataclass(frozen=True)
class ContactEntry:
    cloud: PointCloud
    skill_id: int
    contact: tuple


@dataclass
class ContactDataset:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def count(self, skill_id: int) -> int:
        return sum(1 for e in self.entries if e.skill_id == skill_id)

    def arrays(self):
        clouds = np.stack([e.cloud.points for e in self.entries])
        skills = np.array([e.skill_id for e in self.entries], dtype=int)
        contacts = np.array([e.contact for e in self.entries], dtype=float)
        return clouds, skills, contacts

    def save(self, path) -> None:
        """One record per line: skill_id, contact xyz, then the cloud row-major."""
        with open(path, "w") as fh:
            for e in self.entries:
                vals = [repr(float(v)) for v in e.contact] + [repr(float(v)) for v in e.cloud.points.ravel()]
                fh.write(f"{e.skill_id} " + " ".join(vals) + "\n")

    @classmethod
    def load(cls, path) -> "ContactDataset":
        entries = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                vals = np.array([float(v) for v in parts[1:]])
                if len(vals) < 6 or (len(vals) - 3) % 3:
                    raise ValueError(f"{path}:{lineno}: malformed contact record")
                entries.append(ContactEntry(PointCloud(vals[3:].reshape(-1, 3)), int(parts[0]),
                                            tuple(vals[:3])))
        return cls(entries)


def sample_box_shape(rng: np.random.Generator) -> ObjectShape:
    return ObjectShape("box", float(rng.uniform(0.08, 0.12)), float(rng.uniform(0.08, 0.12)),
                       float(rng.uniform(0.025, 0.04)))


@dataclass
class CollectionEnv:
    """Scenario sampler for contact collection."""
    wall_lengths: tuple = (0.1, 0.2, 0.3, 0.4)
    n_points: int = 64
    far_fraction: float = 0.5

    def scenario(self, rng: np.random.Generator) -> Scenario:
        shape = sample_box_shape(rng)
        wall = WallConfig(lateral_length_l=float(rng.choice(self.wall_lengths)))
        return Scenario(shape=shape, wall=wall)


def _pivot_attempt(env: CollectionEnv, policy, rng: np.random.Generator):
    from .skills import run_pivot, start_contact
    sc = env.scenario(rng)
    st = sim.reset(sc, int(rng.integers(2**31)))
    cloud = sim.render_point_cloud(sc, st, env.n_points, 0.0, int(rng.integers(2**31)))
    c = start_contact(sc, rng, env.far_fraction)
    start = sim.place_contact(sc, st, c)
    _, ok, _ = run_pivot(sc, start, policy)
    return ok, cloud, tuple(start.eef_pose.position)


def push_start_state(sc: Scenario, y: float) -> sim.SimState:
    """Object upright against the wall at lateral position ``y``."""
    st = sim.reset(sc, 0)
    obj = sim.object_pose_from(sc, math.pi / 2, y)
    ex, ey, ez = sim.standoff_position(sc, y)
    return replace(st, object_pose=obj, eef_pose=PlanarPose(ex, ey, ez, 0.0),
                   in_contact_with_wall=sim.braced(sc, y))


def _push_attempt(env: CollectionEnv, rng: np.random.Generator):
    from .skills import run_push
    sc = env.scenario(rng)
    goal = compute_goal(sc.wall, sc.shape, sc.gripper)
    y = float(goal[1] + rng.uniform(0.035, 0.095))
    st = push_start_state(sc, y)
    cloud = sim.render_point_cloud(sc, st, env.n_points, 0.0, int(rng.integers(2**31)))
    # upright body frame: b spans the thickness, a the height; +y face is dy = +sy/2
    sh = sc.shape
    c = Contact("+y", float(rng.uniform(-sh.size_x, 0.0)), float(rng.uniform(0.0, sh.size_z)),
                sh.size_y / 2)
    start = sim.place_contact(sc, st, c)
    _, outcome, _ = run_push(sc, start, goal)
    return outcome == "complete", cloud, tuple(start.eef_pose.position)


def collect_contacts(pivot_policy, env: Optional[CollectionEnv] = None, per_skill_count: int = 3000,
                     seed: int = 0, max_attempts: int = 10_000) -> ContactDataset:
    """Record starting contacts of successful skill rollouts.

    Aborts with ``CollectionError`` if a skill succeeds in fewer than 1% of
    the first ``max_attempts`` tries.
    """
    env = env or CollectionEnv()
    entries = []
    for skill_id in (SKILL_PIVOT, SKILL_PUSH):
        rng = np.random.default_rng([seed, skill_id])
        got, attempts = 0, 0
        while got < per_skill_count:
            attempts += 1
            if skill_id == SKILL_PIVOT:
                ok, cloud, contact = _pivot_attempt(env, pivot_policy, rng)
            else:
                ok, cloud, contact = _push_attempt(env, rng)
            if ok:
                entries.append(ContactEntry(cloud, skill_id, contact))
                got += 1
            if attempts >= max_attempts and got < 0.01 * attempts:
                raise CollectionError(
                    f"skill {skill_id}: {got} successes in {attempts} attempts; the skill looks broken")
        log.info("skill %d: %d contacts from %d attempts", skill_id, got, attempts)
    return ContactDataset(entries)


# ---------------------------------------------------------------- features

def cloud_features(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(features, centroid) for one cloud (n, 3) or a batch (B, n, 3)."""
    p = np.asarray(points, dtype=float)
    single = p.ndim == 2
    if single:
        p = p[None]
    c = p.mean(axis=1)
    rel = np.sort(p - c[:, None, :], axis=1) / UNIT
    feats = np.concatenate([c / CENTROID_UNIT, rel.reshape(len(p), -1)], axis=1)
    return (feats[0], c[0]) if single else (feats, c)


def one_hot(skill_ids, n: int = N_SKILLS) -> np.ndarray:
    s = np.atleast_1d(np.asarray(skill_ids, dtype=int))
    out = np.zeros((len(s), n))
    out[np.arange(len(s)), s] = 1.0
    return out


# ---------------------------------------------------------------- model

@dataclass
class CvaeModel:
    encoder: Mlp
    decoder: Mlp
    latent_dim: int = 8
    n_points: int = 64

    @classmethod
    def create(cls, n_points: int = 64, latent_dim: int = 8, hidden: int = 512,
               dropout: float = 0.1, seed: int = 0) -> "CvaeModel":
        rng = np.random.default_rng(seed)
        cond = 3 + 3 * n_points + N_SKILLS
        enc = Mlp([3 + cond, hidden, hidden, 2 * latent_dim], ["relu", "relu", "identity"], dropout, rng=rng)
        dec = Mlp([latent_dim + cond, hidden, hidden, 3], ["relu", "relu", "identity"], dropout, rng=rng)
        return cls(enc, dec, latent_dim, n_points)

    def to_bytes(self) -> bytes:
        return (_MAGIC + struct.pack("<II", self.latent_dim, self.n_points)
                + mlp_to_bytes(self.encoder) + mlp_to_bytes(self.decoder))

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CvaeModel":
        if buf[:8] != _MAGIC:
            raise ValueError("not a CVAE checkpoint")
        latent, n_points = struct.unpack_from("<II", buf, 8)
        enc, off = mlp_from_bytes(buf, 16)
        dec, _ = mlp_from_bytes(buf, off)
        if enc.n_out != 2 * latent:
            raise ValueError("encoder width does not match latent_dim")
        return cls(enc, dec, latent, n_points)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CvaeModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def gaussian_kl(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over the last axis."""
    return 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1.0 - logvar, axis=-1)


def monte_carlo_kl(mu, sigma, n_samples: int = 100_000, seed: int = 0) -> float:
    """Sample estimate of the same KL from draws of the posterior."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, mu.size))
    z = mu + sigma * eps
    log_q = np.sum(-0.5 * eps ** 2 - np.log(sigma), axis=1)
    log_p = np.sum(-0.5 * z ** 2, axis=1)
    return float(np.mean(log_q - log_p))


@dataclass
class ElboResult:
    loss: float
    recon: float
    kl: float
    enc_grad: np.ndarray
    dec_grad: np.ndarray


def _batch_inputs(model: CvaeModel, clouds, skills, contacts, rng, noise_std):
    pts = np.asarray(clouds, dtype=float)
    if noise_std > 0:
        pts = pts + rng.normal(0.0, noise_std, size=pts.shape)
    feats, centroid = cloud_features(pts)
    cond = np.concatenate([feats, one_hot(skills)], axis=1)
    target = (np.asarray(contacts, dtype=float) - centroid) / UNIT
    return cond, target


def elbo_loss(model: CvaeModel, batch, seed=0, mode: str = "train",
              noise_std: float = CLOUD_NOISE_STD) -> ElboResult:
    """Negative ELBO: squared reconstruction error (cm^2, summed over xyz,
    averaged over the batch) plus the analytic KL, with gradients."""
    clouds, skills, contacts = batch
    if len(contacts) == 0:
        raise ValueError("empty batch")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cond, target = _batch_inputs(model, clouds, skills, contacts, rng,
                                 noise_std if mode == "train" else 0.0)
    n, L = len(target), model.latent_dim
    h, tape_e = forward(model.encoder, np.concatenate([target, cond], axis=1), mode, rng)
    mu, logvar = h[:, :L], h[:, L:]
    std = np.exp(0.5 * logvar)
    eps = rng.standard_normal(mu.shape)
    z = mu + std * eps
    out, tape_d = forward(model.decoder, np.concatenate([z, cond], axis=1), mode, rng)
    err = out - target
    recon = float(np.mean(np.sum(err ** 2, axis=1)))
    kl = float(np.mean(gaussian_kl(mu, logvar)))
    loss = recon + kl
    if not math.isfinite(loss):
        raise NumericalError("CVAE loss is not finite")
    dec_grad, din = backward_full(model.decoder, tape_d, 2 * err / n)
    dz = din[:, :L]
    dmu = dz + mu / n
    dlogvar = dz * eps * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / n
    enc_grad, _ = backward_full(model.encoder, tape_e, np.concatenate([dmu, dlogvar], axis=1))
    return ElboResult(loss, recon, kl, enc_grad, dec_grad)


def decode(model: CvaeModel, cloud, skill_id: int, z: np.ndarray) -> np.ndarray:
    """Decode latents (k, L) into world-frame contacts (k, 3)."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    feats, centroid = cloud_features(pts)
    z = np.atleast_2d(z)
    cond = np.tile(np.concatenate([feats, one_hot(skill_id)[0]]), (len(z), 1))
    out, _ = forward(model.decoder, np.concatenate([z, cond], axis=1))
    return centroid + out * UNIT


def reconstruct(model: CvaeModel, clouds, skills, contacts) -> np.ndarray:
    """Posterior-mean reconstruction of each contact (eval mode)."""
    cond, target = _batch_inputs(model, clouds, skills, contacts, None, 0.0)
    h, _ = forward(model.encoder, np.concatenate([target, cond], axis=1))
    out, _ = forward(model.decoder, np.concatenate([h[:, :model.latent_dim], cond], axis=1))
    _, centroid = cloud_features(np.asarray(clouds, dtype=float))
    return centroid + out * UNIT


def approach_offset(skill_id: int, magnitude: float = CONTACT_OFFSET) -> np.ndarray:
    """Constant offset along the direction the fingertip travels into the face."""
    if skill_id == SKILL_PIVOT:
        return np.array([magnitude, 0.0, 0.0])
    return np.array([0.0, -magnitude, 0.0])


def select_candidate(candidates: np.ndarray, skill_id: int) -> np.ndarray:
    """Lowest z for pivoting, largest y for pushing; ties go to the first."""
    c = np.asarray(candidates, dtype=float)
    i = int(np.argmin(c[:, 2])) if skill_id == SKILL_PIVOT else int(np.argmax(c[:, 1]))
    return c[i]


def infer_contact(model: CvaeModel, cloud, skill_id: int, n_samples: int = 32,
                  offset=None, seed: int = 0) -> np.ndarray:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, model.latent_dim))
    best = select_candidate(decode(model, cloud, skill_id, z), skill_id)
    off = approach_offset(skill_id) if offset is None else np.asarray(offset, dtype=float)
    return best + off


# ---------------------------------------------------------------- training

@dataclass
class CvaeConfig:
    latent_dim: int = 8
    hidden: int = 512
    dropout: float = 0.1
    batch_size: int = 256
    learning_rate: float = 1e-4
    steps: int = 10_000
    holdout_fraction: float = 0.1
    noise_std: float = CLOUD_NOISE_STD
    log_interval: int = 1_000
    seed: int = 0


@dataclass
class CvaeReport:
    initial_heldout_loss: float
    heldout_loss: float
    heldout_distance: float
    final_kl: float
    history: list


def heldout_metrics(model: CvaeModel, data, seed: int = 0) -> tuple[float, float]:
    """(eval-mode negative ELBO, mean posterior-mean reconstruction distance in m)."""
    clouds, skills, contacts = data
    res = elbo_loss(model, data, seed=seed, mode="eval")
    rec = reconstruct(model, clouds, skills, contacts)
    return res.loss, float(np.mean(np.linalg.norm(rec - contacts, axis=1)))


def train_cvae(dataset: ContactDataset, cfg: CvaeConfig = CvaeConfig(),
               progress=None) -> tuple[CvaeModel, CvaeReport]:
    if len(dataset) < 10 * cfg.batch_size:
        raise ValueError(f"need at least {10 * cfg.batch_size} entries, have {len(dataset)}")
    clouds, skills, contacts = dataset.arrays()
    rng = np.random.default_rng([cfg.seed, 21])
    order = rng.permutation(len(contacts))
    n_hold = max(1, int(round(cfg.holdout_fraction * len(order))))
    hold, train = order[:n_hold], order[n_hold:]
    hold_data = (clouds[hold], skills[hold], contacts[hold])

    model = CvaeModel.create(clouds.shape[1], cfg.latent_dim, cfg.hidden, cfg.dropout, seed=cfg.seed)
    opt_e = Adam(model.encoder.params.size, cfg.learning_rate)
    opt_d = Adam(model.decoder.params.size, cfg.learning_rate)
    init_loss, _ = heldout_metrics(model, hold_data)
    history = []
    kl = float("nan")
    for step in range(1, cfg.steps + 1):
        idx = train[rng.integers(0, len(train), size=cfg.batch_size)]
        res = elbo_loss(model, (clouds[idx], skills[idx], contacts[idx]), seed=rng, noise_std=cfg.noise_std)
        opt_e.update(model.encoder, clip_global_norm(res.enc_grad))
        opt_d.update(model.decoder, clip_global_norm(res.dec_grad))
        kl = res.kl
        if step % cfg.log_interval == 0 or step == cfg.steps:
            hl, hd = heldout_metrics(model, hold_data)
            history.append((step, res.loss, res.recon, res.kl, hl, hd))
            log.info("cvae step %d loss %.3f recon %.3f kl %.3f heldout %.3f dist %.4f m",
                     step, res.loss, res.recon, res.kl, hl, hd)
            if progress:
                progress(step, hl, hd)
    hl, hd = heldout_metrics(model, hold_data)
    return model, CvaeReport(init_loss, hl, hd, kl, history)
