import numpy as np
import pytest

from occgrasp.cvae import (
    CollectionEnv,
    CollectionError,
    ContactDataset,
    ContactEntry,
    CvaeConfig,
    CvaeModel,
    SKILL_PIVOT,
    SKILL_PUSH,
    approach_offset,
    cloud_features,
    collect_contacts,
    elbo_loss,
    gaussian_kl,
    infer_contact,
    monte_carlo_kl,
    select_candidate,
    train_cvae,
)
from occgrasp.neural import gradient_check
from occgrasp.sim import PointCloud


def test_kl_zero_at_prior():
    assert gaussian_kl(np.zeros(3), np.zeros(3)) == pytest.approx(0.0)


def test_kl_unit_mean_shift():
    assert gaussian_kl(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)


def test_kl_matches_sampling():
    mu = np.array([0.5, -1.0, 0.2])
    sigma = np.array([0.7, 1.3, 0.4])
    exact = gaussian_kl(mu, 2 * np.log(sigma))
    mc = monte_carlo_kl(mu, sigma, 200_000, seed=3)
    assert abs(mc - exact) / exact < 0.01


def test_select_candidate_pivot_lowest_z():
    c = np.array([[0, 0, 0.03], [0, 0, 0.01], [0, 0, 0.02]])
    assert np.array_equal(select_candidate(c, SKILL_PIVOT), c[1])


def test_select_candidate_push_largest_y():
    c = np.array([[0, 0.1, 0], [0, 0.3, 0], [0, 0.2, 0]])
    assert np.array_equal(select_candidate(c, SKILL_PUSH), c[1])


def test_select_candidate_tie_goes_first():
    c = np.array([[1, 0, 0.01], [2, 0, 0.01]])
    assert select_candidate(c, SKILL_PIVOT)[0] == 1


def test_offsets():
    assert np.allclose(approach_offset(SKILL_PIVOT), [0.01, 0, 0])
    assert np.allclose(approach_offset(SKILL_PUSH), [0, -0.01, 0])


def test_cloud_features_permutation_invariant(rng):
    pts = rng.normal(size=(64, 3))
    f1, c1 = cloud_features(pts)
    f2, c2 = cloud_features(pts[rng.permutation(64)])
    assert np.allclose(f1, f2) and np.allclose(c1, c2)


@pytest.fixture(scope="module")
def small_model():
    return CvaeModel.create(n_points=16, latent_dim=4, hidden=32, dropout=0.1, seed=0)


def _fake_batch(n=8, n_points=16, seed=0):
    r = np.random.default_rng(seed)
    clouds = r.normal(scale=0.05, size=(n, n_points, 3))
    skills = r.integers(0, 2, size=n)
    contacts = clouds.mean(axis=1) + r.normal(scale=0.02, size=(n, 3))
    return clouds, skills, contacts


def test_infer_single_sample_is_decoded_candidate_plus_offset(small_model):
    cloud = PointCloud(_fake_batch()[0][0])
    a = infer_contact(small_model, cloud, SKILL_PUSH, n_samples=1, seed=2)
    b = infer_contact(small_model, cloud, SKILL_PUSH, n_samples=1, offset=(0, 0, 0), seed=2)
    assert np.allclose(a - b, [0, -0.01, 0])
    with pytest.raises(ValueError):
        infer_contact(small_model, cloud, SKILL_PUSH, n_samples=0)


def test_infer_is_deterministic(small_model):
    cloud = PointCloud(_fake_batch()[0][0])
    a = infer_contact(small_model, cloud, SKILL_PIVOT, seed=5)
    assert np.array_equal(a, infer_contact(small_model, cloud, SKILL_PIVOT, seed=5))


def test_elbo_gradient(small_model):
    batch = _fake_batch()
    enc = small_model.encoder

    def f(p):
        saved = enc.params.copy()
        enc.set_params(p)
        try:
            r = elbo_loss(small_model, batch, seed=1, mode="eval")
        finally:
            enc.set_params(saved)
        return r.loss, r.enc_grad
    ok, err = gradient_check(f, enc.params.copy(), n_coords=40)
    assert ok, err


def test_elbo_rejects_empty(small_model):
    with pytest.raises(ValueError):
        elbo_loss(small_model, (np.zeros((0, 16, 3)), np.zeros(0, int), np.zeros((0, 3))))


def test_model_roundtrip(tmp_path, small_model):
    small_model.save(tmp_path / "m.bin")
    assert CvaeModel.load(tmp_path / "m.bin").to_bytes() == small_model.to_bytes()


def test_dataset_roundtrip(tmp_path):
    clouds, skills, contacts = _fake_batch(4)
    ds = ContactDataset([ContactEntry(PointCloud(c), int(s), tuple(x))
                         for c, s, x in zip(clouds, skills, contacts)])
    ds.save(tmp_path / "d.txt")
    back = ContactDataset.load(tmp_path / "d.txt")
    for a, b in zip(ds.arrays(), back.arrays()):
        assert np.array_equal(a, b)
    (tmp_path / "bad.txt").write_text("0 1.0 2.0\n")
    with pytest.raises(ValueError):
        ContactDataset.load(tmp_path / "bad.txt")


def test_collection_aborts_when_a_skill_never_succeeds(untrained_policies):
    with pytest.raises(CollectionError, match="skill 0"):
        collect_contacts(untrained_policies[0], CollectionEnv(n_points=16), per_skill_count=10,
                         seed=4, max_attempts=100)


def test_training_lowers_heldout_loss():
    clouds, skills, contacts = _fake_batch(400, seed=9)
    ds = ContactDataset([ContactEntry(PointCloud(c), int(s), tuple(x))
                         for c, s, x in zip(clouds, skills, contacts)])
    cfg = CvaeConfig(latent_dim=4, hidden=32, batch_size=32, learning_rate=1e-3, steps=300,
                     log_interval=100)
    model, rep = train_cvae(ds, cfg)
    assert rep.heldout_loss < rep.initial_heldout_loss
    assert len(rep.history) == 3
    with pytest.raises(ValueError):
        train_cvae(ContactDataset(ds.entries[:50]), cfg)
