import math

import numpy as np
import pytest

from cyclicdp.data_synth import SiteDataSpec, SiteDataset, generate_multisite
from cyclicdp.dp_optimizer import DpSgdConfig, NoiseSource, noisy_step, plain_step, sample_batch
from cyclicdp.federation import (
    CHECKPOINT_MAGIC,
    InvariantError,
    Site,
    TrainingPlan,
    central_train,
    checkpoint_bytes,
    cyclical_train,
    load_checkpoint,
    save_checkpoint,
    site_seed,
    train_site_epoch,
)
from cyclicdp.nn_core import ArchitectureSpec, init_params, per_example_gradients
from cyclicdp.rdp_accountant import PrivacyBudget, accumulate, compute_epsilon

D = 4
ARCH = ArchitectureSpec((D, 6, 1))
W = np.array([1.5, -1.0, 0.5, 2.0])


def make_sites(sizes, dp, eps=math.inf, seed=0, ids=None):
    specs = [SiteDataSpec(n, feature_shift=0.2 * i, site_id=(ids[i] if ids else f"s{i + 1}"))
             for i, n in enumerate(sizes)]
    data = generate_multisite(D, W, specs, seed)
    return [Site.create(d, PrivacyBudget(eps), dp) for d in data]


def plan(mode, dp, epochs=1, seed=0, **kw):
    kw.setdefault("convergence_tol", None)
    return TrainingPlan(mode, epochs, dp, ARCH, master_seed=seed, **kw)


def replay(params, site, dp, private, n_steps, master_seed=0, source=None):
    """Independent re-run of the inner loop with the same substreams."""
    src = source or NoiseSource(site_seed(master_seed, site.id))
    for _ in range(n_steps):
        rng = src.next_stream()
        b = sample_batch(site.dataset.features, site.dataset.labels, dp, rng)
        g = per_example_gradients(params, b) if b is not None else None
        params = noisy_step(params, g, dp, rng) if private else plain_step(params, g, dp)
    return params


class TestSiteEpoch:
    def test_floor_division_step_count(self):
        dp = DpSgdConfig(1.0, 100, 0.1)
        (site,) = make_sites([250], dp, eps=100)
        _, site, info = train_site_epoch(init_params(ARCH, 0), site, plan("distributed_private", dp),
                                         NoiseSource(0))
        assert info["steps"] == 2
        assert site.ledger.steps == 2

    def test_zero_noise_private_equals_plain(self):
        dp = DpSgdConfig(0.0, 20, 0.1, clip_norm=math.inf, sampling="with_replacement")
        (a,) = make_sites([200], dp)
        (b,) = make_sites([200], dp)
        p0 = init_params(ARCH, 0)
        pa, _, _ = train_site_epoch(p0, a, plan("distributed_private", dp), NoiseSource(1))
        pb, _, _ = train_site_epoch(p0, b, plan("distributed", dp), NoiseSource(1))
        np.testing.assert_allclose(pa.flatten(), pb.flatten(), rtol=0, atol=1e-14)

    def test_tiny_budget_stops_at_oracle_step(self):
        dp = DpSgdConfig(1.0, 10, 0.1)
        (site,) = make_sites([400], dp, eps=0.1)
        q = 10 / 400
        first_cross = next(t for t in range(1000) if compute_epsilon(q, 1.0, t)[0] >= 0.1)
        p0 = init_params(ARCH, 0)
        p, site, info = train_site_epoch(p0, site, plan("distributed_private", dp), NoiseSource(2))
        assert not site.active and info["exhausted"]
        assert info["steps"] == first_cross - 1
        expected = replay(p0, site, dp, True, first_cross - 1, source=NoiseSource(2))
        assert p.flatten().tobytes() == expected.flatten().tobytes()

    def test_postcheck_charges_the_crossing_step(self):
        dp = DpSgdConfig(1.0, 10, 0.1)
        (site,) = make_sites([400], dp, eps=0.1)
        first_cross = next(t for t in range(1000) if compute_epsilon(10 / 400, 1.0, t)[0] >= 0.1)
        _, site, info = train_site_epoch(init_params(ARCH, 0), site,
                                         plan("distributed_private", dp, postcheck=True), NoiseSource(2))
        assert info["steps"] == first_cross
        assert site.epsilon >= 0.1

    def test_inactive_site_rejected(self):
        dp = DpSgdConfig(1.0, 10, 0.1)
        (site,) = make_sites([100], dp)
        site.active = False
        with pytest.raises(ValueError):
            train_site_epoch(init_params(ARCH, 0), site, plan("distributed", dp), NoiseSource(0))


class TestCyclical:
    def test_one_site_matches_central(self):
        dp = DpSgdConfig(1.0, 25, 0.1)
        a = cyclical_train(make_sites([300], dp), plan("distributed", dp, epochs=3))
        b = central_train(make_sites([300], dp), plan("central", dp, epochs=3))
        assert a.params.flatten().tobytes() == b.params.flatten().tobytes()

    def test_two_sites_replay(self):
        dp = DpSgdConfig(0.0, 20, 0.1, clip_norm=math.inf)
        sites = make_sites([100, 60], dp)
        rec = cyclical_train(sites, plan("distributed_private", dp, seed=3))
        p = init_params(ARCH, 3)
        p = replay(p, sites[0], dp, True, 5, master_seed=3)
        p = replay(p, sites[1], dp, True, 3, master_seed=3)
        assert rec.params.flatten().tobytes() == p.flatten().tobytes()

    def test_exhausted_site_drops_out(self):
        dp = DpSgdConfig(1.0, 50, 0.1)
        target = 6.3
        sites = make_sites([1000, 1000, 200], dp, eps=target)
        rec = cyclical_train(sites, plan("distributed_private", dp, epochs=4))
        q3 = 50 / 200
        first_cross = next(t for t in range(100) if compute_epsilon(q3, 1.0, t)[0] >= target)
        assert first_cross == 6  # 4 steps in epoch 1, crossing during epoch 2
        assert sites[2].ledger.steps == first_cross - 1
        assert not sites[2].active and sites[0].active and sites[1].active
        s3 = [t for t in rec.trace if t["site"] == "s3"]
        assert [t["epoch"] for t in s3] == [1, 2]
        for e in (3, 4):
            assert [t["site"] for t in rec.trace if t["epoch"] == e] == ["s1", "s2"]
        assert rec.ledgers["s3"]["epsilon"] == s3[-1]["epsilon"]

    def test_budget_never_overdrawn(self):
        dp = DpSgdConfig(1.0, 50, 0.1)
        sites = make_sites([1000, 600, 200], dp, eps=3.0)
        rec = cyclical_train(sites, plan("distributed_private", dp, epochs=10))
        assert all(t["epsilon"] < 3.0 for t in rec.trace)

    def test_weight_continuity(self):
        dp = DpSgdConfig(1.0, 30, 0.1)
        rec = cyclical_train(make_sites([120, 90, 60], dp, eps=50), plan("distributed_private", dp, epochs=3))
        for prev, nxt in zip(rec.trace, rec.trace[1:]):
            assert nxt["params_in"] == prev["params_out"]

    def test_deterministic(self):
        dp = DpSgdConfig(1.0, 30, 0.1)

        def go():
            return cyclical_train(make_sites([120, 90], dp, eps=20), plan("distributed_private", dp, epochs=3))

        a, b = go(), go()
        assert a.params.flatten().tobytes() == b.params.flatten().tobytes()
        assert a.trace == b.trace and a.ledgers == b.ledgers

    def test_private_zero_noise_one_site_equals_central(self):
        dp = DpSgdConfig(0.0, 25, 0.1, clip_norm=math.inf, sampling="with_replacement")
        a = cyclical_train(make_sites([200], dp), plan("distributed_private", dp, epochs=2))
        b = central_train(make_sites([200], dp), plan("central", dp, epochs=2))
        np.testing.assert_allclose(a.params.flatten(), b.params.flatten(), rtol=0, atol=1e-13)

    def test_adding_a_site_keeps_other_noise(self):
        dp = DpSgdConfig(1.0, 30, 0.1)
        a = cyclical_train(make_sites([120], dp, eps=50), plan("distributed_private", dp))
        b = cyclical_train(make_sites([120, 90], dp, eps=50), plan("distributed_private", dp))
        assert a.trace[0]["params_out"] == b.trace[0]["params_out"]

    def test_all_inactive_rejected(self):
        dp = DpSgdConfig(1.0, 10, 0.1)
        sites = make_sites([50], dp)
        sites[0].active = False
        with pytest.raises(ValueError):
            cyclical_train(sites, plan("distributed", dp))

    def test_converges_on_plateau(self):
        dp = DpSgdConfig(0.0, 50, 1e-9)  # too small a step to change the loss
        rec = cyclical_train(make_sites([500], dp), plan("distributed", dp, epochs=10, convergence_tol=1e-4))
        assert rec.converged and rec.epochs_run < 10

    def test_custom_site_order(self):
        dp = DpSgdConfig(1.0, 20, 0.1)
        rec = cyclical_train(make_sites([40, 40], dp), plan("distributed", dp, site_order=("s2", "s1")))
        assert [t["site"] for t in rec.trace] == ["s2", "s1"]


class TestCentral:
    def test_pooled_accounting_rate(self):
        dp = DpSgdConfig(1.0, 50, 0.1)
        sites = make_sites([300, 200], dp, eps=100)
        rec = central_train(sites, plan("central_private", dp))
        (led,) = rec.ledgers.values()
        assert led["q"] == pytest.approx(50 / 500)
        assert led["steps"] == 10
        assert rec.n_sites == 2

    def test_more_epochs_lower_loss(self):
        dp = DpSgdConfig(1.0, 50, 0.2)
        one = central_train(make_sites([400, 400], dp), plan("central", dp, epochs=1))
        five = central_train(make_sites([400, 400], dp), plan("central", dp, epochs=5))
        assert five.trace[-1]["loss"] <= one.trace[-1]["loss"]

    def test_pooled_ledger_matches_direct_query(self):
        # the pooled site's ledger after five epochs equals the direct accountant query
        dp = DpSgdConfig(0.5, 100, 0.05)
        rng = np.random.default_rng(0)
        n = 27395
        data = SiteDataset(rng.normal(size=(n, D)), (rng.random(n) < 0.5).astype(float), "pool")
        site = Site.create(data, PrivacyBudget(math.inf), dp)
        site.ledger = accumulate(site.ledger, 5 * (n // 100))
        assert site.epsilon == pytest.approx(compute_epsilon(100 / n, 0.5, 1365)[0], rel=1e-12)


class TestCheckpoint:
    def test_roundtrip_and_layout(self, tmp_path):
        p = init_params(ARCH, 5)
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, p)
        raw = path.read_bytes()
        assert raw.startswith(CHECKPOINT_MAGIC)
        body = raw[-8 * ARCH.n_params:]
        np.testing.assert_array_equal(np.frombuffer(body, "<f8"), p.flatten())
        back = load_checkpoint(path)
        assert back.spec == ARCH
        assert back.flatten().tobytes() == p.flatten().tobytes()
        assert checkpoint_bytes(back) == raw

    def test_truncated(self, tmp_path):
        path = tmp_path / "c.ckpt"
        path.write_bytes(checkpoint_bytes(init_params(ARCH, 0))[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)


def test_nonfinite_weights_raise():
    dp = DpSgdConfig(0.0, 10, 1e300)
    sites = make_sites([100], dp)
    with pytest.raises(InvariantError):
        with np.errstate(all="ignore"):
            cyclical_train(sites, plan("distributed", dp, epochs=3))
