"""Interaction priors: LSGAN losses, noise schedule, diffusion sampling."""

import numpy as np
import pytest

from artipose import autodiff as ad
from artipose import priors
from artipose.errors import BadTimestep, PartCountMismatch, ShapeMismatch
from artipose.geometry import OrientedBox, SimilarityTransform, rot6d_to_matrix, transform_box
from helpers import rel_err


def random_layout(rng, parts=2):
    boxes = []
    for _ in range(parts):
        box = OrientedBox.from_extents(rng.uniform(0.05, 0.3, 3))
        pose = SimilarityTransform(
            rot6d_to_matrix(rng.normal(size=6)), rng.normal(size=3) * 0.3, 1.0
        )
        boxes.append(transform_box(box, pose).vertices)
    return np.stack(boxes)


class _StubDisc:
    """Discriminator stub with a fixed response, for exact loss checks."""

    def __init__(self, value_fn):
        self.value_fn = value_fn

    def score(self, layout):
        return self.value_fn(layout)


class TestDiscriminator:
    def test_translation_scale_invariance(self):
        rng = np.random.default_rng(0)
        disc = priors.Discriminator.create(2, seed=1)
        layout = random_layout(rng)
        base = disc.score(layout)
        moved = disc.score(3.0 * layout + np.array([0.5, -0.2, 1.0]))
        assert moved == pytest.approx(base, abs=1e-5)

    def test_rotation_changes_score(self):
        rng = np.random.default_rng(1)
        disc = priors.Discriminator.create(2, seed=1)
        layout = random_layout(rng)
        rotated, _ = priors.corrupt_layout(layout, rng, rot_deg=40.0)
        assert disc.score(rotated) != pytest.approx(disc.score(layout), abs=1e-9)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        disc = priors.Discriminator.create(3, seed=5)
        layout = random_layout(rng, parts=3)
        assert disc.score(layout) == disc.score(layout)

    def test_part_count_mismatch(self):
        rng = np.random.default_rng(3)
        disc = priors.Discriminator.create(2, seed=1)
        with pytest.raises(PartCountMismatch):
            disc.score(random_layout(rng, parts=3))


class TestGanLosses:
    def test_perfect_discriminator_zero_loss(self):
        disc = _StubDisc(lambda lay: 1.0 if lay[0] > 0 else 0.0)
        real = [np.ones(1), np.ones(1)]
        fake = [-np.ones(1)]
        assert priors.d_loss(disc, real, fake) == 0.0

    def test_zero_everywhere_loss_one(self):
        disc = _StubDisc(lambda lay: 0.0)
        assert priors.d_loss(disc, [np.zeros(1)], [np.zeros(1)]) == 1.0

    def test_adv_extremes(self):
        assert priors.g_adv_loss(_StubDisc(lambda l: 1.0), [np.zeros(1)] * 3) == 0.0
        assert priors.g_adv_loss(_StubDisc(lambda l: 0.0), [np.zeros(1)] * 3) == 1.0

    def test_matches_recomputation(self):
        rng = np.random.default_rng(4)
        values = {}
        disc = _StubDisc(lambda lay: values[lay.tobytes()])
        real, fake = [], []
        for _ in range(5):
            a, b = rng.normal(size=2), rng.normal(size=2)
            values[a.tobytes()] = float(a.sum())
            values[b.tobytes()] = float(b.sum())
            real.append(a)
            fake.append(b)
        expect_d = np.mean([(values[a.tobytes()] - 1) ** 2 for a in real]) + np.mean(
            [values[b.tobytes()] ** 2 for b in fake]
        )
        expect_g = np.mean([(values[b.tobytes()] - 1) ** 2 for b in fake])
        assert priors.d_loss(disc, real, fake) == pytest.approx(expect_d, abs=1e-12)
        assert priors.g_adv_loss(disc, fake) == pytest.approx(expect_g, abs=1e-12)

    def test_graph_matches_scalar_path(self):
        rng = np.random.default_rng(5)
        disc = priors.Discriminator.create(2, seed=2)
        real = np.stack([random_layout(rng) for _ in range(3)])
        fake = np.stack([random_layout(rng) for _ in range(4)])
        tape = ad.Tape()
        graph = float(priors.d_loss_graph(disc, tape, real, fake).data)
        scalar = priors.d_loss(disc, list(real), list(fake))
        assert rel_err(graph, scalar) < 1e-5  # float32 graph vs float64 scalars

        tape = ad.Tape()
        fakes_v = [ad.const(f, tape) for f in fake]
        g_graph = float(priors.g_adv_loss_graph(disc, tape, fakes_v).data)
        assert rel_err(g_graph, priors.g_adv_loss(disc, list(fake))) < 1e-6


class TestNoiseSchedule:
    def test_linear_schedule_invariants(self):
        sched = priors.NoiseSchedule.linear(100)
        assert sched.T == 100
        assert (np.diff(sched.betas) > 0).all()
        ab = sched.alpha_bars
        assert ab[0] == pytest.approx(1 - sched.betas[0])
        assert (np.diff(ab) < 0).all()
        assert ab[-1] < ab[0]

    def test_bad_timestep(self):
        sched = priors.NoiseSchedule.linear(10)
        with pytest.raises(BadTimestep):
            sched.check_t(0)
        with pytest.raises(BadTimestep):
            sched.check_t(11)


class TestQSample:
    def test_small_t_stays_close(self):
        sched = priors.NoiseSchedule.linear(100)
        x0 = priors.encode_contact(np.array([1, 0, 1, 1]))
        eps = np.random.default_rng(0).standard_normal(x0.shape)
        x1 = priors.q_sample(x0, 1, eps, sched)
        assert np.all(np.abs(x1 - x0) <= np.sqrt(sched.betas[0]) * np.abs(eps) + 1e-6)

    def test_zero_noise_exact(self):
        sched = priors.NoiseSchedule.linear(50)
        x0 = priors.encode_contact(np.array([0, 1]))
        for t in (1, 25, 50):
            xt = priors.q_sample(x0, t, np.zeros_like(x0), sched)
            assert np.allclose(xt, np.sqrt(sched.alpha_bars[t - 1]) * x0)

    def test_monte_carlo_marginal(self):
        sched = priors.NoiseSchedule.linear(100)
        rng = np.random.default_rng(1)
        x0 = np.full((1, 1), 1.0)
        t = 60
        draws = np.array(
            [priors.q_sample(x0, t, rng.standard_normal((1, 1)), sched)[0, 0] for _ in range(10_000)]
        )
        ab = sched.alpha_bars[t - 1]
        mean_expect = np.sqrt(ab)
        var_expect = 1 - ab
        se_mean = np.sqrt(var_expect / len(draws))
        assert abs(draws.mean() - mean_expect) < 3 * se_mean
        se_var = var_expect * np.sqrt(2.0 / (len(draws) - 1))
        assert abs(draws.var() - var_expect) < 3 * se_var

    def test_shape_mismatch(self):
        sched = priors.NoiseSchedule.linear(10)
        with pytest.raises(ShapeMismatch):
            priors.q_sample(np.zeros((3, 1)), 2, np.zeros((4, 1)), sched)


class TestDiffLoss:
    def test_stub_denoiser_zero(self):
        # denoiser that reproduces the drawn noise exactly -> loss 0
        diffuser = priors.ContactDiffuser.create(4, 0, priors.NoiseSchedule.linear(10))
        rng = np.random.default_rng(2)
        z = rng.normal(size=(20, 4))
        x0 = priors.encode_contact(rng.integers(0, 2, 20))
        eps = rng.standard_normal((20, 1))

        class Stub(priors.ContactDiffuser):
            def denoise_graph(self, tape, zv, x_t, t):
                return ad.const(eps, tape)

        stub = Stub(4, diffuser.store, diffuser.schedule)
        tape = ad.Tape()
        out = priors.diff_loss_graph(stub, tape, ad.const(z, tape), x0, 5, eps)
        assert float(out.data) == 0.0

    def test_zero_denoiser_loss_near_one(self):
        diffuser = priors.ContactDiffuser.create(8, 0, priors.NoiseSchedule.linear(10))
        for name in diffuser.store.names():
            diffuser.store.params[name][...] = 0.0
        rng = np.random.default_rng(3)
        n = 4000
        z = rng.normal(size=(n, 8)).astype(np.float32)
        x0 = priors.encode_contact(rng.integers(0, 2, n))
        loss = priors.diff_loss(diffuser, z, x0, np.random.default_rng(9))
        assert abs(loss - 1.0) < 0.1  # X^2_n / n concentrates near 1

    def test_row_mismatch(self):
        diffuser = priors.ContactDiffuser.create(4, 0, priors.NoiseSchedule.linear(10))
        tape = ad.Tape()
        with pytest.raises(ShapeMismatch):
            priors.diff_loss_graph(
                diffuser, tape, ad.const(np.zeros((5, 4)), tape), np.zeros((6, 1)), 3,
                np.zeros((6, 1)),
            )


class TestSampler:
    def test_deterministic_under_seed(self):
        diffuser = priors.ContactDiffuser.create(8, 1, priors.NoiseSchedule.linear(20))
        z = np.random.default_rng(4).normal(size=(50, 8)).astype(np.float32)
        m1, c1 = priors.sample_contact_map(diffuser, z, generations=1, seed=7)
        m2, c2 = priors.sample_contact_map(diffuser, z, generations=1, seed=7)
        assert (m1 == m2).all() and (c1 == c2).all()
        m3, _ = priors.sample_contact_map(diffuser, z, generations=1, seed=8)
        assert (m1 != m3).any()

    def test_zero_denoiser_is_fair_coin(self):
        diffuser = priors.ContactDiffuser.create(4, 1, priors.NoiseSchedule.linear(100))
        for name in diffuser.store.names():
            diffuser.store.params[name][...] = 0.0
        z = np.zeros((10_000, 4), dtype=np.float32)
        m, conf = priors.sample_contact_map(diffuser, z, generations=1, seed=3)
        # the final x0 is zero-mean noise: ones rate must hover around 1/2
        assert 0.45 < m.mean() < 0.55

    def test_perfect_denoiser_single_step_identity(self):
        # T = 1: a denoiser that returns the true injected noise reconstructs
        # x0 exactly in one reverse step (algebraic identity)
        sched = priors.NoiseSchedule.linear(1, lo=0.3, hi=0.4)
        assert sched.T == 1
        rng = np.random.default_rng(5)
        x0 = priors.encode_contact(rng.integers(0, 2, 30))
        eps = rng.standard_normal(x0.shape)
        x1 = priors.q_sample(x0, 1, eps, sched)
        beta = sched.betas[0]
        ab = sched.alpha_bars[0]
        rec = (x1 - beta / np.sqrt(1 - ab) * eps) / np.sqrt(1 - beta)
        assert np.allclose(rec, x0, atol=1e-12)

    def test_multi_generation_variance_shrinks(self):
        diffuser = priors.ContactDiffuser.create(4, 2, priors.NoiseSchedule.linear(30))
        z = np.random.default_rng(6).normal(size=(40, 4)).astype(np.float32)
        single = np.stack(
            [priors.sample_contact_map(diffuser, z, 1, seed=s)[1] for s in range(12)]
        )
        multi = np.stack(
            [priors.sample_contact_map(diffuser, z, 5, seed=100 + s)[1] for s in range(12)]
        )
        assert multi.var(axis=0).mean() < single.var(axis=0).mean()


class TestTotalLoss:
    def test_zero_weights(self):
        assert priors.total_loss(2.5, 9.0, 7.0, 0.0, 0.0) == 2.5

    def test_unit_case(self):
        assert priors.total_loss(1.0, 1.0, 1.0, 1.0, 1.0) == 3.0

    def test_matches_recomputation(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p, a, d, la, ld = rng.normal(size=5)
            expect = p + la * a + ld * d
            assert priors.total_loss(p, a, d, la, ld) == pytest.approx(expect, abs=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            priors.total_loss(np.nan, 0.0, 0.0, 1.0, 1.0)


class TestCorruption:
    def test_pinned_rotation_magnitude(self):
        rng = np.random.default_rng(8)
        layout = random_layout(rng, parts=3)
        corrupted, p = priors.corrupt_layout(layout, rng, rot_deg=20.0)
        untouched = [q for q in range(3) if q != p]
        for q in untouched:
            assert np.allclose(corrupted[q], layout[q])
        # corrupted part keeps its center but moves its corners
        assert np.allclose(corrupted[p].mean(axis=0), layout[p].mean(axis=0), atol=1e-9)
        assert not np.allclose(corrupted[p], layout[p])

    def test_pinned_offset_magnitude(self):
        rng = np.random.default_rng(9)
        layout = random_layout(rng, parts=2)
        corrupted, p = priors.corrupt_layout(layout, rng, offset=0.1)
        delta = corrupted[p] - layout[p]
        assert np.allclose(np.linalg.norm(delta, axis=1), 0.1, atol=1e-9)
