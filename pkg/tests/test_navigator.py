import numpy as np
import pytest

from bica import navigator as nav


class TestLatentWorld:
    def test_decode_shape_and_range(self):
        world = nav.LatentWorld(0)
        img = world.decode(np.zeros(nav.LATENT_DIM))
        assert img.shape == (nav.IMAGE_SIZE, nav.IMAGE_SIZE)
        assert np.all((img >= 0) & (img <= 1))

    def test_score_deterministic_and_bounded(self):
        world = nav.LatentWorld(1)
        rng = np.random.default_rng(2)
        for _ in range(20):
            z = rng.normal(size=nav.LATENT_DIM)
            s = world.score(z)
            assert 0.0 <= s <= 1.0
            assert s == world.score(z)

    def test_seeded_reproducibility(self):
        z = np.random.default_rng(3).normal(size=nav.LATENT_DIM)
        assert nav.LatentWorld(7).score(z) == nav.LatentWorld(7).score(z)
        assert np.array_equal(nav.LatentWorld(7).decode(z),
                              nav.LatentWorld(7).decode(z))


class TestLift:
    def test_exact_on_anchor(self):
        """Clicking exactly on an anchor's projection returns its latent."""
        rng = np.random.default_rng(4)
        anchor_z = rng.normal(size=(10, nav.LATENT_DIM))
        anchor_xy = rng.uniform(-1, 1, size=(10, 2))
        for i in range(10):
            got = nav.lift_click(anchor_xy[i], anchor_xy, anchor_z)
            assert np.array_equal(got, anchor_z[i])

    def test_interpolates_nearby(self):
        anchor_xy = np.array([[0.0, 0.0], [1.0, 0.0]])
        anchor_z = np.array([[0.0] * nav.LATENT_DIM, [1.0] * nav.LATENT_DIM])
        mid = nav.lift_click(np.array([0.5, 0.0]), anchor_xy, anchor_z, k=2)
        assert np.allclose(mid, 0.5)
        near = nav.lift_click(np.array([0.1, 0.0]), anchor_xy, anchor_z, k=2)
        assert np.all(near < 0.5)

    def test_empty_anchors_rejected(self):
        with pytest.raises(ValueError):
            nav.lift_click(np.zeros(2), np.zeros((0, 2)),
                           np.zeros((0, nav.LATENT_DIM)))


class TestSession:
    def test_click_contract(self):
        s = nav.NavSession.create(0)
        it = s.click([0.2, -0.3])
        assert it.image_id == 0
        assert 0.0 <= it.score <= 1.0
        assert 0.0 <= it.preference <= 1.0
        assert len(s.log) == 1
        # clicked latent becomes a new anchor
        assert s.anchor_z.shape[0] == nav.N_ANCHORS + 1

    def test_invalid_click_rejected(self):
        s = nav.NavSession.create(0)
        with pytest.raises(ValueError):
            s.click([0.1])
        with pytest.raises(ValueError):
            s.click([np.nan, 0.0])

    def test_budget_enforced(self):
        s = nav.NavSession.create(1)
        s.budget = 3
        for _ in range(3):
            nav.random_click(s)
        with pytest.raises(RuntimeError):
            s.click([0.0, 0.0])

    def test_default_budget_is_100(self):
        assert nav.INTERACTION_BUDGET == 100
        assert nav.NavSession.create(2).budget == 100

    def test_preference_tracks_score(self):
        """Preference is score plus bounded noise, so they correlate."""
        s = nav.NavSession.create(3)
        for _ in range(60):
            nav.random_click(s)
        scores = np.array([it.score for it in s.log])
        prefs = np.array([it.preference for it in s.log])
        assert np.corrcoef(scores, prefs)[0, 1] > 0.5
        assert np.max(np.abs(prefs - scores)) < 0.5


class TestSuggestions:
    def test_cold_start_covers_canvas(self):
        s = nav.NavSession.create(4)
        regions = s.suggest_regions()
        assert len(regions) == nav.N_SUGGESTIONS
        xs = sorted(r.center[0] for r in regions)
        assert xs[0] < -0.3 and xs[-1] > 0.3
        for r in regions:
            assert r.radius >= nav.MIN_REGION_RADIUS
            assert r.count == 0

    def test_regions_follow_observed_quality(self):
        """Seeding high scores in one quadrant pulls a suggestion there."""
        s = nav.NavSession.create(5)
        rng = np.random.default_rng(6)
        for _ in range(50):
            xy = rng.uniform(0.3, 0.95, size=2)
            s.log.append(nav.Interaction(
                regions=[], click_xy=xy, z=np.zeros(nav.LATENT_DIM),
                image_id=len(s.log), score=0.95, preference=0.95))
        for _ in range(50):
            xy = rng.uniform(-0.95, -0.3, size=2)
            s.log.append(nav.Interaction(
                regions=[], click_xy=xy, z=np.zeros(nav.LATENT_DIM),
                image_id=len(s.log), score=0.05, preference=0.05))
        top = s.suggest_regions()[0]
        assert top.center[0] > 0 and top.center[1] > 0
        assert top.expected > 0.9

    def test_exploration_bonus_favors_unvisited(self):
        s = nav.NavSession.create(7)
        # one mediocre, heavily sampled cell
        for _ in range(80):
            s.log.append(nav.Interaction(
                regions=[], click_xy=np.array([0.17, 0.17]),
                z=np.zeros(nav.LATENT_DIM), image_id=len(s.log),
                score=0.55, preference=0.55))
        regions = s.suggest_regions()
        # unvisited cells (prior 0.5 + full bonus ~= 0.8) outrank the
        # exploited cell (0.55 + tiny bonus)
        assert any(r.count == 0 for r in regions)


class TestPairedOrdering:
    """Greedy must beat random on both exploration efficiency and discovery
    rate in at least 9 of 10 paired seeds."""

    def test_greedy_beats_random(self):
        n_clicks = 60
        eff_wins = disc_wins = 0
        for seed in range(10):
            g = nav.run_session(seed, n_clicks=n_clicks, policy="greedy")
            r = nav.run_session(seed, n_clicks=n_clicks, policy="random")
            mg, mr = nav.session_metrics(g), nav.session_metrics(r)
            eff_wins += (mg["exploration_efficiency"]
                         > mr["exploration_efficiency"])
            disc_wins += mg["discovery_rate"] > mr["discovery_rate"]
        assert eff_wins >= 9
        assert disc_wins >= 9


class TestSessionMetrics:
    def test_keys_and_ranges(self):
        s = nav.run_session(11, n_clicks=30, policy="greedy")
        m = nav.session_metrics(s)
        for key in ("exploration_efficiency", "representation_cca",
                    "preference_correlation", "discovery_rate",
                    "cognitive_compatibility", "best_score"):
            assert key in m
        assert 0.0 <= m["discovery_rate"] <= 1.0
        assert 0.0 <= m["cognitive_compatibility"] <= 1.0
        assert -1.0 <= m["preference_correlation"] <= 1.0
        assert m["exploration_efficiency"] > 0

    def test_empty_session_rejected(self):
        with pytest.raises(ValueError):
            nav.session_metrics(nav.NavSession.create(12))

    def test_probe_quantiles_fixed_per_world(self):
        w = nav.LatentWorld(13)
        assert nav.probe_quantiles(w) == nav.probe_quantiles(w)


class TestVaeObjective:
    def test_beta_default_is_four(self):
        assert nav.BETA_VAE == 4.0
        assert nav.vae_loss(1.0, 0.25) == pytest.approx(1.0 + 4.0 * 0.25)

    def test_recon_plus_beta_kl(self):
        assert nav.vae_loss(0.5, 0.1, beta=2.0) == pytest.approx(0.7)
        with pytest.raises(ValueError):
            nav.vae_loss(-0.1, 0.0)

    def test_gaussian_kl_closed_form(self):
        assert nav.gaussian_kl_to_standard(
            np.zeros(4), np.zeros(4)) == pytest.approx(0.0)
        mu = np.array([1.0, -2.0])
        logvar = np.array([0.5, -0.3])
        want = 0.5 * np.sum(np.exp(logvar) + mu ** 2 - 1.0 - logvar)
        assert nav.gaussian_kl_to_standard(mu, logvar) == pytest.approx(want)
