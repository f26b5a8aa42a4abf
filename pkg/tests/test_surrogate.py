import numpy as np
import pytest

from bica import gridworld as gw
from bica import surrogate as su


def make_view(pose=(4, 4), goal=(1, 6), heading="N", size=8, step=0):
    obstacles = np.zeros((size, size), dtype=bool)
    return gw.FullView(obstacles=obstacles, pose=pose, heading=heading,
                       goal=goal, step_count=step)


class TestContexts:
    def test_distance_buckets(self):
        assert su.distance_bucket(make_view(pose=(4, 4), goal=(4, 6))) == "near"
        assert su.distance_bucket(make_view(pose=(4, 4), goal=(1, 6))) == "mid"
        assert su.distance_bucket(make_view(pose=(0, 0), goal=(7, 7))) == "far"

    def test_quadrants(self):
        assert su.goal_quadrant(make_view(pose=(4, 4), goal=(4, 4))) == "HERE"
        assert su.goal_quadrant(make_view(pose=(4, 4), goal=(1, 4))) == "N"
        assert su.goal_quadrant(make_view(pose=(4, 4), goal=(1, 6))) == "NE"
        assert su.goal_quadrant(make_view(pose=(4, 4), goal=(6, 2))) == "SW"

    def test_context_key_depends_on_ai_message_class(self):
        v = make_view()
        k1 = su.context_key(v, gw.EMPTY_AI_MESSAGE)
        k2 = su.context_key(v, gw.Message("ai", ("REQ-DIR",)))
        assert k1 != k2

    def test_initial_table_covers_all_contexts(self):
        cfg = su.SurrogateConfig()
        table = su.build_initial_table(cfg)
        expected = (len(su.DIST_BUCKETS) * len(su.QUADRANTS)
                    * len(su.AI_CLASSES))
        assert len(table.entries) == expected
        for entry in table.entries.values():
            assert entry.shape == (su.N_MESSAGES,)
            assert entry.sum() == pytest.approx(1.0)
            assert np.all(entry >= 0)


class TestNoiseCalibration:
    """Measured corruption frequencies must match the configured rates."""

    N = 20000

    def _flip_rate(self, cfg, mode, rng):
        flips = 0
        for _ in range(self.N):
            msg = gw.Message("human", ("N", "J"))
            noisy = su.apply_noise(msg, cfg, mode, rng)
            flips += sum(a != b for a, b in zip(msg.tokens, noisy.tokens))
        return flips / (2 * self.N)

    def test_token_flip_rate_nominal(self):
        cfg = su.SurrogateConfig()
        rate = self._flip_rate(cfg, "nominal", np.random.default_rng(0))
        assert abs(rate - 0.05) < 0.01

    def test_token_flip_rate_shifted(self):
        cfg = su.SurrogateConfig()
        rate = self._flip_rate(cfg, "shifted_unguided", np.random.default_rng(1))
        assert abs(rate - 0.10) < 0.01

    def test_count_drift_rate_and_clamping(self):
        cfg = su.SurrogateConfig()
        rng = np.random.default_rng(2)
        drifts = 0
        for _ in range(self.N):
            noisy = su.apply_noise(gw.Message("human", ("2",)), cfg,
                                   "nominal", rng)
            tok = noisy.tokens[0]
            assert tok in su.HUMAN_COUNTS
            drifts += tok != "2"
        assert abs(drifts / self.N - 0.05) < 0.01
        for _ in range(200):
            tok = su.apply_noise(gw.Message("human", ("1",)), cfg,
                                 "nominal", rng).tokens[0]
            assert tok in ("1", "2")

    def test_flips_stay_within_category(self):
        cfg = su.SurrogateConfig(token_flip=1.0)
        rng = np.random.default_rng(3)
        for _ in range(200):
            noisy = su.apply_noise(gw.Message("human", ("N", "J")), cfg,
                                   "nominal", rng)
            assert noisy.tokens[0] in gw.HUMAN_DIRECTIONS
            assert noisy.tokens[0] != "N"
            assert noisy.tokens[1] in gw.HUMAN_LANDMARKS
            assert noisy.tokens[1] != "J"

    def test_update_frequency_binomial(self):
        """Observed table-update count within 3 sigma of Binomial(n, 0.1)."""
        cfg = su.SurrogateConfig()
        rng = np.random.default_rng(4)
        state = su.make_human_state(cfg)
        n = 5000
        changed = 0
        view = make_view()
        for _ in range(n):
            state, did = su.update_protocol_table(
                state, "protocol_hint", view, cfg, rng,
                payload="protocol:direction")
            changed += did
        mean = n * cfg.p_update
        sigma = np.sqrt(n * cfg.p_update * (1 - cfg.p_update))
        assert abs(changed - mean) <= 3 * sigma

    def test_invalid_probability_rejected(self):
        with pytest.raises(ValueError):
            su.SurrogateConfig(p_update=1.5)


class TestTableAdaptation:
    def test_update_shifts_mass_toward_suggestion(self):
        cfg = su.SurrogateConfig()
        rng = np.random.default_rng(5)
        state = su.make_human_state(cfg)
        view = make_view(pose=(4, 4), goal=(1, 4))  # goal due north
        ctx = su.context_key(view, gw.EMPTY_AI_MESSAGE)
        before = state.table.entries[ctx].copy()
        target = su.suggested_message("protocol_hint", view,
                                      "protocol:direction")
        tgt_idx = su.MESSAGE_INDEX[target]
        state2, changed = su.update_protocol_table(
            state, "protocol_hint", view, cfg, rng,
            payload="protocol:direction", p_update=1.0)
        assert changed
        after = state2.table.entries[ctx]
        assert after[tgt_idx] > before[tgt_idx]
        assert after.sum() == pytest.approx(1.0)
        assert state2.table.version == state.table.version + 1
        # the original state is untouched (functional update)
        assert np.array_equal(state.table.entries[ctx], before)

    def test_update_is_gated_by_probability(self):
        cfg = su.SurrogateConfig()
        rng = np.random.default_rng(6)
        state = su.make_human_state(cfg)
        _, changed = su.update_protocol_table(
            state, "protocol_hint", make_view(), cfg, rng,
            payload="protocol:direction", p_update=0.0)
        assert not changed


class TestActing:
    def test_scripted_fallback_without_nets(self):
        cfg = su.SurrogateConfig()
        rng = np.random.default_rng(7)
        state = su.make_human_state(cfg)
        view = make_view(pose=(4, 4), goal=(1, 4))
        msg, state2, info = su.surrogate_act(
            state, None, view, gw.EMPTY_AI_MESSAGE, 0, cfg, rng)
        assert msg.side == "human"
        assert 0 < len(msg.tokens) <= gw.MAX_TOKENS_PER_MESSAGE

    def test_message_distribution_table_only(self):
        cfg = su.SurrogateConfig()
        state = su.make_human_state(cfg)
        view = make_view()
        ctx = su.context_key(view, gw.EMPTY_AI_MESSAGE)
        dist = su.message_distribution(state, None, ctx, cfg)
        assert np.array_equal(dist, state.table.entries[ctx])

    def test_nets_modulate_distribution(self):
        cfg = su.SurrogateConfig()
        rng = np.random.default_rng(8)
        nets = su.SurrogateNets.create(rng)
        state = su.make_human_state(cfg)
        state = su.HumanState(hidden=rng.normal(size=su.HIDDEN_SIZE),
                              table=state.table, noise_mode=state.noise_mode)
        view = make_view()
        ctx = su.context_key(view, gw.EMPTY_AI_MESSAGE)
        dist = su.message_distribution(state, nets, ctx, cfg)
        assert dist.sum() == pytest.approx(1.0)
        assert not np.allclose(dist, state.table.entries[ctx])

    def test_correct_directions(self):
        dirs = su.correct_directions(make_view(pose=(4, 4), goal=(1, 6)))
        assert set(dirs) == {"N", "E"}
        dirs = su.correct_directions(make_view(pose=(4, 4), goal=(6, 4)))
        assert set(dirs) == {"S"}
