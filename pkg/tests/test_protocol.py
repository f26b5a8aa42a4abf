import numpy as np
import pytest

from bica import protocol as pr
from bica.neural import MLP, finite_difference_grad, softmax


def make_context(rng):
    dist = softmax(rng.normal(size=4))
    return pr.build_context(rewards=[-1.0, -1.0, -6.0], errors=[True, False],
                            policy_dist=dist, dist_bucket="mid", heading="E",
                            last_collision=True)


class TestGumbelSoftmax:
    def test_relaxed_is_distribution(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=8)
        g = pr.sample_gumbel(8, rng)
        relaxed = pr.gumbel_softmax(logits, 0.7, g)
        assert relaxed.sum() == pytest.approx(1.0)
        assert np.all(relaxed > 0)

    def test_low_temperature_approaches_one_hot(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=8)
        g = pr.sample_gumbel(8, rng)
        relaxed = pr.gumbel_softmax(logits, 1e-3, g)
        assert relaxed.max() > 0.999

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError):
            pr.gumbel_softmax(np.zeros(3), 0.0, np.zeros(3))

    def test_backward_matches_finite_differences(self):
        """With the noise frozen, d(relaxed)/d(logits) to 1e-4."""
        rng = np.random.default_rng(2)
        for tau in (0.5, 1.0, 2.0):
            logits = rng.normal(size=6)
            g = pr.sample_gumbel(6, rng)
            w = rng.normal(size=6)

            def f(lg):
                return float(w @ pr.gumbel_softmax(lg, tau, g))

            relaxed = pr.gumbel_softmax(logits, tau, g)
            analytic = pr.gumbel_softmax_backward(relaxed, tau, w)
            numeric = finite_difference_grad(f, logits)
            assert np.max(np.abs(analytic - numeric)) < 1e-4

    def test_straight_through_sample(self):
        rng = np.random.default_rng(3)
        gen = pr.make_generator(16, rng)
        ctx = make_context(rng)
        code, info = pr.sample_code(gen, ctx, tau=1.0, rng=rng)
        assert code.hard.sum() == pytest.approx(1.0)
        assert set(np.unique(code.hard)) <= {0.0, 1.0}
        assert np.argmax(code.hard) == np.argmax(code.relaxed)

    def test_end_to_end_generator_gradient(self):
        """Loss(relaxed(generator(ctx))) gradient through the full chain."""
        rng = np.random.default_rng(4)
        gen = pr.make_generator(8, rng)
        ctx = make_context(rng)
        x = pr.generator_input(ctx)
        g = pr.sample_gumbel(8, rng)
        tau = 0.8
        w = rng.normal(size=8)

        logits, cache = gen.forward(x)
        relaxed = pr.gumbel_softmax(logits, tau, g)
        dlogits = pr.gumbel_softmax_backward(relaxed, tau, w)
        grads, _ = gen.backward(cache, dlogits)

        flat0 = gen.flatten()

        def f(flat):
            gen.unflatten(flat)
            lg, _ = gen.forward(x)
            out = float(w @ pr.gumbel_softmax(lg, tau, g))
            gen.unflatten(flat0)
            return out

        numeric = finite_difference_grad(f, flat0)
        analytic = np.concatenate([grads[k].ravel()
                                   for k in gen.param_names()])
        denom = max(np.abs(numeric).max(), 1e-8)
        assert np.max(np.abs(analytic - numeric)) / denom < 1e-4


class TestAnnealing:
    def test_geometric_decay_with_floor(self):
        sched = pr.AnnealSchedule(tau_start=1.0, tau_end=0.5, gamma=0.9)
        tau = sched.tau_start
        taus = []
        for _ in range(50):
            tau = pr.anneal(sched, tau)
            taus.append(tau)
        assert taus[0] == pytest.approx(0.9)
        assert taus[-1] == pytest.approx(0.5)
        assert all(a >= b for a, b in zip(taus, taus[1:]))

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ValueError):
            pr.AnnealSchedule(tau_start=0.5, tau_end=1.0)


def plug_in_mutual_information(cond):
    """Independent oracle: I(X;M) from the joint p(x,m) = (1/n) p(m|x)."""
    cond = np.asarray(cond, dtype=float)
    n = cond.shape[0]
    joint = cond / n                      # uniform p(x)
    px = joint.sum(axis=1, keepdims=True)
    pm = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float(np.sum(joint[mask] *
                        np.log(joint[mask] / (px @ pm)[mask])))


class TestInformationBottleneck:
    def test_matches_plug_in_mi(self):
        """ib_loss equals the plug-in mutual information to 1e-9."""
        rng = np.random.default_rng(5)
        for _ in range(20):
            cond = softmax(rng.normal(size=(12, 9)) * 2)
            assert abs(pr.ib_loss(cond) -
                       plug_in_mutual_information(cond)) < 1e-9

    def test_two_point_ln2(self):
        """Two deterministic, distinct codes carry exactly ln 2 nats."""
        cond = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert pr.ib_loss(cond) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_identical_rows_zero(self):
        cond = np.tile(softmax(np.array([0.3, -0.2, 1.0])), (6, 1))
        assert pr.ib_loss(cond) == pytest.approx(0.0, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        cond = softmax(rng.normal(size=(5, 4)))
        analytic = pr.ib_loss_grad(cond)

        def f(flat):
            return pr.ib_loss(flat.reshape(5, 4))

        numeric = finite_difference_grad(f, cond.ravel()).reshape(5, 4)
        assert np.max(np.abs(analytic - numeric)) < 1e-6


class TestDecoder:
    def test_decode_is_distribution(self):
        rng = np.random.default_rng(7)
        gen = pr.make_generator(16, rng)
        dec = pr.make_decoder(16, rng)
        code, _ = pr.sample_code(gen, make_context(rng), 1.0, rng)
        dist, _ = pr.decode_message(dec, code)
        assert dist.shape == (pr.N_AI_TOKENS,)
        assert dist.sum() == pytest.approx(1.0)

    def test_context_requires_window(self):
        with pytest.raises(ValueError):
            pr.build_context([], [], np.ones(4) / 4, "near", "N", False)
