import itertools

import numpy as np
import pytest

from bica import alignment as al
from bica.neural import finite_difference_grad


def brute_force_w2_sq(A, B):
    """Independent oracle: enumerate all n! matchings (n <= 6)."""
    n = A.shape[0]
    diff = A[:, None, :] - B[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, cost[np.arange(n), perm].sum())
    return best / n


class TestWasserstein:
    @pytest.mark.parametrize("n,d", [(2, 1), (3, 2), (4, 3), (5, 2), (6, 4)])
    def test_matches_brute_force(self, n, d):
        """Assignment-based W2^2 vs factorial enumeration, rel err < 1e-9."""
        rng = np.random.default_rng(n * 10 + d)
        for _ in range(5):
            A = rng.normal(size=(n, d))
            B = rng.normal(size=(n, d)) + rng.normal(size=d)
            got = al.wasserstein2_sq(A, B)
            want = brute_force_w2_sq(A, B)
            assert abs(got - want) <= 1e-9 * max(abs(want), 1.0)

    def test_identity_is_zero(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(5, 3))
        assert al.wasserstein2_sq(A, A.copy()) == pytest.approx(0.0, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(6, 2))
        B = rng.normal(size=(6, 2))
        perm = rng.permutation(6)
        assert al.wasserstein2_sq(A, B) == pytest.approx(
            al.wasserstein2_sq(A, B[perm]), abs=1e-12)

    def test_translation(self):
        """W2^2 between a cloud and its translate is the squared shift."""
        rng = np.random.default_rng(2)
        A = rng.normal(size=(6, 3))
        shift = np.array([1.0, -2.0, 0.5])
        got = al.wasserstein2_sq(A, A + shift)
        assert got == pytest.approx(float(shift @ shift), rel=1e-12)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            al.wasserstein2_sq(np.zeros((3, 2)), np.zeros((4, 2)))
        with pytest.raises(ValueError):
            al.wasserstein2_sq(np.zeros((0, 2)), np.zeros((0, 2)))

    def test_gradient_matches_finite_differences(self):
        """Envelope-theorem gradient vs central differences (fixed matching
        stays optimal for small perturbations)."""
        rng = np.random.default_rng(3)
        A = rng.normal(size=(5, 3))
        B = rng.normal(size=(5, 3)) * 2
        analytic = al.wasserstein2_sq_grad(A, B)

        def f(flat):
            return al.wasserstein2_sq(flat.reshape(5, 3), B)

        numeric = finite_difference_grad(f, A.ravel()).reshape(5, 3)
        assert np.max(np.abs(analytic - numeric)) < 1e-5


class TestCCA:
    def test_linear_map_gives_rho_one(self):
        """Exactly linearly related batches: top correlation 1 within 1e-6."""
        rng = np.random.default_rng(4)
        X = rng.normal(size=(400, 6))
        M = rng.normal(size=(6, 6)) + 3 * np.eye(6)
        Y = X @ M
        assert abs(al.cca_corr(X, Y, ridge=0.0) - 1.0) < 1e-6
        # the default ridge keeps the estimator within estimator tolerance
        assert al.cca_corr(X, Y) > 0.999

    def test_independent_batches_low(self):
        """Independent noise: top canonical correlation below 0.2."""
        rng = np.random.default_rng(5)
        X = rng.normal(size=(2000, 5))
        Y = rng.normal(size=(2000, 5))
        assert al.cca_corr(X, Y) < 0.2

    def test_invariance_to_affine_reparameterization(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(300, 4))
        Y = X @ (rng.normal(size=(4, 4)) + 2 * np.eye(4)) + 1.5
        S = rng.normal(size=(4, 4)) + 2 * np.eye(4)
        base = al.cca_corr(X, Y)
        rep = al.cca_corr(X @ S + 0.3, Y)
        assert base == pytest.approx(rep, abs=1e-4)

    def test_bounded(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(100, 3))
        Y = 0.5 * X + rng.normal(size=(100, 3))
        rho = al.cca_corr(X, Y)
        assert 0.0 <= rho <= 1.0 + 1e-9


class TestRepLoss:
    def test_total_combines_w2_and_cca(self):
        rng = np.random.default_rng(8)
        z_h = rng.normal(size=(64, al.LATENT_DIM))
        z_a = rng.normal(size=(64, al.LATENT_DIM))
        mapped = rng.normal(size=(64, al.LATENT_DIM))
        batch = al.LatentBatch(z_h=z_h, z_a=z_a, mapped=mapped)
        parts = al.rep_loss(batch)
        assert parts.total == pytest.approx(
            parts.w2_sq + (1.0 - parts.cca_rho))

    def test_mapped_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        z_h = rng.normal(size=(6, al.LATENT_DIM))
        z_a = rng.normal(size=(6, al.LATENT_DIM))
        mapped = rng.normal(size=(6, al.LATENT_DIM))
        batch = al.LatentBatch(z_h=z_h, z_a=z_a, mapped=mapped)
        analytic = al.rep_loss_mapped_grad(batch)

        def f(flat):
            return al.wasserstein2_sq(flat.reshape(6, al.LATENT_DIM), z_h)

        numeric = finite_difference_grad(f, mapped.ravel()) \
            .reshape(6, al.LATENT_DIM)
        assert np.max(np.abs(analytic - numeric)) < 1e-5


class TestHSIC:
    def test_dependent_exceeds_independent(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(150, 3))
        dep = al.hsic_rbf(X, X + 0.1 * rng.normal(size=(150, 3)))
        ind = al.hsic_rbf(X, rng.normal(size=(150, 3)))
        assert dep > ind

    def test_permutation_pvalue_detects_dependence(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(80, 2))
        Y = X ** 2 + 0.05 * rng.normal(size=(80, 2))
        p = al.hsic_permutation_pvalue(X, Y, n_perm=100,
                                       rng=np.random.default_rng(12))
        assert p < 0.05

    def test_permutation_pvalue_null_uniformish(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(60, 2))
        Y = rng.normal(size=(60, 2))
        p = al.hsic_permutation_pvalue(X, Y, n_perm=100,
                                       rng=np.random.default_rng(14))
        assert p > 0.05

    def test_median_bandwidth_positive(self):
        rng = np.random.default_rng(15)
        assert al.median_bandwidth(rng.normal(size=(50, 4))) > 0


class TestEncoders:
    def test_shapes_and_mapping(self):
        rng = np.random.default_rng(16)
        enc = al.LatentEncoders.create(rng, human_in=10, ai_in=8)
        z_h, z_a = enc.encode_step(rng.normal(size=10),
                                   np.zeros(al.LATENT_DIM),
                                   rng.normal(size=8))
        assert z_h.shape == z_a.shape == (al.LATENT_DIM,)
        mapped, _ = enc.map_latents(z_h)
        assert mapped.shape == (al.LATENT_DIM,)

    def test_mlp_mapper_option(self):
        rng = np.random.default_rng(17)
        enc = al.LatentEncoders.create(rng, human_in=4, ai_in=4,
                                       mapper_type="mlp")
        mapped, _ = enc.map_latents(rng.normal(size=al.LATENT_DIM))
        assert mapped.shape == (al.LATENT_DIM,)
