import numpy as np
import pytest

from covgam import mcd
from _oracles import dense_mvn_logpdf, fd_gradient, fd_jacobian, max_rel_err, random_spd


def random_eta(tables, rng, scale=1.0):
    return rng.uniform(-scale, scale, size=tables.q)


class TestIndexTables:
    def test_d2(self):
        t = mcd.build_index_tables(2)
        assert t.q == 5
        assert t.G.tolist() == [[5]]
        assert t.z.tolist() == [1] and t.w.tolist() == [2]
        # eta_5 sits at T[2, 1] (1-based), i.e. rows/cols (1, 0)
        assert t.rows.tolist() == [1] and t.cols.tolist() == [0]

    def test_d3(self):
        t = mcd.build_index_tables(3)
        assert t.q == 9
        assert t.G.tolist() == [[7, 0], [8, 9]]
        assert t.z.tolist() == [1, 1, 2]
        assert t.w.tolist() == [2, 3, 3]

    def test_d1_degenerate(self):
        t = mcd.build_index_tables(1)
        assert t.q == 2
        assert t.n_tril == 0

    @pytest.mark.parametrize("d", [2, 3, 5, 8])
    def test_g_entries_permutation(self, d):
        t = mcd.build_index_tables(d)
        vals = sorted(t.G[np.tril_indices(d - 1)].tolist())
        assert vals == list(range(2 * d + 1, t.q + 1))

    @pytest.mark.parametrize("d", [2, 4, 7])
    def test_zw_bounds(self, d):
        t = mcd.build_index_tables(d)
        assert np.all(1 <= t.z) and np.all(t.z < t.w) and np.all(t.w <= d)

    def test_bad_dimension(self):
        with pytest.raises(mcd.McdError):
            mcd.build_index_tables(0)


class TestEtaToCovariance:
    @pytest.mark.parametrize("d", [1, 2, 4])
    def test_zero_eta_gives_identity(self, d):
        t = mcd.build_index_tables(d)
        fac = mcd.eta_to_covariance(np.zeros(t.q), t)
        assert np.allclose(fac.Sigma[0], np.eye(d))
        assert np.allclose(fac.Sigma_inv[0], np.eye(d))

    def test_d2_worked_example(self):
        t = mcd.build_index_tables(2)
        fac = mcd.eta_to_covariance(np.array([0, 0, 0, 0, 0.5]), t)
        assert np.allclose(fac.Sigma_inv[0], [[1.25, 0.5], [0.5, 1.0]])
        assert np.allclose(fac.Sigma[0], [[1.0, -0.5], [-0.5, 1.25]])

    def test_positive_definite_fuzz(self):
        t = mcd.build_index_tables(6)
        rng = np.random.default_rng(42)
        eta = rng.uniform(-5, 5, size=(1000, t.q))
        Sigma = mcd.eta_to_covariance(eta, t).Sigma
        eig = np.linalg.eigvalsh(Sigma)
        assert np.all(eig[:, 0] > 0)

    def test_rejects_nonfinite(self):
        t = mcd.build_index_tables(2)
        eta = np.zeros(t.q)
        eta[3] = np.inf
        with pytest.raises(mcd.McdError):
            mcd.eta_to_covariance(eta, t)


class TestCovarianceToEta:
    def test_identity_maps_to_zero(self):
        t = mcd.build_index_tables(3)
        assert np.allclose(mcd.covariance_to_eta(np.eye(3), t), 0.0)

    def test_d2_hand_cholesky(self):
        t = mcd.build_index_tables(2)
        tail = mcd.covariance_to_eta(np.array([[1.0, -0.5], [-0.5, 1.25]]), t)
        assert np.allclose(tail, [0.0, 0.0, 0.5])

    def test_round_trip_random_spd(self):
        t = mcd.build_index_tables(5)
        rng = np.random.default_rng(7)
        for _ in range(25):
            Sigma = random_spd(5, rng)
            tail = mcd.covariance_to_eta(Sigma, t)
            eta = np.concatenate([np.zeros(5), tail])
            back = mcd.eta_to_covariance(eta, t).Sigma[0]
            assert np.max(np.abs(back - Sigma)) < 1e-10 * np.max(np.abs(Sigma))

    def test_eta_round_trip(self):
        # covariance_to_eta(eta_to_covariance(eta)) is the identity on the tail
        rng = np.random.default_rng(3)
        for d in (2, 4, 6):
            t = mcd.build_index_tables(d)
            eta = rng.uniform(-2, 2, size=t.q)
            Sigma = mcd.eta_to_covariance(eta, t).Sigma[0]
            tail = mcd.covariance_to_eta(Sigma, t)
            assert np.max(np.abs(tail - eta[d:])) < 1e-10

    def test_not_positive_definite(self):
        t = mcd.build_index_tables(2)
        with pytest.raises(mcd.McdError):
            mcd.covariance_to_eta(np.array([[1.0, 2.0], [2.0, 1.0]]), t)


class TestLogDensity:
    def test_standard_normal_at_mean(self):
        t = mcd.build_index_tables(1)
        assert mcd.log_density(np.array([0.0]), np.zeros(2), t) == pytest.approx(
            -0.9189385, abs=5e-8)

    def test_two_standard_normals(self):
        t = mcd.build_index_tables(2)
        assert mcd.log_density(np.zeros(2), np.zeros(5), t) == pytest.approx(
            -1.8378771, abs=5e-8)

    def test_d2_worked_value(self):
        t = mcd.build_index_tables(2)
        eta = np.array([0, 0, 0, 0, 0.5])
        ll = mcd.log_density(np.array([1.0, 1.0]), eta, t)
        assert ll == pytest.approx(-3.4628771, abs=5e-8)
        # quadratic form ||T r||^2 = 3.25 against the dense oracle
        Sigma = mcd.eta_to_covariance(eta, t).Sigma[0]
        assert ll == pytest.approx(dense_mvn_logpdf([1.0, 1.0], [0, 0], Sigma), abs=1e-12)

    @pytest.mark.parametrize("d", [1, 2, 3, 6])
    def test_matches_dense_oracle(self, d):
        t = mcd.build_index_tables(d)
        rng = np.random.default_rng(d)
        for _ in range(20):
            eta = random_eta(t, rng, scale=2.0)
            y = rng.standard_normal(d) * 2.0
            fac = mcd.eta_to_covariance(eta, t)
            want = dense_mvn_logpdf(y, eta[:d], fac.Sigma[0])
            assert mcd.log_density(y, eta, t) == pytest.approx(want, abs=1e-8)

    def test_vectorised_matches_scalar(self):
        t = mcd.build_index_tables(3)
        rng = np.random.default_rng(11)
        eta = rng.uniform(-1, 1, size=(8, t.q))
        y = rng.standard_normal((8, 3))
        batch = mcd.log_density(y, eta, t)
        singles = [mcd.log_density(y[i], eta[i], t) for i in range(8)]
        assert np.allclose(batch, singles)


class TestGradEta:
    def test_worked_d2(self):
        t = mcd.build_index_tables(2)
        g = mcd.grad_eta(np.array([1.0, 1.0]), np.array([0, 0, 0, 0, 0.5]), t)
        assert np.allclose(g, [1.75, 1.5, 0.0, 0.625, -1.5])

    def test_at_mean_with_identity_t(self):
        # r = 0: mean and T gradients vanish, log-variance gradients are -1/2
        for d in (1, 3, 5):
            t = mcd.build_index_tables(d)
            eta = np.zeros(t.q)
            eta[:d] = np.arange(d, dtype=float)
            eta[d:2 * d] = 0.3
            g = mcd.grad_eta(eta[:d].copy(), eta, t)
            assert np.allclose(g[:d], 0.0)
            assert np.allclose(g[d:2 * d], -0.5)
            assert np.allclose(g[2 * d:], 0.0)

    @pytest.mark.parametrize("d", [1, 2, 3, 5])
    def test_matches_fd(self, d):
        t = mcd.build_index_tables(d)
        rng = np.random.default_rng(100 + d)
        for _ in range(10):
            eta = random_eta(t, rng)
            y = rng.standard_normal(d)
            fd = fd_gradient(lambda e: mcd.log_density(y, e, t), eta)
            assert max_rel_err(mcd.grad_eta(y, eta, t), fd, floor=1e-4) < 1e-5


class TestHessEta:
    def test_worked_d1(self):
        t = mcd.build_index_tables(1)
        H = mcd.hess_eta(np.array([1.0]), np.zeros(2), t)
        assert np.allclose(H, [[-1.0, -1.0], [-1.0, -0.5]])

    def test_mu_block_is_negative_precision(self):
        t = mcd.build_index_tables(4)
        rng = np.random.default_rng(5)
        eta = random_eta(t, rng)
        y = rng.standard_normal(4)
        H = mcd.hess_eta(y, eta, t)
        prec = mcd.eta_to_covariance(eta, t).Sigma_inv[0]
        assert np.allclose(H[:4, :4], -prec)

    @pytest.mark.parametrize("d", [1, 2, 4])
    def test_matches_fd_of_grad(self, d):
        t = mcd.build_index_tables(d)
        rng = np.random.default_rng(200 + d)
        for _ in range(8):
            eta = random_eta(t, rng)
            y = rng.standard_normal(d)
            fd = fd_jacobian(lambda e: mcd.grad_eta(y, e, t), eta)
            H = mcd.hess_eta(y, eta, t)
            assert np.allclose(H, H.T)
            assert max_rel_err(H, 0.5 * (fd + fd.T), floor=1e-3) < 1e-4


class TestSigmaJacobian:
    def test_zero_for_mean_entries(self):
        t = mcd.build_index_tables(3)
        rng = np.random.default_rng(1)
        eta = random_eta(t, rng)
        for l in range(3):
            for m in range(3):
                J = mcd.sigma_jacobian(eta, t, l, m)
                assert np.allclose(J[:3], 0.0)

    def test_worked_d2_values(self):
        t = mcd.build_index_tables(2)
        eta = np.array([0, 0, 0, 0, 0.5])
        # Sigma_22 = eta5^2 exp(eta3) + exp(eta4): d/d eta3 = L21^2 e^{eta3} = 0.25
        assert mcd.sigma_jacobian(eta, t, 1, 1)[2] == pytest.approx(0.25)
        # Sigma_12 = -eta5 exp(eta3): d/d eta5 = -1
        assert mcd.sigma_jacobian(eta, t, 0, 1)[4] == pytest.approx(-1.0)

    @pytest.mark.parametrize("d", [2, 3, 5])
    def test_matches_fd(self, d):
        t = mcd.build_index_tables(d)
        rng = np.random.default_rng(300 + d)
        eta = random_eta(t, rng)
        for l in range(d):
            for m in range(l, d):
                fd = fd_gradient(
                    lambda e: mcd.eta_to_covariance(e, t).Sigma[0, l, m], eta)
                J = mcd.sigma_jacobian(eta, t, l, m)
                assert max_rel_err(J, fd, floor=1e-4) < 1e-5

    def test_index_out_of_range(self):
        t = mcd.build_index_tables(2)
        with pytest.raises(mcd.McdError):
            mcd.sigma_jacobian(np.zeros(5), t, 0, 2)


class TestCorrJacobian:
    def test_diagonal_identically_zero(self):
        t = mcd.build_index_tables(3)
        rng = np.random.default_rng(2)
        assert np.allclose(mcd.corr_jacobian(random_eta(t, rng), t, 1, 1), 0.0)

    def test_slope_at_zero(self):
        # Gamma_12 = -eta5 / sqrt(1 + eta5^2) has slope -1 at eta5 = 0
        t = mcd.build_index_tables(2)
        assert mcd.corr_jacobian(np.zeros(5), t, 0, 1)[4] == pytest.approx(-1.0)

    def test_matches_fd_d3(self):
        t = mcd.build_index_tables(3)
        rng = np.random.default_rng(9)
        eta = random_eta(t, rng)

        def gamma(e, l, m):
            S = mcd.eta_to_covariance(e, t).Sigma[0]
            return S[l, m] / np.sqrt(S[l, l] * S[m, m])

        for l in range(3):
            for m in range(l + 1, 3):
                fd = fd_gradient(lambda e: gamma(e, l, m), eta)
                assert max_rel_err(mcd.corr_jacobian(eta, t, l, m), fd, floor=1e-4) < 1e-5


class TestPermutationSanity:
    def test_d2_swap_is_representable(self):
        # Swapping the two responses changes the parametrisation but the
        # permuted covariance is reproduced exactly through the eta map.
        t = mcd.build_index_tables(2)
        rng = np.random.default_rng(21)
        P = np.array([[0.0, 1.0], [1.0, 0.0]])
        for _ in range(20):
            eta = random_eta(t, rng, scale=2.0)
            Sigma = mcd.eta_to_covariance(eta, t).Sigma[0]
            swapped = P @ Sigma @ P.T
            tail = mcd.covariance_to_eta(swapped, t)
            back = mcd.eta_to_covariance(np.concatenate([np.zeros(2), tail]), t).Sigma[0]
            assert np.max(np.abs(back - swapped)) < 1e-12


class TestSampling:
    def test_constant_identity_covariance(self):
        t = mcd.build_index_tables(2)
        rng = np.random.default_rng(99)
        eta = np.zeros((100_000, t.q))
        y = mcd.sample_responses(eta, t, rng)
        emp = np.cov(y.T)
        assert np.max(np.abs(emp - np.eye(2))) < 0.02

    def test_matches_requested_covariance(self):
        t = mcd.build_index_tables(3)
        rng = np.random.default_rng(17)
        eta = np.tile(rng.uniform(-1, 1, size=t.q), (200_000, 1))
        y = mcd.sample_responses(eta, t, rng)
        want = mcd.eta_to_covariance(eta[0], t).Sigma[0]
        emp = np.cov(y.T)
        assert np.max(np.abs(emp - want)) < 0.05 * np.max(np.abs(want))
