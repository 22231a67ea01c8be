"""Model families against exact oracles: Kalman, forward algorithm, closed forms."""

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

import particlevi.autodiff as ad
from particlevi import models as mo
from particlevi.distributions import DiagGaussian, diag_gauss_logpdf, gauss_product_fuse
from particlevi.rng import RngStream


class TestLgssmMake:
    def test_transition_matrix_formula(self):
        m = mo.lgssm_make(2, 2, 0.5, "sparse", RngStream(0))
        assert np.allclose(m.a, [[0.5, 0.25], [0.25, 0.5]])

    def test_sparse_c_is_diagonal_embedding(self):
        m = mo.lgssm_make(3, 2, 0.42, "sparse", RngStream(0))
        assert np.array_equal(m.c, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    def test_alpha_zero_annihilates(self):
        m = mo.lgssm_make(3, 3, 0.0, "sparse", RngStream(0))
        assert np.all(m.a == 0.0)

    def test_dense_c_is_seeded(self):
        a = mo.lgssm_make(2, 4, 0.42, "dense", RngStream(7)).c
        b = mo.lgssm_make(2, 4, 0.42, "dense", RngStream(7)).c
        assert np.array_equal(a, b)
        assert a.shape == (4, 2)

    def test_sparse_needs_dy_at_most_dx(self):
        with pytest.raises(ValueError):
            mo.lgssm_make(2, 3, 0.42, "sparse", RngStream(0))


class TestKalman:
    def test_t1_closed_form(self):
        """T=1, C=1, R=1, prior N(0,1): y ~ N(0,2)."""
        m = mo.Lgssm(np.asarray([[0.7]]), np.asarray([[1.0]]), np.ones(1), np.ones(1))
        ll = mo.kalman_loglik(m, np.zeros((1, 1)))
        assert abs(ll - (-0.5 * math.log(4 * math.pi))) < 1e-12

    def test_a_zero_independence(self):
        m = mo.lgssm_make(1, 1, 0.0, "sparse", RngStream(0))
        ys = np.asarray([[0.3], [-0.8]])
        expected = sum(-0.5 * math.log(4 * math.pi) - y * y / 4.0 for y in (0.3, -0.8))
        assert abs(mo.kalman_loglik(m, ys) - expected) < 1e-12

    def test_matches_grid_integration(self):
        """d=1, T=2 brute-force trapezoid integral of the joint density."""
        m = mo.lgssm_make(1, 1, 0.42, "sparse", RngStream(0))
        y1, y2 = 0.4, -0.9
        grid = np.linspace(-8.0, 8.0, 801)

        def norm(x, mean, var):
            return np.exp(-0.5 * np.log(2 * np.pi * var) - (x - mean) ** 2 / (2 * var))

        f1 = norm(grid, 0.0, 1.0) * norm(y1, grid, 1.0)
        joint = f1[:, None] * norm(grid[None, :], 0.42 * grid[:, None], 1.0) * norm(y2, grid[None, :], 1.0)
        log_p = math.log(np.trapezoid(np.trapezoid(joint, grid, axis=1), grid))
        assert abs(mo.kalman_loglik(m, np.asarray([[y1], [y2]])) - log_p) < 1e-4

    def test_filtered_moments_d1(self):
        """One conjugate update by hand: posterior of x1 given y1."""
        m = mo.Lgssm(np.asarray([[0.7]]), np.asarray([[1.0]]), np.ones(1), np.ones(1))
        y1 = 1.2
        _, means, covs = mo.kalman_filter(m, np.asarray([[y1]]))
        assert abs(means[0, 0] - y1 / 2.0) < 1e-12
        assert abs(covs[0, 0, 0] - 0.5) < 1e-12

    def test_non_pd_innovation_raises(self):
        m = mo.Lgssm(np.asarray([[1.0]]), np.asarray([[1.0]]), np.ones(1), np.ones(1))
        m.r_diag[0] = -5.0  # sabotage past the constructor check
        with pytest.raises(ValueError):
            mo.kalman_loglik(m, np.zeros((3, 1)))


class TestHmmForward:
    def test_reference_instance(self):
        ll = mo.hmm_forward(mo.hmm_reference(), [0, 0])
        assert abs(math.exp(ll) - 0.3525) <= 1e-12

    def test_single_state(self):
        h = mo.DiscreteHmm(np.asarray([1.0]), np.asarray([[1.0]]), np.asarray([[0.6, 0.4]]))
        assert abs(mo.hmm_forward(h, [0, 1, 0]) - math.log(0.6 * 0.4 * 0.6)) < 1e-12

    def test_uniform_everything(self):
        h = mo.DiscreteHmm(
            np.asarray([0.5, 0.5]), np.full((2, 2), 0.5), np.full((2, 3), 1.0 / 3.0)
        )
        assert abs(mo.hmm_forward(h, [2, 0, 1, 1]) - 4 * math.log(1.0 / 3.0)) < 1e-12

    def test_invalid_rows_raise(self):
        with pytest.raises(ValueError):
            mo.DiscreteHmm(np.asarray([0.7, 0.7]), np.eye(2), np.eye(2))


class TestDensityKernels:
    def test_matrix_kernel_matches_rows(self):
        x = RngStream(7).normals(8).reshape(4, 2)
        means = RngStream(8).normals(6).reshape(3, 2)
        log_stds = RngStream(9).normals(6).reshape(3, 2) * 0.3
        with ad.Tape():
            mat = mo.gauss_logpdf_matrix(ad.constant(x), ad.constant(means), ad.constant(log_stds)).data
        for i in range(4):
            for j in range(3):
                with ad.Tape():
                    ref = diag_gauss_logpdf(x[i], DiagGaussian(means[j], log_stds[j])).data
                assert abs(mat[i, j] - float(ref)) < 1e-9

    def test_matrix_kernel_finite_difference(self):
        x = RngStream(17).normals(4).reshape(2, 2)

        def f(means, log_stds):
            return mo.gauss_logpdf_matrix(ad.constant(x), means, log_stds).sum()

        point = [RngStream(18).normals(4).reshape(2, 2), RngStream(19).normals(4).reshape(2, 2) * 0.2]
        assert ad.finite_diff_check(f, point) < 1e-5

    def test_trisolve_forward_and_gradient(self):
        b = np.tril(RngStream(5).normals(9).reshape(3, 3) * 0.3) + np.eye(3)
        u = RngStream(6).normals(6).reshape(2, 3)
        with ad.Tape():
            z = mo.trisolve_rows(ad.constant(b), ad.constant(u)).data
        assert np.allclose(b @ z.T, u.T, atol=1e-12)

        def f(bv, uv):
            eye = ad.constant(np.eye(3))
            strict = ad.constant(np.tril(np.ones((3, 3)), -1))
            z = mo.trisolve_rows(ad.exp(bv) * eye + bv * strict, uv)
            return (z * z).sum()

        assert ad.finite_diff_check(f, [RngStream(5).normals(9).reshape(3, 3) * 0.3, u]) < 1e-5


class TestLogdensities:
    def test_lgssm_transition_is_gaussian(self):
        m = mo.lgssm_make(2, 2, 0.42, "sparse", RngStream(0))
        x_prev = np.asarray([0.5, -1.0])
        x_t = np.asarray([0.2, 0.1])
        with ad.Tape():
            log_f, log_g = mo.model_logdensities(m, 2, x_t, x_prev, np.zeros(2))
            ref_f = diag_gauss_logpdf(x_t, DiagGaussian(m.a @ x_prev, np.zeros(2)))
            ref_g = diag_gauss_logpdf(np.zeros(2), DiagGaussian(m.c @ x_t, np.zeros(2)))
        assert abs(float(log_f.data) - float(ref_f.data)) < 1e-10
        assert abs(float(log_g.data) - float(ref_g.data)) < 1e-10

    def test_lgssm_prior_at_t1(self):
        m = mo.lgssm_make(2, 2, 0.42, "sparse", RngStream(0))
        with ad.Tape():
            log_f, _ = mo.model_logdensities(m, 1, np.zeros(2), None, np.zeros(2))
        assert abs(float(log_f.data) + math.log(2 * math.pi)) < 1e-12

    def test_sv_emission_matches_dense_normal(self):
        """y = diag(exp(x/2)) B e gives y ~ N(0, D B B' D)."""
        for mode in ("diagonal", "triangular"):
            sv = mo.sv_make(3, mode, RngStream(11))
            x = RngStream(12).normals(3)
            y = RngStream(13).normals(3) * 0.5
            with ad.Tape():
                _, log_g = mo.model_logdensities(sv, 1, x, None, y)
            b = mo.sv_b_matrix(sv).data
            d = np.diag(np.exp(x / 2.0))
            oracle = multivariate_normal(np.zeros(3), d @ b @ b.T @ d).logpdf(y)
            assert abs(float(log_g.data) - oracle) < 1e-9

    def test_sv_transition_definition(self):
        sv = mo.sv_make(2, "diagonal", RngStream(3))
        x_prev, x_t = np.asarray([0.4, -0.2]), np.asarray([0.1, 0.3])
        phi = 1.0 / (1.0 + np.exp(-sv.phi_logit))
        with ad.Tape():
            log_f, _ = mo.model_logdensities(sv, 2, x_t, x_prev, np.zeros(2))
            ref = diag_gauss_logpdf(
                x_t, DiagGaussian(sv.mu + phi * (x_prev - sv.mu), sv.log_q_std)
            )
        assert abs(float(log_f.data) - float(ref.data)) < 1e-10

    def test_dmm_emission_is_bernoulli(self):
        dmm = mo.dmm_make(2, 4, 8, RngStream(5))
        x = RngStream(6).normals(2)
        y = np.asarray([1.0, 0.0, 0.0, 1.0])
        with ad.Tape():
            _, log_g = mo.model_logdensities(dmm, 1, x, None, y)
            logits = mo.mlp_single(dmm.params, "emis_h", "emis_out", ad.constant(x[None, :])).data[0]
        probs = 1.0 / (1.0 + np.exp(-logits))
        oracle = np.sum(y * np.log(probs) + (1 - y) * np.log1p(-probs))
        assert abs(float(log_g.data) - oracle) < 1e-10

    def test_transition_density_integrates_to_one(self):
        grid = np.linspace(-10.0, 10.0, 4001)
        cases = [
            (mo.lgssm_make(1, 1, 0.42, "sparse", RngStream(0)), np.zeros(1)),
            (mo.sv_make(1, "diagonal", RngStream(1)), np.zeros(1)),
            (mo.dmm_make(1, 2, 4, RngStream(2)), np.zeros(2)),
        ]
        x_prev = np.asarray([0.3])
        for m, y in cases:
            with ad.Tape():
                vals = [
                    math.exp(float(mo.model_logdensities(m, 2, np.asarray([g]), x_prev, y)[0].data))
                    for g in grid
                ]
            assert 0.999 < np.trapezoid(vals, grid) < 1.001


class TestProposals:
    def test_lgssm_proposal_formula(self):
        m = mo.lgssm_make(2, 2, 0.42, "sparse", RngStream(0))
        params = mo.proposal_init(m, 3)
        params["mu"][1] = [0.5, -0.5]
        params["beta"][1] = [2.0, 0.5]
        params["log_sigma"][1] = [0.1, -0.1]
        x_prev = np.asarray([1.0, 2.0])
        with ad.Tape():
            g = mo.proposal_build(m, params, 2, x_prev)
        assert np.allclose(g.mean.data, np.asarray([0.5, -0.5]) + np.asarray([2.0, 0.5]) * (m.a @ x_prev))
        assert np.allclose(g.log_std.data, [0.1, -0.1])

    def test_lgssm_beta_zero_ignores_history(self):
        m = mo.lgssm_make(2, 2, 0.42, "sparse", RngStream(0))
        params = mo.proposal_init(m, 2)
        params["beta"][:] = 0.0
        with ad.Tape():
            a = mo.proposal_build(m, params, 2, np.asarray([5.0, -3.0]))
            b = mo.proposal_build(m, params, 2, np.asarray([0.0, 0.0]))
        assert np.array_equal(a.mean.data, b.mean.data)

    def test_sv_proposal_is_fused_product(self):
        """log f + log N(mu_t, Sigma_t) = log-normalizer + log r pointwise."""
        sv = mo.sv_make(2, "diagonal", RngStream(5))
        params = mo.proposal_init(sv, 2)
        params["mu"][1] = [0.3, -0.2]
        params["log_sigma"][1] = [0.2, 0.1]
        x_prev = np.asarray([0.5, 0.8])
        x_t = np.asarray([-0.1, 0.4])
        phi = 1.0 / (1.0 + np.exp(-sv.phi_logit))
        with ad.Tape():
            r = mo.proposal_build(sv, params, 2, x_prev)
            log_r = diag_gauss_logpdf(x_t, r)
            f_gauss = DiagGaussian(sv.mu + phi * (x_prev - sv.mu), sv.log_q_std)
            factor = DiagGaussian(np.asarray([0.3, -0.2]), np.asarray([0.2, 0.1]))
            _, log_norm = gauss_product_fuse(f_gauss, factor)
            lhs = diag_gauss_logpdf(x_t, f_gauss).data + diag_gauss_logpdf(x_t, factor).data
        assert abs(float(lhs) - (float(log_norm.data) + float(log_r.data))) < 1e-10

    def test_dmm_flat_y_factor_recovers_x_network(self):
        dmm = mo.dmm_make(2, 3, 8, RngStream(9))
        params = mo.proposal_init(dmm, 2, RngStream(10))
        params["y_sig_w"][:] = 0.0
        params["y_sig_b"][:] = 40.0  # variance e^40: flat factor
        x_prev = RngStream(11).normals(2)
        y_t = np.asarray([1.0, 0.0, 1.0])
        with ad.Tape():
            fused = mo.proposal_build(dmm, params, 2, x_prev, y_t)
            x_mean, x_ls = mo.mlp_two_head(params, "x", ad.constant(x_prev[None, :]))
        assert np.allclose(fused.mean.data, x_mean.data[0], atol=1e-8)
        assert np.allclose(fused.log_std.data, x_ls.data[0], atol=1e-8)

    def test_proposal_gradients_finite_difference(self):
        m = mo.lgssm_make(1, 1, 0.42, "sparse", RngStream(0))
        x_prev = np.asarray([[0.7]])
        x_t = np.asarray([[0.2]])

        def f(mu, beta, log_sigma):
            means, log_stds = mo.proposal_build_many(
                m, {"mu": mu, "beta": beta, "log_sigma": log_sigma}, 2, ad.constant(x_prev)
            )
            return mo.gauss_logpdf_rows(ad.constant(x_t), means, log_stds).sum()

        point = [np.zeros((2, 1)), np.ones((2, 1)), np.zeros((2, 1))]
        assert ad.finite_diff_check(f, point) < 1e-5

    def test_unused_rows_get_zero_gradient(self):
        m = mo.lgssm_make(1, 1, 0.42, "sparse", RngStream(0))
        with ad.Tape():
            mu = ad.leaf(np.zeros((4, 1)))
            params = {"mu": mu, "beta": ad.leaf(np.ones((4, 1))), "log_sigma": ad.leaf(np.zeros((4, 1)))}
            means, _ = mo.proposal_build_many(m, params, 2, ad.constant(np.asarray([[0.3]])))
            (g,) = ad.grad(means.sum(), [mu])
        assert np.array_equal(g[:, 0], [0.0, 1.0, 0.0, 0.0])


class TestGenerate:
    def test_deterministic(self):
        m = mo.lgssm_make(2, 2, 0.42, "sparse", RngStream(0))
        a = mo.generate(m, 5, RngStream(33))
        b = mo.generate(m, 5, RngStream(33))
        assert np.array_equal(a.ys, b.ys)

    def test_lgssm_marginal_variance(self):
        """Var(y_1) = C C' + R elementwise on the diagonal, d=1: 2.0."""
        m = mo.lgssm_make(1, 1, 0.42, "sparse", RngStream(0))
        n = 20_000
        y1 = np.asarray([mo.generate(m, 1, RngStream(1_000_000 + k)).ys[0, 0] for k in range(n)])
        var = y1.var()
        se = var * math.sqrt(2.0 / (n - 1))
        assert abs(var - 2.0) < 4 * se

    def test_dmm_emits_binary(self):
        ds = mo.generate(mo.dmm_make(2, 5, 8, RngStream(3)), 4, RngStream(1))
        assert set(np.unique(ds.ys)) <= {0.0, 1.0}

    def test_hmm_symbols_in_range(self):
        ds = mo.generate(mo.hmm_reference(), 10, RngStream(2))
        assert ds.ys.shape == (10, 1)
        assert set(np.unique(ds.ys)) <= {0.0, 1.0}


class TestDatasetIo:
    def test_roundtrip(self, tmp_path):
        m = mo.lgssm_make(2, 3, 0.42, "dense", RngStream(4))
        ds = mo.generate(m, 6, RngStream(5))
        path = str(tmp_path / "data.csv")
        mo.save_dataset(ds, path)
        loaded = mo.load_dataset(path)
        assert np.array_equal(loaded.ys, ds.ys)
        assert loaded.kind == "lgssm"
        header = open(path).readline().strip()
        assert header == "t,y1,y2,y3"

    def test_byte_identical_rewrite(self, tmp_path):
        ds = mo.generate(mo.lgssm_make(1, 1, 0.42, "sparse", RngStream(0)), 3, RngStream(9))
        p1, p2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        mo.save_dataset(ds, p1)
        mo.save_dataset(ds, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()
