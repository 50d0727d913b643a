import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import integrate, special, stats

from probit_uq import state_evolution as se, uncertainty as unc
from probit_uq.uncertainty import JointGaussianSpec


@pytest.fixture(scope="module")
def spec():
    return JointGaussianSpec.from_se(se.solve_erm(10.0, 0.5, 0.1))


def valid_overlaps():
    """(q_bo, m, q_erm) giving a PSD latent covariance."""
    return st.tuples(st.floats(0.05, 0.95), st.floats(0.05, 3.0), st.floats(1.0, 20.0)).map(
        lambda t: (t[0], t[1] * np.sqrt(t[0]), t[2] * t[1] ** 2))


def density_oracle(a, b, c, spec):
    """scipy multivariate normal in latent space times explicit link Jacobians."""
    t0, tp = spec.tau, spec.tau_prime
    x0, x1 = t0 * special.ndtri(a), tp * special.ndtri(b)
    x2 = np.log(c / (1 - c))
    jac = (t0 / stats.norm.pdf(x0 / t0)) * (tp / stats.norm.pdf(x1 / tp)) / (c * (1 - c))
    return stats.multivariate_normal(np.zeros(3), spec.sigma).pdf([x0, x1, x2]) * jac


class TestSpec:
    def test_rejects_asymmetric(self):
        s = np.eye(3)
        s[0, 1] = 0.1
        with pytest.raises(ValueError):
            JointGaussianSpec(s, 0.5, np.sqrt(0.25 + 0.0))

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            JointGaussianSpec.from_overlaps(0.5, 2.0, 1.0, 0.5)

    def test_rejects_inconsistent_width(self):
        s = se.sigma_matrix(0.5, 0.3, 1.0)
        with pytest.raises(ValueError):
            JointGaussianSpec(s, 0.5, 0.5)

    def test_accessors(self, spec):
        assert spec.tau_prime ** 2 == pytest.approx(spec.tau ** 2 + 1 - spec.q_bo)
        assert spec.to_dict()["tau"] == spec.tau


class TestDensities:
    @pytest.mark.parametrize("point", [(0.3, 0.4, 0.5), (0.9, 0.8, 0.95), (0.05, 0.1, 0.02)])
    def test_joint_against_scipy(self, spec, point):
        assert unc.joint_density(*point, spec) == pytest.approx(density_oracle(*point, spec),
                                                                rel=1e-9)

    def test_log_form(self, spec):
        v = unc.joint_density(0.2, 0.3, 0.4, spec)
        assert np.exp(unc.joint_density(0.2, 0.3, 0.4, spec, log=True)) == pytest.approx(v)

    def test_factorisation(self, spec):
        a, b, c = np.meshgrid([0.1, 0.5, 0.93], [0.2, 0.7], [0.05, 0.6, 0.99], indexing="ij")
        lhs = unc.joint_density(a, b, c, spec)
        rhs = unc.marginal_density_2d("bo-erm", b, c, spec) * unc.conditional_teacher_density(a, b, spec)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-8)

    @pytest.mark.parametrize("pair,free", [("bo-erm", 0), ("star-erm", 1), ("star-bo", 2)])
    def test_marginalisation(self, spec, pair, free):
        """Integrating the joint over one confidence gives the 2-d marginal."""
        u, v = 0.35, 0.7
        scales = spec.link_scales()

        def integrand(t):
            # substitute the free confidence by its latent coordinate t
            if free == 2:
                x = special.expit(t)
                jac = x * (1 - x)
            else:
                x = special.ndtr(t / scales[free])
                jac = stats.norm.pdf(t / scales[free]) / scales[free]
            args = [None, None, None]
            args[free] = x
            others = [k for k in range(3) if k != free]
            args[others[0]], args[others[1]] = u, v
            return unc.joint_density(*args, spec) * jac

        # window of the free latent coordinate given the other two
        S = spec.sigma
        o = [k for k in range(3) if k != free]
        lat = np.array([spec.link_scales()[k] * special.ndtri(x) if k < 2 else special.logit(x)
                        for k, x in zip(o, (u, v))])
        gain = S[free, o] @ np.linalg.inv(S[np.ix_(o, o)])
        mu = gain @ lat
        sd = np.sqrt(S[free, free] - gain @ S[o, free])
        val = integrate.quad(integrand, mu - 12 * sd, mu + 12 * sd, limit=400, epsrel=1e-10)[0]
        assert val == pytest.approx(unc.marginal_density_2d(pair, u, v, spec), rel=1e-6)

    def test_boundary_rejected(self, spec):
        with pytest.raises(unc.DensityError):
            unc.joint_density(0.0, 0.5, 0.5, spec)

    def test_noiseless_teacher(self):
        sp = JointGaussianSpec.from_se(se.solve_erm(5.0, 0.0, 0.01))
        with pytest.raises(unc.DensityError):
            unc.marginal_density_2d("star-erm", 0.5, 0.5, sp)
        assert unc.marginal_density_2d("bo-erm", 0.5, 0.5, sp) > 0

    def test_unknown_pair(self, spec):
        with pytest.raises(ValueError):
            unc.marginal_density_2d("erm-erm", 0.5, 0.5, spec)

    @pytest.mark.parametrize("pair", unc.PAIRS)
    def test_integrates_to_one(self, spec, pair):
        assert unc.integrate_density(spec, pair) == pytest.approx(1.0, abs=1e-6)


class TestCellMasses:
    def test_against_bivariate_normal_cdf(self, spec):
        edges = np.linspace(0, 1, 11)
        mass = unc.cell_masses(edges, spec, "star-erm")
        cov = spec.sigma[np.ix_([0, 2], [0, 2])]
        mvn = stats.multivariate_normal(np.zeros(2), cov)
        for i, j in [(2, 3), (5, 5), (8, 9), (9, 9)]:
            lo = [spec.tau * special.ndtri(edges[i]), special.logit(edges[j])]
            hi = [spec.tau * special.ndtri(edges[i + 1]), special.logit(edges[j + 1])]
            lo = [max(x, -40) for x in lo]
            hi = [min(x, 40) for x in hi]
            ref = mvn.cdf(hi, lower_limit=lo)
            assert mass[i, j] == pytest.approx(ref, rel=1e-4, abs=1e-7)

    def test_3d_marginalises_to_pair(self, spec):
        edges = np.linspace(0, 1, 6)
        full = unc.cell_masses(edges, spec)
        pair = unc.cell_masses(edges, spec, "bo-erm")
        np.testing.assert_allclose(full.sum(axis=0), pair, atol=1e-6)

    def test_total_mass(self, spec):
        edges = np.linspace(0, 1, 21)
        assert unc.cell_masses(edges, spec, "bo-erm").sum() == pytest.approx(1.0, abs=1e-3)


class TestCalibration:
    def test_sign_by_monte_carlo(self, spec):
        """Binned p - mean(f_star) over samples with f_erm near p matches the formula."""
        s = unc.push_forward_samples(spec, 2_000_000, seed=1)
        for p in (0.2, 0.75, 0.9):
            sel = np.abs(s[:, 2] - p) <= 0.004
            est = p - s[sel, 0].mean()
            se_ = s[sel, 0].std() / np.sqrt(sel.sum())
            exact = unc.calibration_erm(p, spec.m, spec.q_erm, spec.tau)
            assert abs(est - exact) < 4 * se_ + 2e-3, (p, est, exact)

    @given(valid_overlaps(), st.floats(0.01, 3.0), st.floats(0.01, 0.99))
    def test_bayes_route_agrees(self, ov, tau, p):
        q_bo, m, q_erm = ov
        assume(q_erm * q_bo - m * m > 1e-9)
        a = unc.calibration_erm(p, m, q_erm, tau)
        b = unc.calibration_erm_vs_bayes(p, m, q_erm, q_bo, tau)
        assert a == pytest.approx(b, abs=1e-12)

    @given(valid_overlaps(), st.floats(0.01, 3.0), st.floats(0.01, 0.99))
    def test_odd_around_half(self, ov, tau, p):
        _, m, q_erm = ov
        assert unc.calibration_erm(1 - p, m, q_erm, tau) == pytest.approx(
            -unc.calibration_erm(p, m, q_erm, tau), abs=1e-12)

    @settings(max_examples=25)
    @given(st.floats(0.05, 0.98), st.floats(0.05, 3.0))
    def test_bayes_self_calibrated(self, q_bo, tau):
        sp = JointGaussianSpec.from_overlaps(q_bo, 0.5 * q_bo, 1.0, tau)
        p = np.linspace(0.01, 0.99, 99)
        assert np.max(np.abs(unc.bayes_self_calibration(p, sp))) < 1e-10

    def test_conditional_moments_by_monte_carlo(self, spec):
        s = unc.push_forward_samples(spec, 2_000_000, seed=2)
        sel = np.abs(s[:, 2] - 0.75) <= 0.003
        for k, target in ((0, "teacher"), (1, "bayes")):
            mean, var = unc.conditional_moments(target, 0.75, spec)
            assert s[sel, k].mean() == pytest.approx(mean, abs=4 * np.sqrt(var / sel.sum()) + 2e-3)
            assert s[sel, k].var() == pytest.approx(var, rel=0.1)

    def test_curve_kinds(self):
        ov = se.solve_erm(5.0, 0.5, 0.1)
        c = unc.calibration_curve([0.6, 0.9], ov, "vs-bayes")
        assert c.delta.shape == (2,)
        with pytest.raises(ValueError):
            unc.calibration_curve([0.6], ov, "other")

    def test_binned(self):
        conf = np.array([0.745, 0.75, 0.755, 0.2])
        target = np.array([0.7, 0.7, 0.7, 0.1])
        d, n = unc.binned_calibration(conf, target, 0.75, 0.01)
        assert n == 3 and d == pytest.approx(0.05)
        assert np.isnan(unc.binned_calibration(conf, target, 0.5)[0])
