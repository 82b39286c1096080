import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eerds.entropy import (
    BoltzmannEntropyModel,
    DomainError,
    MoreauEnvelope,
    SizeExclusionEntropyModel,
    growth_constant,
    legendre_oracle,
    young_lower_bound_constant,
    young_violations,
)

UNIT1 = BoltzmannEntropyModel.unit((1.0,))
BIPOLAR = BoltzmannEntropyModel.unit((-1.0, 1.0))


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_entropy_anchor_unit_model():
    c, u = np.array([3.0]), 1.0
    w = 2.0 * np.sqrt(u)
    expected = w - (3 * np.log(3) - 3 - 3 * np.log(w + 1))
    assert UNIT1.entropy(c, u) == pytest.approx(expected, rel=1e-14)
    assert UNIT1.entropy(c, u) == pytest.approx(5.0, rel=1e-14)


def test_gradient_anchor():
    y, v = UNIT1.neg_gradient(np.array([3.0]), 1.0)
    np.testing.assert_allclose(y, [0.0], atol=1e-15)
    assert v == pytest.approx(-2.0, rel=1e-14)


def test_dual_anchor_and_inverse():
    assert UNIT1.dual_entropy([0.0], -1.0) == pytest.approx(5.0, rel=1e-14)
    c, u = UNIT1.dual_gradient(np.array([0.0]), -2.0)
    np.testing.assert_allclose(c, [3.0], rtol=1e-14)
    assert u == pytest.approx(1.0, rel=1e-14)


def test_dual_infinite_for_nonnegative_v():
    assert np.isinf(BIPOLAR.dual_entropy([0.0, 0.0], 0.0))
    assert np.isinf(BIPOLAR.dual_entropy([0.0, 0.0], 1.0))
    with pytest.raises(DomainError):
        BIPOLAR.dual_gradient(np.zeros(2), 0.5)


def test_round_trip_random(rng):
    z = rng.uniform(0.01, 20.0, size=(500, 3))
    y, v = BIPOLAR.neg_gradient(z[:, :2], z[:, 2])
    c, u = BIPOLAR.dual_gradient(y, v)
    err = np.linalg.norm(np.column_stack([c, u]) - z, axis=1)
    assert np.all(err <= 1e-9 * (1 + np.linalg.norm(z, axis=1)))


def test_fenchel_young_equality(rng):
    z = rng.uniform(0.1, 5.0, size=(50, 3))
    y, v = BIPOLAR.neg_gradient(z[:, :2], z[:, 2])
    lhs = BIPOLAR.neg_entropy(z[:, :2], z[:, 2]) + BIPOLAR.dual_entropy(y, v)
    rhs = np.sum(y * z[:, :2], 1) + v * z[:, 2]
    np.testing.assert_allclose(lhs, rhs, rtol=1e-11, atol=1e-11)


def test_gradient_matches_finite_differences(rng):
    model = BoltzmannEntropyModel(1.3, [0.7, 2.0], 0.4, 0.3, [-1.0, 2.0])
    for z in rng.uniform(0.2, 3.0, size=(5, 3)):
        fd = fd_gradient(lambda x: model.neg_entropy(x[:2], x[2]), z)
        y, v = model.neg_gradient(z[:2], z[2])
        np.testing.assert_allclose(np.append(y, v), fd, rtol=1e-6, atol=1e-8)


def test_hessians_match_finite_differences(rng):
    model = BoltzmannEntropyModel(1.3, [0.7, 2.0], 0.4, 0.3, [-1.0, 2.0])
    z = np.array([0.8, 1.7, 2.2])
    fd = np.array([fd_gradient(lambda x: np.append(*model.neg_gradient(x[:2], x[2]))[k], z) for k in range(3)])
    np.testing.assert_allclose(model.neg_hessian(z[:2], z[2]), fd, rtol=1e-6, atol=1e-8)
    xi = np.array([0.2, -0.4, -1.1])
    fd = np.array([fd_gradient(lambda x: np.append(*model.dual_gradient(x[:2], x[2]))[k], xi) for k in range(3)])
    np.testing.assert_allclose(model.dual_hessian(xi[:2], xi[2]), fd, rtol=1e-6, atol=1e-8)


def test_dual_hessian_inverts_primal_hessian(rng):
    z = rng.uniform(0.2, 4.0, size=3)
    y, v = BIPOLAR.neg_gradient(z[:2], z[2])
    prod = BIPOLAR.neg_hessian(z[:2], z[2]) @ BIPOLAR.dual_hessian(y, v)
    np.testing.assert_allclose(prod, np.eye(3), atol=1e-10)


def test_reduced_dual_derivatives(rng):
    for mu, eta in rng.uniform([-2, 0.3], [2, 3], size=(5, 2)):
        val, dmu, deta, dmumu, dmueta, detaeta = BIPOLAR.reduced_dual_derivatives(mu, eta)
        assert val == pytest.approx(BIPOLAR.reduced_dual(mu, eta), rel=1e-13)
        f = lambda x: BIPOLAR.reduced_dual(x[0], x[1])
        g = fd_gradient(f, np.array([mu, eta]))
        np.testing.assert_allclose([dmu, deta], g, rtol=1e-6, atol=1e-8)
        gm = lambda x: BIPOLAR.reduced_dual_derivatives(x[0], x[1])[1]
        ge = lambda x: BIPOLAR.reduced_dual_derivatives(x[0], x[1])[2]
        np.testing.assert_allclose([dmumu, dmueta], fd_gradient(gm, np.array([mu, eta])), rtol=1e-6, atol=1e-8)
        assert detaeta == pytest.approx(fd_gradient(ge, np.array([mu, eta]))[1], rel=1e-6)


def test_reduced_dual_rejects_nonpositive_eta():
    with pytest.raises(DomainError):
        BIPOLAR.reduced_dual(0.0, 0.0)


def test_u_component_increasing_in_v():
    v = np.linspace(-5.0, -0.1, 200)
    _, u = BIPOLAR.dual_gradient(np.zeros((200, 2)), v)
    assert np.all(np.diff(u) > 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.05, 10.0), min_size=6, max_size=6))
def test_midpoint_strict_convexity(vals):
    a, b = np.array(vals[:3]), np.array(vals[3:])
    if np.linalg.norm(a - b) < 1e-3:
        return
    h = lambda z: BIPOLAR.neg_entropy(z[:2], z[2])
    assert h((a + b) / 2) < (h(a) + h(b)) / 2


def test_oracle_matches_closed_form_and_is_monotone():
    val = legendre_oracle(UNIT1, [0.0], -1.0, box=(0.01, 20.0), levels=4)
    assert val == pytest.approx(5.0, rel=1e-5)
    hist = legendre_oracle.last_history
    assert all(b >= a for a, b in zip(hist, hist[1:]))
    assert val <= 5.0 + 1e-12


def test_invalid_parameters():
    with pytest.raises(ValueError):
        BoltzmannEntropyModel(1.0, [1.0], 1.0, 1.0, [1.0])
    with pytest.raises(ValueError):
        BoltzmannEntropyModel(1.0, [1.0, 1.0], 1.0, 0.5, [1.0])
    with pytest.raises(ValueError):
        BoltzmannEntropyModel(-1.0, [1.0], 1.0, 0.5, [1.0])


class TestSizeExclusion:
    model = SizeExclusionEntropyModel(2.0, 0.5, (-1.0, 1.0))

    def test_certificate(self):
        assert self.model.convexity_certified
        assert not SizeExclusionEntropyModel(1.0, 0.5, (-1.0, 1.0)).convexity_certified

    def test_convexity_lost_below_species_count(self):
        # beta0 < I: along u at fixed c with c_0 close to w the entropy is not concave
        model = SizeExclusionEntropyModel(1.0, 0.5, (-1.0, 1.0))
        c = np.array([0.05, 0.05])
        h = lambda u: model.neg_entropy(c, u)
        a, b = 2.0, 6.0
        assert h((a + b) / 2) > (h(a) + h(b)) / 2

    def test_domain(self):
        assert self.model.in_domain(np.array([0.5, 0.5]), 1.0)
        assert not self.model.in_domain(np.array([1.5, 1.0]), 1.0)
        assert np.isinf(self.model.neg_entropy(np.array([1.5, 1.0]), 1.0))

    def test_round_trip(self, rng):
        u = rng.uniform(0.2, 5.0, 50)
        frac = rng.dirichlet(np.ones(3), 50)[:, :2]
        c = frac * self.model.w(u)[:, None]
        y, v = self.model.neg_gradient(c, u)
        c2, u2 = self.model.dual_gradient(y, v)
        np.testing.assert_allclose(c2, c, rtol=1e-10)
        np.testing.assert_allclose(u2, u, rtol=1e-10)

    def test_dual_against_oracle(self):
        y, v = np.array([0.3, -0.2]), -1.5
        c, u = self.model.dual_gradient(y, v)
        box = [(1e-4, 3 * c[0]), (1e-4, 3 * c[1]), (1e-3, 3 * u)]
        val = legendre_oracle(self.model, y, v, box=box, levels=5)
        assert val == pytest.approx(self.model.dual_entropy(y, v), rel=1e-5)

    def test_gradient_matches_fd(self):
        z = np.array([0.3, 0.4, 1.2])
        fd = fd_gradient(lambda x: self.model.neg_entropy(x[:2], x[2]), z)
        np.testing.assert_allclose(np.append(*self.model.neg_gradient(z[:2], z[2])), fd, rtol=1e-6)

    def test_midpoint_convexity(self, rng):
        for _ in range(50):
            u = rng.uniform(0.2, 4.0, 2)
            frac = rng.dirichlet(np.ones(3), 2)[:, :2]
            a = np.append(frac[0] * self.model.w(u[0]), u[0])
            b = np.append(frac[1] * self.model.w(u[1]), u[1])
            h = lambda z: self.model.neg_entropy(z[:2], z[2])
            assert h((a + b) / 2) <= (h(a) + h(b)) / 2 + 1e-12


class TestMoreauEnvelope:
    env = MoreauEnvelope(BIPOLAR, 0.1)

    def test_below_function(self, rng):
        z = rng.uniform(0.1, 4.0, size=(20, 3))
        assert np.all(self.env.value(z) <= BIPOLAR.neg_entropy(z[:, :2], z[:, 2]) + 1e-12)

    def test_finite_outside_domain(self):
        z = np.array([-1.0, 0.5, -0.2])
        assert np.isfinite(self.env.value(z))

    def test_gradient_matches_fd(self):
        z = np.array([0.7, -0.3, 1.1])
        fd = fd_gradient(lambda x: float(self.env.value(x)), z, h=1e-5)
        np.testing.assert_allclose(self.env.gradient(z), fd, rtol=1e-5, atol=1e-6)
        fdh = np.array([fd_gradient(lambda x: self.env.gradient(x)[k], z, h=1e-5) for k in range(3)])
        np.testing.assert_allclose(self.env.hessian(z), fdh, rtol=1e-4, atol=1e-5)

    def test_dual_identity(self):
        # (H_delta)*(xi) = H*(xi) + delta/2 |xi|^2, checked through the gradient inverse
        xi_y, xi_v = np.array([0.2, -0.1]), -1.3
        c, u = BIPOLAR.dual_gradient(xi_y, xi_v)
        z = np.append(c, u) + self.env.delta * np.append(xi_y, xi_v)
        np.testing.assert_allclose(self.env.gradient(z), np.append(xi_y, xi_v), atol=1e-9)
        lhs = z @ np.append(xi_y, xi_v) - self.env.value(z)
        assert lhs == pytest.approx(self.env.dual_entropy(xi_y, xi_v), rel=1e-9)


class TestYoung:
    def test_constant(self):
        assert young_lower_bound_constant(1.0, 1.0) == pytest.approx(2.0)
        with pytest.raises(ValueError):
            young_lower_bound_constant(0.0, 1.0)

    def test_no_violations(self):
        mu = np.linspace(-50, 50, 100)
        eta = np.geomspace(1e-3, 1e3, 100)
        for p in (0.5, 1.0, 2.0):
            for d in (0.25, 1.0, 4.0):
                assert young_violations(p, 2.0 * (1 + p), d, mu, eta) == 0

    def test_equality_case(self):
        # p = 1, q = 2, delta = 1: |mu|^2 / eta >= 2 |mu| - eta, with equality at eta = |mu|
        c = young_lower_bound_constant(1.0, 1.0)
        mu = np.linspace(0.1, 10, 50)
        np.testing.assert_allclose(mu**2 / mu, c * mu - mu, rtol=1e-12)
        eta = 1.5 * mu
        assert np.all(mu**2 / eta > c * mu - eta)

    def test_growth_constant_positive(self):
        p = BIPOLAR._profile.p
        assert growth_constant(BIPOLAR, p, 1.0 + p) > 0
