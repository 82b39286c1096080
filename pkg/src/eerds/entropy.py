"""Concave entropy densities, their Legendre duals and Moreau envelopes.

Two families are provided:

* :class:`BoltzmannEntropyModel` -- Boltzmann-type entropy with equilibrium
  densities ``w_i(u) = beta_i (w(u) + w0)`` and thermal profile
  ``w(u) = u**alpha / alpha``.
* :class:`SizeExclusionEntropyModel` -- Boltzmann exclusion entropy where the
  concentrations are restricted by ``sum(c) <= w(u)``.

All methods are vectorised: concentrations have shape ``(..., I)`` and the
internal energy / temperature-like variables have shape ``(...)``. The
convex object is always the negative entropy ``H = -S``; "dual" quantities
refer to its Legendre transform ``H*(y, v) = sup y.c + v u + S(c, u)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

__all__ = [
    "DomainError",
    "BoltzmannEntropyModel",
    "SizeExclusionEntropyModel",
    "MoreauEnvelope",
    "legendre_oracle",
    "young_lower_bound_constant",
    "young_violations",
    "growth_constant",
]

DEFAULT_ORACLE_BOX = (1e-3, 50.0)
DEFAULT_ORACLE_LEVELS = 4


class DomainError(ValueError):
    """Raised when a point lies outside the domain of a density."""


def _as_state(c, u):
    c = np.asarray(c, dtype=float)
    u = np.asarray(u, dtype=float)
    if c.ndim == 0:
        c = c[None]
    return c, u


@dataclass(frozen=True)
class _PowerProfile:
    """Thermal profile ``w(u) = u**alpha / alpha`` and its conjugate."""

    alpha: float

    def w(self, u):
        return u**self.alpha / self.alpha

    def dw(self, u):
        return u ** (self.alpha - 1.0)

    def d2w(self, u):
        return (self.alpha - 1.0) * u ** (self.alpha - 2.0)

    def inverse_dw(self, s):
        """Solve ``w'(u) = s`` for ``s > 0``."""
        return s ** (1.0 / (self.alpha - 1.0))

    @property
    def a(self):
        return (1.0 - self.alpha) / self.alpha

    @property
    def r(self):
        return 1.0 / (1.0 - self.alpha)

    @property
    def p(self):
        return self.alpha / (1.0 - self.alpha)


@dataclass(frozen=True)
class BoltzmannEntropyModel:
    """Boltzmann entropy coupled to the internal energy.

    ``S(c, u) = beta0 w(u) - sum_i (c_i log c_i - c_i - c_i log(beta_i (w(u) + w0)))``
    with ``w(u) = u**alpha / alpha``.
    """

    beta0: float
    beta: np.ndarray
    w0: float
    alpha: float
    charges: np.ndarray
    _profile: _PowerProfile = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        charges = np.atleast_1d(np.asarray(self.charges, dtype=float))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "charges", charges)
        if beta.shape != charges.shape:
            raise ValueError("beta and charges must have one entry per species")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.beta0 <= 0 or self.w0 <= 0 or np.any(beta <= 0):
            raise ValueError("beta0, w0 and all beta_i must be positive")
        object.__setattr__(self, "_profile", _PowerProfile(self.alpha))

    @classmethod
    def unit(cls, charges=(1.0,), alpha=0.5):
        """All weights equal to one; the model used throughout the examples."""
        charges = np.atleast_1d(np.asarray(charges, dtype=float))
        return cls(1.0, np.ones_like(charges), 1.0, alpha, charges)

    @property
    def species_count(self) -> int:
        return self.charges.size

    @property
    def is_bipolar(self) -> bool:
        return bool(np.any(self.charges < 0) and np.any(self.charges > 0))

    # thermal profile ---------------------------------------------------
    def w(self, u):
        return self._profile.w(np.asarray(u))

    def dw(self, u):
        return self._profile.dw(np.asarray(u))

    def d2w(self, u):
        return self._profile.d2w(np.asarray(u))

    def equilibrium_concentrations(self, u):
        """``w_i(u) = beta_i (w(u) + w0)``, shape ``(..., I)``."""
        return self.beta * (self.w(u)[..., None] + self.w0)

    # primal side -------------------------------------------------------
    def _check_primal(self, c, u):
        if np.any(c <= 0) or np.any(u <= 0):
            raise DomainError("entropy gradient requires strictly positive (c, u)")

    def entropy(self, c, u):
        c, u = _as_state(c, u)
        self._check_primal(c, u)
        wi = self.equilibrium_concentrations(u)
        mix = np.sum(c * np.log(c) - c - c * np.log(wi), axis=-1)
        return self.beta0 * self.w(u) - mix

    def neg_entropy(self, c, u):
        return -self.entropy(c, u)

    def neg_gradient(self, c, u):
        """Dual variables ``(y, v) = -DS(c, u)``."""
        c, u = _as_state(c, u)
        self._check_primal(c, u)
        y = np.log(c / self.equilibrium_concentrations(u))
        v = -self.dw(u) * self.big_b(y)
        return y, v

    def temperature(self, c, u):
        _, v = self.neg_gradient(c, u)
        return -1.0 / v

    def neg_hessian(self, c, u):
        """Hessian of ``H = -S``, shape ``(..., I+1, I+1)``."""
        c, u = _as_state(c, u)
        self._check_primal(c, u)
        n = self.species_count
        wu = self.w(u) + self.w0
        dw, d2w = self.dw(u), self.d2w(u)
        out = np.zeros(u.shape + (n + 1, n + 1))
        idx = np.arange(n)
        out[..., idx, idx] = 1.0 / c
        out[..., idx, n] = out[..., n, idx] = (-dw / wu)[..., None]
        csum = np.sum(c, axis=-1)
        out[..., n, n] = -d2w * (self.beta0 + csum / wu) + csum * dw**2 / wu**2
        return out

    # dual side ---------------------------------------------------------
    def big_b(self, y):
        return self.beta0 + np.sum(self.beta * np.exp(y), axis=-1)

    def dual_entropy(self, y, v):
        """Closed-form ``H*(y, v)``; ``+inf`` wherever ``v >= 0``."""
        y = np.asarray(y, dtype=float)
        v = np.asarray(v, dtype=float)
        b = self.big_b(y)
        prof = self._profile
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(v < 0, -v, np.nan)
            val = prof.a * b**prof.r / s**prof.p + (b - self.beta0) * self.w0
        return np.where(v < 0, val, np.inf)

    def _check_dual(self, v):
        if np.any(np.real(v) >= 0):
            raise DomainError("dual entropy is infinite for v >= 0")

    def dual_gradient(self, y, v):
        """``(c, u) = DH*(y, v)``, the inverse of :meth:`neg_gradient`."""
        y = np.asarray(y)
        v = np.asarray(v)
        self._check_dual(v)
        b = self.big_b(y)
        u = (b / -v) ** self._profile.r
        c = (self.w(u) + self.w0)[..., None] * self.beta * np.exp(y)
        return c, u

    def dual_hessian(self, y, v):
        """Hessian of ``H*`` with respect to ``(y, v)``."""
        y = np.asarray(y, dtype=float)
        v = np.asarray(v, dtype=float)
        self._check_dual(v)
        prof = self._profile
        n = self.species_count
        e = self.beta * np.exp(y)
        b = self.big_b(y)
        s = -v
        ar = prof.a * prof.r
        g = ar * b ** (prof.r - 1) / s**prof.p + self.w0
        out = np.zeros(v.shape + (n + 1, n + 1))
        idx = np.arange(n)
        coup = ar * (prof.r - 1) * b ** (prof.r - 2) / s**prof.p
        out[..., :n, :n] = coup[..., None, None] * e[..., :, None] * e[..., None, :]
        out[..., idx, idx] += e * g[..., None]
        yv = (ar * prof.p * b ** (prof.r - 1) / s ** (prof.p + 1))[..., None] * e
        out[..., idx, n] = out[..., n, idx] = yv
        out[..., n, n] = prof.a * prof.p * (prof.p + 1) * b**prof.r / s ** (prof.p + 2)
        return out

    # reduced dual ------------------------------------------------------
    def b_of_mu(self, mu):
        mu = np.asarray(mu, dtype=float)
        return self.beta0 + np.sum(self.beta * np.exp(-mu[..., None] * self.charges), axis=-1)

    def reduced_dual(self, mu, eta):
        """``H*(-mu q, -eta)``."""
        eta = np.asarray(eta, dtype=float)
        if np.any(eta <= 0):
            raise DomainError("reduced dual entropy requires eta > 0")
        mu = np.asarray(mu, dtype=float)
        return self.dual_entropy(-mu[..., None] * self.charges, -eta)

    def reduced_dual_derivatives(self, mu, eta):
        """Value, gradient ``(d_mu, d_eta)`` and Hessian entries of the reduced dual.

        Returns ``(value, d_mu, d_eta, d_mumu, d_mueta, d_etaeta)``.
        """
        mu = np.asarray(mu, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if np.any(eta <= 0):
            raise DomainError("reduced dual entropy requires eta > 0")
        prof = self._profile
        q = self.charges
        e = self.beta * np.exp(-mu[..., None] * q)
        b = self.beta0 + e.sum(-1)
        b1 = -(e * q).sum(-1)
        b2 = (e * q * q).sum(-1)
        a, r, p = prof.a, prof.r, prof.p
        ep = eta**-p
        val = a * b**r * ep + (b - self.beta0) * self.w0
        d_mu = a * r * b ** (r - 1) * b1 * ep + b1 * self.w0
        d_eta = -p * a * b**r * ep / eta
        d_mumu = a * r * ((r - 1) * b ** (r - 2) * b1**2 + b ** (r - 1) * b2) * ep + b2 * self.w0
        d_mueta = -p * a * r * b ** (r - 1) * b1 * ep / eta
        d_etaeta = p * (p + 1) * a * b**r * ep / eta**2
        return val, d_mu, d_eta, d_mumu, d_mueta, d_etaeta

    def state_from_potentials(self, mu, eta):
        """``DH*(-mu q, -eta)`` for scalar ``eta`` and nodal ``mu``."""
        mu = np.asarray(mu, dtype=float)
        v = np.broadcast_to(-np.asarray(eta, dtype=float), mu.shape)
        return self.dual_gradient(-mu[..., None] * self.charges, v)


@dataclass(frozen=True)
class SizeExclusionEntropyModel:
    """Boltzmann exclusion entropy with the size constraint ``sum(c) <= w(u)``.

    ``H(c, u) = -beta0 w(u) + sum_{i=0}^I w(u) b(c_i / w(u))`` with
    ``c_0 = w(u) - sum(c)`` and ``b(s) = s log s - s + 1``.

    ``dH/dw = I - beta0 + log(c_0 / w)``, so ``H`` is convex and ``-DS`` has a
    negative energy component on the whole domain when ``beta0 >= I``. For
    ``beta0 < I`` convexity fails near ``c_0 = w``; see :attr:`convexity_certified`.
    """

    beta0: float
    alpha: float
    charges: np.ndarray
    _profile: _PowerProfile = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        charges = np.atleast_1d(np.asarray(self.charges, dtype=float))
        object.__setattr__(self, "charges", charges)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        object.__setattr__(self, "_profile", _PowerProfile(self.alpha))

    @property
    def species_count(self) -> int:
        return self.charges.size

    @property
    def convexity_certified(self) -> bool:
        return bool(self.beta0 >= self.species_count)

    def w(self, u):
        return self._profile.w(np.asarray(u))

    def vacancy(self, c, u):
        c, u = _as_state(c, u)
        return self.w(u) - c.sum(-1)

    def in_domain(self, c, u, strict=True):
        c, u = _as_state(c, u)
        c0 = self.vacancy(c, u)
        if strict:
            return (np.all(c > 0, axis=-1)) & (u > 0) & (c0 > 0)
        return (np.all(c >= 0, axis=-1)) & (u >= 0) & (c0 >= 0)

    def neg_entropy(self, c, u):
        """``H_excl``; ``+inf`` outside the closed domain, boundary by continuity."""
        c, u = _as_state(c, u)
        inside = self.in_domain(c, u, strict=False)
        cc = np.where(inside[..., None], c, 1.0)
        uu = np.where(inside, u, 1.0)
        w = self.w(uu)
        c0 = np.maximum(w - cc.sum(-1), 0.0)
        val = (
            (self.species_count - self.beta0) * w
            + xlogy(cc, cc).sum(-1)
            + xlogy(c0, c0)
            - xlogy(w, w)
        )
        return np.where(inside, val, np.inf)

    def entropy(self, c, u):
        return -self.neg_entropy(c, u)

    def neg_gradient(self, c, u):
        c, u = _as_state(c, u)
        if not np.all(self.in_domain(c, u)):
            raise DomainError("gradient requires 0 < c, sum(c) < w(u)")
        w = self.w(u)
        c0 = w - c.sum(-1)
        y = np.log(c / c0[..., None])
        v = self._profile.dw(u) * (self.species_count - self.beta0 + np.log(c0 / w))
        return y, v

    def neg_hessian(self, c, u):
        c, u = _as_state(c, u)
        if not np.all(self.in_domain(c, u)):
            raise DomainError("Hessian requires 0 < c, sum(c) < w(u)")
        n = self.species_count
        prof = self._profile
        w, dw, d2w = prof.w(u), prof.dw(u), prof.d2w(u)
        c0 = w - c.sum(-1)
        out = np.zeros(u.shape + (n + 1, n + 1))
        out[..., :n, :n] = (1.0 / c0)[..., None, None]
        idx = np.arange(n)
        out[..., idx, idx] += 1.0 / c
        out[..., idx, n] = out[..., n, idx] = (-dw / c0)[..., None]
        out[..., n, n] = d2w * (n - self.beta0 + np.log(c0 / w)) + dw**2 * (1 / c0 - 1 / w)
        return out

    def big_b(self, y):
        y = np.asarray(y)
        return self.beta0 - self.species_count + np.log1p(np.sum(np.exp(y), axis=-1))

    def dual_entropy(self, y, v):
        """``H*_excl(y, v) = B(y) w*(v / B(y))``; ``+inf`` for ``v >= 0``."""
        v = np.asarray(v, dtype=float)
        b = self.big_b(y)
        if np.any((v < 0) & (b <= 0)):
            raise DomainError("closed form requires B_excl(y) > 0")
        prof = self._profile
        with np.errstate(divide="ignore", invalid="ignore"):
            val = prof.a * b**prof.r / np.where(v < 0, -v, np.nan) ** prof.p
        return np.where(v < 0, val, np.inf)

    def dual_gradient(self, y, v):
        y = np.asarray(y)
        v = np.asarray(v)
        if np.any(np.real(v) >= 0):
            raise DomainError("dual entropy is infinite for v >= 0")
        b = self.big_b(y)
        u = (b / -v) ** self._profile.r
        ey = np.exp(y)
        c = self.w(u)[..., None] * ey / (1.0 + ey.sum(-1))[..., None]
        return c, u

    def reduced_dual(self, mu, eta):
        mu = np.asarray(mu, dtype=float)
        return self.dual_entropy(-mu[..., None] * self.charges, -np.asarray(eta, dtype=float))


class MoreauEnvelope:
    """Moreau envelope ``H_delta(z) = inf_w H(w) + |z - w|^2 / (2 delta)``.

    ``H`` is the negative entropy of ``model`` extended by ``+inf`` outside
    the positive orthant. The inner problem is 1/delta-strongly convex and is
    solved by a damped Newton iteration that keeps ``w`` strictly positive.
    Points have shape ``(..., I+1)`` (concentrations first, energy last).
    """

    def __init__(self, model, delta, tol=1e-10, max_iter=200):
        if delta <= 0:
            raise ValueError("delta must be positive")
        self.model = model
        self.delta = float(delta)
        self.tol = tol
        self.max_iter = max_iter

    def _h(self, w):
        return self.model.neg_entropy(w[..., :-1], w[..., -1])

    def _objective(self, w, z):
        return self._h(w) + np.sum((w - z) ** 2, -1) / (2 * self.delta)

    def prox(self, z, start=None):
        z = np.asarray(z, dtype=float)
        w = np.maximum(z, 1e-3) if start is None else np.array(start, dtype=float)
        w = np.maximum(w, 1e-12)
        eye = np.eye(z.shape[-1])
        for _ in range(self.max_iter):
            y, v = self.model.neg_gradient(w[..., :-1], w[..., -1])
            grad = np.concatenate([y, v[..., None]], -1) + (w - z) / self.delta
            if np.max(np.abs(grad)) <= self.tol:
                return w
            hess = self.model.neg_hessian(w[..., :-1], w[..., -1]) + eye / self.delta
            step = -np.linalg.solve(hess, grad[..., None])[..., 0]
            # largest step keeping w > 0, then backtrack on the objective
            neg = step < 0
            with np.errstate(divide="ignore"):
                tmax = np.where(neg, -0.99 * w / np.where(neg, step, -1.0), np.inf).min(-1)
            t = np.minimum(1.0, tmax)
            f0 = self._objective(w, z)
            slope = np.sum(grad * step, -1)
            for _ in range(60):
                trial = w + t[..., None] * step
                ok = self._objective(trial, z) <= f0 + 1e-4 * t * slope + 1e-14 * np.abs(f0)
                if np.all(ok):
                    break
                t = np.where(ok, t, 0.5 * t)
            w = w + t[..., None] * step
        y, v = self.model.neg_gradient(w[..., :-1], w[..., -1])
        grad = np.concatenate([y, v[..., None]], -1) + (w - z) / self.delta
        if np.max(np.abs(grad)) > 1e3 * self.tol:
            raise RuntimeError("Moreau envelope inner iteration did not converge")
        return w

    def value(self, z, prox=None):
        z = np.asarray(z, dtype=float)
        w = self.prox(z) if prox is None else prox
        return self._objective(w, z)

    def gradient(self, z, prox=None):
        """``DH_delta(z) = (z - prox(z)) / delta``."""
        z = np.asarray(z, dtype=float)
        w = self.prox(z) if prox is None else prox
        return (z - w) / self.delta

    def hessian(self, z, prox=None):
        """``D^2 H_delta = A (I + delta A)^-1`` with ``A = D^2 H(prox(z))``."""
        z = np.asarray(z, dtype=float)
        w = self.prox(z) if prox is None else prox
        a = self.model.neg_hessian(w[..., :-1], w[..., -1])
        eye = np.eye(z.shape[-1])
        # A (I + dA)^-1 is symmetric; solve the transposed system
        return np.swapaxes(np.linalg.solve(eye + self.delta * a, a), -1, -2)

    def dual_entropy(self, y, v):
        """Closed-form conjugate ``H*(xi) + delta/2 |xi|^2``."""
        y = np.asarray(y, dtype=float)
        v = np.asarray(v, dtype=float)
        xi2 = np.sum(y * y, -1) + v * v
        return self.model.dual_entropy(y, v) + 0.5 * self.delta * xi2


def legendre_oracle(objective, y, v, box=None, levels=DEFAULT_ORACLE_LEVELS, points=41, dim=None):
    """Brute-force ``sup_{z in box} y.c + v u - H(z)`` by grid search and zooming.

    ``objective`` is either an entropy model (its ``entropy`` is used, with
    ``-inf`` outside its domain) or a callable ``S(c, u)``. ``box`` is
    ``(lo, hi)`` applied to every coordinate, or a sequence of per-coordinate
    pairs. The grid is refined ``levels`` times around the current best point;
    the best point always belongs to the next grid, so the returned value is
    nondecreasing in ``levels``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = y.size + 1 if dim is None else dim
    entropy = getattr(objective, "entropy", objective)
    if box is None:
        box = DEFAULT_ORACLE_BOX
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = np.tile(box, (n, 1))
    if points % 2 == 0:
        points += 1

    def evaluate(grid):
        c, u = grid[..., :-1], grid[..., -1]
        with np.errstate(all="ignore"):
            try:
                s = entropy(c, u)
            except DomainError:
                s = np.full(u.shape, -np.inf)
        s = np.where(np.isfinite(s), s, -np.inf)
        return c @ y + v * u + s

    lo, hi = box[:, 0].copy(), box[:, 1].copy()
    best_val, best = -np.inf, None
    history = []
    for level in range(levels + 1):
        axes = [np.linspace(lo[k], hi[k], points) for k in range(n)]
        if best is not None:
            for k in range(n):
                axes[k] = np.union1d(axes[k], best[k])
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)
        vals = evaluate(mesh)
        k = int(np.argmax(vals))
        if vals[k] >= best_val:
            best_val, best = float(vals[k]), mesh[k]
        history.append(best_val)
        cell = (hi - lo) / (points - 1)
        lo = np.maximum(best - 2 * cell, box[:, 0])
        hi = np.minimum(best + 2 * cell, box[:, 1])
    legendre_oracle.last_history = history
    return best_val


def young_lower_bound_constant(pp, delta):
    """Constant ``c_delta = (1 + p) (delta / p)**(p / (1 + p))``.

    With it, ``|mu|**q / eta**p >= c_delta |mu|**(q / (1 + p)) - delta eta``
    holds for all real ``mu`` and ``eta > 0``.
    """
    if pp <= 0 or delta <= 0:
        raise ValueError("p and delta must be positive")
    return (1.0 + pp) * (delta / pp) ** (pp / (1.0 + pp))


def young_violations(pp, qq, delta, mu, eta, rtol=1e-12):
    """Count grid points violating the Young-type lower bound."""
    mu, eta = np.meshgrid(np.asarray(mu, float), np.asarray(eta, float), indexing="ij")
    c = young_lower_bound_constant(pp, delta)
    lhs = np.abs(mu) ** qq / eta**pp
    rhs = c * np.abs(mu) ** (qq / (1 + pp)) - delta * eta
    return int(np.count_nonzero(lhs < rhs - rtol * np.maximum(1.0, np.abs(lhs))))


def growth_constant(model, pp, qq, mu_max=10.0, eta_range=(0.1, 10.0), n=201):
    """Smallest ratio ``eta**p H*(-mu q, -eta) / (1 + |mu|**q)`` over a box.

    A strictly positive result certifies the superlinear growth bound on the
    sampled box.
    """
    mu = np.linspace(-mu_max, mu_max, n)
    eta = np.geomspace(*eta_range, n)
    mm, ee = np.meshgrid(mu, eta, indexing="ij")
    ratio = model.reduced_dual(mm, ee) * ee**pp / (1.0 + np.abs(mm) ** qq)
    return float(ratio.min())
