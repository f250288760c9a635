"""Over-parametrised Bayesian linear regression ``y = x^T w / K + eps``.

Only the projection ``x^T w`` enters the likelihood, so the model is invariant
to every translation orthogonal to ``x``. All quantities here are closed form
and O(K): covariances are kept as diagonal or diagonal-plus-rank-1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import gaussian as gs
from .gaussian import DiagPlusRank1, MomentGaussian
from .invariance import product_diag, translation_basis, translation_qmix


@dataclass(frozen=True)
class TranslationLinearModel:
    x: np.ndarray
    y: np.ndarray
    sigma2_y: float
    prior_mean: np.ndarray
    prior_var: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        mu = np.broadcast_to(np.asarray(self.prior_mean, dtype=float), x.shape).copy()
        s2 = np.broadcast_to(np.asarray(self.prior_var, dtype=float), x.shape).copy()
        if x.shape[0] < 1:
            raise ValueError("K must be at least 1")
        if x[-1] == 0.0:
            raise ValueError("last component of x must be nonzero")
        if not self.sigma2_y > 0:
            raise ValueError("noise variance must be positive")
        if np.any(~(s2 > 0)):
            raise ValueError("prior variances must be positive")
        for name, arr in (("x", x), ("y", y), ("prior_mean", mu), ("prior_var", s2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "sigma2_y", float(self.sigma2_y))

    @classmethod
    def isotropic(
        cls, k: int, y, sigma2_y: float, sigma2_0: float = 1.0, x: np.ndarray | None = None
    ) -> "TranslationLinearModel":
        """Zero-mean prior with variance ``K * sigma2_0`` per weight, ``x = 1`` by default."""
        x = np.ones(k) if x is None else x
        return cls(x, y, sigma2_y, np.zeros(k), np.full(k, k * sigma2_0))

    @property
    def k(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def prior(self) -> MomentGaussian:
        return MomentGaussian(self.prior_mean, self.prior_var)

    def is_all_ones(self) -> bool:
        return bool(np.all(self.x == 1.0))

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "sigma2_y": self.sigma2_y,
            "prior_mean": self.prior_mean.tolist(),
            "prior_var": self.prior_var.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TranslationLinearModel":
        return cls(np.array(d["x"]), np.array(d["y"]), d["sigma2_y"], np.array(d["prior_mean"]), np.array(d["prior_var"]))


@dataclass(frozen=True)
class LikelihoodParams:
    m: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).reshape(-1)
        lam = np.broadcast_to(np.asarray(self.lam, dtype=float), m.shape).copy()
        if np.any(~(lam > 0)):
            raise ValueError("likelihood variances must be positive")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "lam", lam)

    def g0(self) -> MomentGaussian:
        return MomentGaussian(self.m, self.lam)

    def to_json(self) -> str:
        return json.dumps({"m": self.m.tolist(), "lam": self.lam.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "LikelihoodParams":
        d = json.loads(text)
        return cls(np.array(d["m"]), np.array(d["lam"]))


@dataclass(frozen=True)
class ElboReport:
    ell: float
    kl: float
    elbo: float
    predictive_variance: float
    which: str


def b_matrix(x: np.ndarray) -> np.ndarray:
    """Basis of the translations that keep ``x^T w`` fixed; ``K x (K-1)``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] == 1:
        if x[0] == 0.0:
            raise ValueError("last component of x must be nonzero")
        return np.zeros((1, 0))
    return translation_basis(x)


def _noise_precision_scale(model: TranslationLinearModel) -> float:
    return model.n / (model.k**2 * model.sigma2_y)


def true_posterior(model: TranslationLinearModel) -> MomentGaussian:
    """Exact posterior; covariance ``(c x x^T + Sigma^-1)^-1`` by Woodbury."""
    c = _noise_precision_scale(model)
    s2, x, mu = model.prior_var, model.x, model.prior_mean
    sx = s2 * x
    cov = DiagPlusRank1(s2, -c / (1.0 + c * float(x @ sx)), sx)
    rhs = mu / s2 + (float(np.sum(model.y)) / (model.k * model.sigma2_y)) * x
    return MomentGaussian(cov.matvec(rhs), cov)


def mixture_likelihood(model: TranslationLinearModel, theta: LikelihoodParams) -> gs.NaturalGaussian:
    """Translation-marginalised likelihood: rank-1 precision ``x x^T / (x^T Diag(lam) x)`` at ``m``."""
    scale = 1.0 / float(np.sum(model.x**2 * theta.lam))
    return gs.NaturalGaussian.rank_one(scale, model.x, theta.m)


def q0_posterior(model: TranslationLinearModel, theta: LikelihoodParams) -> tuple[MomentGaussian, float]:
    return product_diag(model.prior, theta.g0())


def qmix_posterior(model: TranslationLinearModel, theta: LikelihoodParams) -> MomentGaussian:
    q, _ = translation_qmix(model.prior, theta.g0(), model.x)
    if model.k == 1:
        return q0_posterior(model, theta)[0]
    return q


def _require_data(model: TranslationLinearModel) -> None:
    if model.n == 0:
        raise ValueError("optimal likelihood parameters need at least one observation")


def theta_mix_star(model: TranslationLinearModel) -> LikelihoodParams:
    """Likelihood parameters for which ``qmix`` equals the true posterior.

    Any ``lam`` with ``x^T Diag(lam) x = K^2 sigma_y^2 / N`` is optimal; the
    constant vector is returned. For ``x = 1`` this is
    ``m = mean(y) 1``, ``lam = K sigma_y^2 / N 1``.
    """
    _require_data(model)
    x, k = model.x, model.k
    xx = float(x @ x)
    target = k**2 * model.sigma2_y / model.n
    lam = np.full(k, target / xx)
    if model.is_all_ones():
        return LikelihoodParams(np.full(k, float(np.mean(model.y))), lam)
    # qmix shifts mu along Sigma x by x^T(m - mu) / s; match the true mean.
    c = _noise_precision_scale(model)
    mu, s2 = model.prior_mean, model.prior_var
    b = float(np.sum(model.y)) / (k * model.sigma2_y)
    xsx = float(x @ (s2 * x))
    proj = (b - c * float(x @ mu)) / (1.0 + c * xsx) * (target + xsx)
    return LikelihoodParams(mu + (proj / xx) * x, lam)


def theta_0_star(model: TranslationLinearModel, mean: str = "optimal") -> LikelihoodParams:
    """Maximiser of the mean-field ELBO.

    The best diagonal Gaussian under ``KL(q || posterior)`` has the true
    posterior mean and precision ``diag(posterior precision)``, so
    ``1 / lam_k = N x_k^2 / (K^2 sigma_y^2)`` and ``m`` is chosen to put the
    ``q0`` mean on the true mean. ``mean="reused"`` instead reuses the location
    of :func:`theta_mix_star` (needs ``x = 1``).
    """
    _require_data(model)
    x, k = model.x, model.k
    with np.errstate(divide="ignore"):
        lam = k**2 * model.sigma2_y / (model.n * x**2)
    if mean == "reused":
        if not model.is_all_ones():
            raise ValueError("the reused-location variant is defined for x = 1 only")
        return LikelihoodParams(theta_mix_star(model).m, lam)
    if mean != "optimal":
        raise ValueError(f"unknown mean choice {mean!r}")
    target = true_posterior(model).mean
    s2, mu = model.prior_var, model.prior_mean
    finite = np.isfinite(lam)
    m = np.where(finite, ((s2 + np.where(finite, lam, 0.0)) * target - np.where(finite, lam, 0.0) * mu) / s2, mu)
    return LikelihoodParams(m, lam)


def _equal_components(v: np.ndarray) -> float:
    if not np.all(v == v[0]):
        raise ValueError("closed-form gap needs equal components; use the generic KL path")
    return float(v[0])


def invariance_gap_closed_form(model: TranslationLinearModel, theta: LikelihoodParams) -> float:
    """``(K-1)/2 [ln((s2 + lam)/lam) + lam/(s2 + lam) - 1]`` for equal components."""
    if not model.is_all_ones():
        raise ValueError("closed-form gap is stated for x = 1")
    lam = _equal_components(theta.lam)
    s2 = _equal_components(model.prior_var)
    _equal_components(theta.m)
    _equal_components(model.prior_mean)
    ratio = lam / (s2 + lam)
    return 0.5 * (model.k - 1) * (-math.log(ratio) + ratio - 1.0)


def invariance_gap(model: TranslationLinearModel, theta: LikelihoodParams) -> float:
    """``KL(q0 || qmix)`` through the generic structured Gaussian KL."""
    if model.k == 1:
        return 0.0
    q0, _ = q0_posterior(model, theta)
    return gs.kl_divergence(q0, qmix_posterior(model, theta))


def _projection_moments(model: TranslationLinearModel, q: MomentGaussian) -> tuple[float, float]:
    mean = float(model.x @ q.mean) / model.k
    if isinstance(q.cov, DiagPlusRank1):
        var = q.cov.quad(model.x)
    elif q.cov.ndim == 1:
        var = float(np.sum(model.x**2 * q.cov))
    else:
        var = float(model.x @ q.cov @ model.x)
    return mean, var / model.k**2


def expected_log_likelihood(model: TranslationLinearModel, q: MomentGaussian) -> float:
    f_mean, f_var = _projection_moments(model, q)
    resid = float(np.sum((model.y - f_mean) ** 2)) + model.n * f_var
    return -resid / (2.0 * model.sigma2_y) - 0.5 * model.n * math.log(2.0 * math.pi * model.sigma2_y)


def posterior_of(model: TranslationLinearModel, theta: LikelihoodParams, which: str) -> MomentGaussian:
    if which == "mean_field":
        return q0_posterior(model, theta)[0]
    if which == "invariance_abiding":
        return qmix_posterior(model, theta)
    raise ValueError(f"unknown posterior {which!r}")


def elbo_terms(model: TranslationLinearModel, theta: LikelihoodParams, which: str) -> ElboReport:
    q = posterior_of(model, theta, which)
    ell = expected_log_likelihood(model, q)
    kl = gs.kl_divergence(q, model.prior)
    _, f_var = _projection_moments(model, q)
    return ElboReport(ell, kl, ell - kl, f_var + model.sigma2_y, which)


def log_evidence(model: TranslationLinearModel) -> float:
    """``ln p(y)`` as a chain of one-observation marginals and conditionings."""
    affine = gs.AffineMap(model.x[None, :] / model.k, np.zeros(1))
    noise = np.array([[model.sigma2_y]])
    post = MomentGaussian(model.prior_mean, np.diag(model.prior_var))
    total = 0.0
    for yn in model.y:
        marginal = gs.convolve_affine(affine, noise, post)
        total += gs.log_density(marginal, np.array([yn]))
        post = gs.condition_affine(affine, noise, post, np.array([yn]))
    return float(total)


def prior_predictive_variance(model: TranslationLinearModel) -> float:
    return float(np.sum(model.x**2 * model.prior_var)) / model.k**2 + model.sigma2_y
