"""Mean-field versus invariance-abiding posteriors built from one likelihood approximation.

A Gaussian likelihood approximation ``g0(w; m, lam)`` and a Gaussian prior
``p(w)`` give two posteriors:

* ``q0 ∝ p(w) g0(w)``, the mean-field posterior;
* ``qmix ∝ p(w) E_r[g0(t(w, r))]``, where ``t(., r)`` ranges over the
  transformations that leave the true likelihood unchanged.

For translations the average over ``r`` is the infinite-variance limit and
``qmix`` is Gaussian with a diagonal-minus-rank-1 covariance. For
permutations ``qmix`` is a finite Gaussian mixture.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import gaussian as gs
from .gaussian import DiagPlusRank1, MomentGaussian
from .mc import McEstimate, combine_difference, mc_expectation, mc_kl

DEFAULT_CONDITION_TOL = 1e-8
DEFAULT_COMPONENT_CAP = 10**6
FD_STEP = 1e-6


@dataclass(frozen=True)
class GaussianMixture:
    """Finite mixture of moment-form Gaussians with log weights."""

    log_weights: np.ndarray
    components: tuple[MomentGaussian, ...]

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if lw.shape[0] != len(self.components):
            raise ValueError("one log weight per component required")
        lw = lw - logsumexp(lw)
        object.__setattr__(self, "log_weights", lw)
        object.__setattr__(self, "components", tuple(self.components))

    @classmethod
    def uniform(cls, components: Sequence[MomentGaussian]) -> "GaussianMixture":
        return cls(np.zeros(len(components)), tuple(components))

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    def log_density(self, w: np.ndarray) -> np.ndarray:
        w2 = np.atleast_2d(w)
        parts = np.stack([gs.log_density(c, w2) for c in self.components])
        return logsumexp(parts + self.log_weights[:, None], axis=0)

    def sample_from(self, rng: np.random.Generator, count: int) -> np.ndarray:
        idx = rng.choice(self.n_components, size=count, p=np.exp(self.log_weights))
        out = np.empty((count, self.dim))
        for k in np.unique(idx):
            sel = idx == k
            out[sel] = gs.sample_from(self.components[k], rng, int(sel.sum()))
        return out

    def mean(self) -> np.ndarray:
        wts = np.exp(self.log_weights)
        return sum(wt * c.mean for wt, c in zip(wts, self.components))


Distribution = MomentGaussian | GaussianMixture


def _log_density(d: Distribution, w: np.ndarray) -> np.ndarray:
    if isinstance(d, GaussianMixture):
        return d.log_density(w)
    return np.atleast_1d(gs.log_density(d, np.atleast_2d(w)))


def _sampler(d: Distribution):
    if isinstance(d, GaussianMixture):
        return d.sample_from
    return lambda rng, n: gs.sample_from(d, rng, n)


@dataclass(frozen=True)
class InvarianceTransform:
    """Likelihood-preserving map ``t(w, r)`` with its parameter remapping.

    ``apply`` accepts a single point or a batch of points. ``logdet`` is the
    exact ``log |det dt/dw|`` for parameter ``r``.
    """

    kind: str
    dim: int
    apply: Callable[[np.ndarray, Any], np.ndarray]
    remap: Callable[[Any], Any]
    sample_params: Callable[[np.random.Generator, int], list]
    logdet: Callable[[Any], float]


def translation_basis(x: np.ndarray) -> np.ndarray:
    """``K x (K-1)`` basis ``[I; -x_{1:K-1}^T / x_K]`` of the directions orthogonal to ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] == 0:
        raise ValueError("empty input vector")
    if x[-1] == 0.0:
        raise ValueError("last component of x must be nonzero")
    k = x.shape[0]
    return np.vstack([np.eye(k - 1), -x[None, :-1] / x[-1]])


def translation_transform(
    basis: np.ndarray, prior_var: np.ndarray, lam: np.ndarray, spread: float = 3.0
) -> InvarianceTransform:
    """``t(w, r) = w - B r`` with ``phi`` derived from the posterior precision split.

    The translated product ``p(w) g0(w - B r)`` is ``q0`` shifted by
    ``D B r`` with ``D = Diag(sigma^2 / (sigma^2 + lam))``. ``phi(r)`` is the
    least-squares ``r'`` with ``B r' = D B r``; it is exact whenever ``D B r``
    stays in the span of ``B``.
    """
    b = np.asarray(basis, dtype=float)
    k, km1 = b.shape
    shrink = np.asarray(prior_var, float) / (np.asarray(prior_var, float) + np.asarray(lam, float))
    if km1 == 0:
        remap_matrix = np.zeros((0, 0))
    else:
        remap_matrix = np.linalg.lstsq(b, shrink[:, None] * b, rcond=None)[0]

    def apply(w, r):
        return np.asarray(w) - b @ np.asarray(r)

    def sample_params(rng, n):
        return list(rng.normal(0.0, spread, size=(n, km1)))

    return InvarianceTransform(
        "translation", k, apply, lambda r: remap_matrix @ np.asarray(r), sample_params, lambda r: 0.0
    )


def permutation_transform(matrices: Sequence[np.ndarray]) -> InvarianceTransform:
    """``t(w, r) = P_r w`` over a finite set of permutation matrices; ``phi`` is the identity."""
    mats = [np.asarray(p, dtype=float) for p in matrices]
    k = mats[0].shape[0]

    def apply(w, r):
        w = np.asarray(w)
        return w @ mats[r].T if w.ndim == 2 else mats[r] @ w

    def sample_params(rng, n):
        return list(rng.integers(0, len(mats), size=n))

    def logdet(r):
        return float(np.linalg.slogdet(mats[r])[1])

    t = InvarianceTransform("permutation", k, apply, lambda r: r, sample_params, logdet)
    object.__setattr__(t, "matrices", tuple(mats))
    return t


def scaling_transform(dim: int, factor: float = 2.0) -> InvarianceTransform:
    """``w -> factor * w``; not volume preserving, kept as a negative control."""
    return InvarianceTransform(
        "scaling",
        dim,
        lambda w, r: factor * np.asarray(w),
        lambda r: r,
        lambda rng, n: [None] * n,
        lambda r: dim * math.log(abs(factor)),
    )


@dataclass(frozen=True)
class ConstructedPosteriorPair:
    prior: MomentGaussian
    g0: MomentGaussian
    transform: InvarianceTransform
    q0: MomentGaussian
    qmix: Distribution
    log_z0: float
    log_zmix: float


def product_diag(prior: MomentGaussian, g0: MomentGaussian) -> tuple[MomentGaussian, float]:
    """Normalised product of two diagonal Gaussians and ``log int p g0``."""
    if not (prior.is_diagonal and g0.is_diagonal):
        raise ValueError("product_diag needs diagonal operands")
    s2, lam = prior.cov, g0.cov
    var = s2 * lam / (s2 + lam)
    mean = (prior.mean * lam + g0.mean * s2) / (s2 + lam)
    log_z = float(np.sum(-0.5 * (gs.LOG_2PI + np.log(s2 + lam) + (prior.mean - g0.mean) ** 2 / (s2 + lam))))
    return MomentGaussian(mean, var), log_z


def translation_qmix(
    prior: MomentGaussian, g0: MomentGaussian, x: np.ndarray, rank1_sign: float = -1.0
) -> tuple[MomentGaussian, float]:
    """Closed-form invariance-abiding posterior for translations orthogonal to ``x``.

    Returns ``N(mu + (x^T(m - mu) / s) Sigma x, Sigma - (Sigma x)(Sigma x)^T / s)``
    with ``s = x^T (V + Sigma) x`` and the log normaliser of
    ``p(w) exp(-(x^T(w - m))^2 / (2 x^T V x))``. ``rank1_sign`` exists only
    so that verification runs can inject a known-wrong covariance.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    s2, lam = prior.cov, g0.cov
    xvx = float(np.sum(x**2 * lam))
    xsx = float(np.sum(x**2 * s2))
    if xvx == 0.0 and xsx == 0.0:
        return prior, 0.0
    s = xvx + xsx
    sx = s2 * x
    shift = float(x @ (g0.mean - prior.mean))
    mean = prior.mean + (shift / s) * sx
    cov = DiagPlusRank1(s2, rank1_sign / s, sx)
    log_z = -0.5 * math.log(s / xvx) - 0.5 * shift**2 / s
    return MomentGaussian(mean, cov), log_z


def translation_pair(
    prior: MomentGaussian, g0: MomentGaussian, x: np.ndarray, spread: float = 3.0, rank1_sign: float = -1.0
) -> ConstructedPosteriorPair:
    x = np.asarray(x, dtype=float).reshape(-1)
    q0, log_z0 = product_diag(prior, g0)
    qmix, log_zmix = translation_qmix(prior, g0, x, rank1_sign)
    if x.shape[0] > 1:
        basis = translation_basis(x)
    else:
        basis = np.zeros((1, 0))
    t = translation_transform(basis, prior.cov, g0.cov, spread)
    return ConstructedPosteriorPair(prior, g0, t, q0, qmix, log_z0, log_zmix)


def permutation_pair(
    prior: MomentGaussian, g0: MomentGaussian, matrices: Sequence[np.ndarray]
) -> ConstructedPosteriorPair:
    """Pair for a finite permutation group.

    Component ``r`` of ``qmix`` is ``p(w) g0(P_r w)`` normalised, weighted by
    its normaliser; with an isotropic prior all weights are equal.
    """
    mats = [np.asarray(p, dtype=float) for p in matrices]
    q0, log_z0 = product_diag(prior, g0)
    comps, log_zs = [], []
    for p in mats:
        perm = np.argmax(p, axis=0)  # (P^T v)_i = v[perm[i]]
        g_perm = MomentGaussian(g0.mean[perm], g0.cov[perm])
        comp, log_z = product_diag(prior, g_perm)
        comps.append(comp)
        log_zs.append(log_z)
    log_zs = np.array(log_zs)
    qmix = GaussianMixture(log_zs, tuple(comps))
    log_zmix = float(logsumexp(log_zs) - math.log(len(mats)))
    return ConstructedPosteriorPair(prior, g0, permutation_transform(mats), q0, qmix, log_z0, log_zmix)


@dataclass
class ConditionReport:
    condition1_max_log_density_gap: float | None
    condition2_max_logdet_deviation: float | None
    samples_checked: int
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        checked = [
            v for v in (self.condition1_max_log_density_gap, self.condition2_max_logdet_deviation) if v is not None
        ]
        self.passed = bool(checked) and all(v < self.tol for v in checked)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def verify_condition_1(
    pair: ConstructedPosteriorPair, n_samples: int = 1000, seed: int = 0, tol: float = DEFAULT_CONDITION_TOL
) -> ConditionReport:
    """Check ``p(w) g0(t(w, r)) ∝ p(t(w, phi(r))) g0(t(w, phi(r)))`` in ``w``.

    Both sides are compared in log space at two points ``w1, w2`` per sampled
    ``r``; the reported gap is ``|d(w1) - d(w2)|`` where ``d`` is the log ratio,
    so an ``r``-dependent normalising constant is allowed.
    """
    rng = gs.make_rng(seed)
    t = pair.transform
    rs = t.sample_params(rng, n_samples)
    w1 = gs.sample_from(pair.q0, rng, n_samples)
    w2 = gs.sample_from(pair.q0, rng, n_samples)

    def log_ratio(w, r):
        lhs = gs.log_density(pair.prior, w) + gs.log_density(pair.g0, t.apply(w, r))
        moved = t.apply(w, t.remap(r))
        rhs = gs.log_density(pair.prior, moved) + gs.log_density(pair.g0, moved)
        return lhs - rhs

    worst = 0.0
    for i, r in enumerate(rs):
        gap = abs(log_ratio(w1[i], r) - log_ratio(w2[i], r))
        worst = max(worst, gap)
    return ConditionReport(worst, None, n_samples, tol)


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], w: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    k = w.shape[0]
    jac = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = step
        jac[:, j] = (fn(w + e) - fn(w - e)) / (2.0 * step)
    return jac


def verify_condition_2(
    transform: InvarianceTransform, n_samples: int = 100, seed: int = 0, tol: float = DEFAULT_CONDITION_TOL
) -> ConditionReport:
    """Volume preservation: ``log |det dt/dw|`` by central differences.

    The finite-difference value must also agree with the transform's exact
    log-determinant; a disagreement is reported as a deviation.
    """
    rng = gs.make_rng(seed)
    rs = transform.sample_params(rng, n_samples)
    ws = rng.standard_normal((n_samples, transform.dim))
    worst = 0.0
    for w, r in zip(ws, rs):
        jac = fd_jacobian(lambda v: transform.apply(v, r), w)
        fd = float(np.linalg.slogdet(jac)[1])
        exact = transform.logdet(r)
        worst = max(worst, abs(fd), abs(exact), abs(fd - exact))
    return ConditionReport(None, worst, n_samples, tol)


def verify_conditions(
    pair: ConstructedPosteriorPair, n_samples: int = 1000, seed: int = 0, tol: float = DEFAULT_CONDITION_TOL
) -> ConditionReport:
    c1 = verify_condition_1(pair, n_samples, seed, tol)
    c2 = verify_condition_2(pair.transform, min(n_samples, 200), seed + 1, tol)
    return ConditionReport(
        c1.condition1_max_log_density_gap, c2.condition2_max_logdet_deviation, n_samples, tol
    )


@dataclass(frozen=True)
class EllComparison:
    ell_q0: McEstimate
    ell_qmix: McEstimate
    z_score: float


def ell_equivalence_check(
    pair: ConstructedPosteriorPair,
    log_likelihood: Callable[[np.ndarray], np.ndarray],
    n_samples: int = 100_000,
    seed: int = 0,
) -> EllComparison:
    """Monte-Carlo estimates of the expected log-likelihood under ``q0`` and ``qmix``.

    ``log_likelihood`` maps a ``(n, K)`` batch of weights to ``n`` values.
    """
    e0 = mc_expectation(_sampler(pair.q0), log_likelihood, n_samples, seed)
    e1 = mc_expectation(_sampler(pair.qmix), log_likelihood, n_samples, seed + 1)
    diff, se = combine_difference(e0, e1)
    z = 0.0 if se == 0.0 and diff == 0.0 else diff / se
    return EllComparison(e0, e1, z)


@dataclass(frozen=True)
class GapResult:
    gap: float
    stderr: float
    method: str


def invariance_gap(
    pair: ConstructedPosteriorPair,
    method: str = "closed_form",
    n_samples: int = 100_000,
    seed: int = 0,
    max_components: int = DEFAULT_COMPONENT_CAP,
) -> GapResult:
    """``KL(q0 || qmix)``, exactly or by Monte Carlo over ``q0``."""
    if method == "closed_form":
        if not isinstance(pair.qmix, MomentGaussian):
            raise ValueError("closed form needs a Gaussian qmix")
        return GapResult(gs.kl_divergence(pair.q0, pair.qmix), 0.0, method)
    if method != "monte_carlo":
        raise ValueError(f"unknown method {method!r}")
    if isinstance(pair.qmix, GaussianMixture) and pair.qmix.n_components > max_components:
        raise ValueError(f"mixture has {pair.qmix.n_components} components, cap is {max_components}")
    est = mc_kl(
        _sampler(pair.q0),
        lambda w: _log_density(pair.q0, w),
        lambda w: _log_density(pair.qmix, w),
        n_samples,
        seed,
    )
    return GapResult(est.value, est.stderr, method)


@dataclass(frozen=True)
class GapIdentity:
    kl_q0_p: float
    kl_qmix_p: float
    kl_q0_qmix: float
    residual: float
    stderr: float


def gap_identity_check(pair: ConstructedPosteriorPair, n_samples: int = 100_000, seed: int = 0) -> GapIdentity:
    """Residual of ``KL(q0||p) - KL(qmix||p) - KL(q0||qmix)``."""
    kl0 = gs.kl_divergence(pair.q0, pair.prior)
    if isinstance(pair.qmix, MomentGaussian):
        klm = gs.kl_divergence(pair.qmix, pair.prior)
        gap = gs.kl_divergence(pair.q0, pair.qmix)
        return GapIdentity(kl0, klm, gap, kl0 - klm - gap, 0.0)
    est_m = mc_kl(
        _sampler(pair.qmix),
        lambda w: _log_density(pair.qmix, w),
        lambda w: _log_density(pair.prior, w),
        n_samples,
        seed,
    )
    est_g = invariance_gap(pair, "monte_carlo", n_samples, seed + 1)
    residual = kl0 - est_m.value - est_g.gap
    return GapIdentity(kl0, est_m.value, est_g.gap, residual, math.hypot(est_m.stderr, est_g.stderr))


def data_related_bound(prior_output_variances, y, sigma2_y: float) -> float:
    """``sum_n (sigma_L^2(x_n) + y_n^2) / (2 sigma_y^2)``: best-case minus prior ELL."""
    if not sigma2_y > 0:
        raise ValueError("noise variance must be positive")
    v = np.asarray(prior_output_variances, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    v = np.broadcast_to(v, y.shape)
    return float(np.sum(v + y**2) / (2.0 * sigma2_y))


def finite_beta_likelihood(g0: MomentGaussian, basis: np.ndarray, beta: float) -> MomentGaussian:
    """``int N(w; m + B delta, Diag(lam)) N(delta; 0, beta^2 I) d delta`` for finite ``beta``."""
    b = np.asarray(basis, dtype=float)
    prior_delta = MomentGaussian(np.zeros(b.shape[1]), np.full(b.shape[1], beta**2))
    return gs.convolve_affine(gs.AffineMap(b, g0.mean), np.diag(g0.cov), prior_delta)
