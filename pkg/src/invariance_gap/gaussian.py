"""Exact multivariate Gaussian algebra.

Two parameterisations are used throughout:

* moment form ``N(w; mean, cov)`` where ``cov`` is a variance vector
  (diagonal fast path), a dense symmetric matrix, or a :class:`DiagPlusRank1`
  structured matrix ``Diag(d) + scale * u u^T``;
* canonical form ``G(w; eta, precision)`` with ``eta = precision @ mean``.
  Canonical Gaussians may be rank deficient (the translation-marginalised
  likelihood is), in which case they are kept in structured rank-1 form and
  never inverted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import linalg

PSD_RTOL = 1e-10
SYM_RTOL = 1e-12
COND_MAX = 1e12
LOG_2PI = math.log(2.0 * math.pi)


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a covariance or precision cannot be factorised."""


@dataclass(frozen=True)
class DiagPlusRank1:
    """Structured symmetric matrix ``Diag(diag) + scale * u u^T``.

    ``scale`` may be negative (posterior covariances are diagonal *minus*
    rank-1). All operations are O(K).
    """

    diag: np.ndarray
    scale: float
    u: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.diag, dtype=float).reshape(-1)
        u = np.asarray(self.u, dtype=float).reshape(-1)
        if d.shape != u.shape:
            raise ValueError(f"diag {d.shape} and u {u.shape} differ in shape")
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def dim(self) -> int:
        return self.diag.shape[0]

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + self.scale * np.outer(self.u, self.u)

    def diagonal(self) -> np.ndarray:
        return self.diag + self.scale * self.u**2

    def _denominator(self) -> float:
        return 1.0 + self.scale * float(np.sum(self.u**2 / self.diag))

    def logdet(self) -> float:
        den = self._denominator()
        if den <= 0.0:
            raise SingularMatrixError("diag-plus-rank-1 matrix is not positive definite")
        return float(np.sum(np.log(self.diag))) + math.log(den)

    def quad(self, x: np.ndarray) -> float:
        """Return ``x^T M x``."""
        return float(np.dot(x**2, self.diag) + self.scale * np.dot(self.u, x) ** 2)

    def inverse(self) -> "DiagPlusRank1":
        """Inverse via the rank-1 Woodbury identity, again diag-plus-rank-1."""
        den = self._denominator()
        if abs(den) < 1e-14:
            raise SingularMatrixError("singular rank-1 update")
        dinv = 1.0 / self.diag
        return DiagPlusRank1(dinv, -self.scale / den, dinv * self.u)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.diag * x + self.scale * self.u * np.dot(self.u, x)


Covariance = Union[np.ndarray, DiagPlusRank1]


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _check_psd(m: np.ndarray, what: str) -> None:
    eig = np.linalg.eigvalsh(m)
    top = max(float(eig[-1]), 0.0)
    if eig[0] < -PSD_RTOL * max(top, 1.0):
        raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {eig[0]:.3e})")


@dataclass(frozen=True)
class MomentGaussian:
    """Gaussian in moment form.

    ``cov`` is a 1-D variance vector, a dense 2-D matrix or a
    :class:`DiagPlusRank1`.
    """

    mean: np.ndarray
    cov: Covariance

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = self.cov
        if isinstance(cov, DiagPlusRank1):
            if cov.dim != mean.shape[0]:
                raise ValueError("covariance dimension does not match mean")
        else:
            cov = np.array(cov, dtype=float)
            if cov.ndim == 0:
                cov = cov.reshape(1)
            if cov.ndim == 1:
                if cov.shape != mean.shape:
                    raise ValueError(f"variance vector {cov.shape} vs mean {mean.shape}")
                if np.any(~(cov > 0)):
                    raise ValueError("diagonal variances must be > 0")
            elif cov.ndim == 2:
                if cov.shape != (mean.shape[0], mean.shape[0]):
                    raise ValueError(f"covariance {cov.shape} vs mean {mean.shape}")
                scale = max(float(np.max(np.abs(cov))), 1e-300)
                if np.max(np.abs(cov - cov.T)) > SYM_RTOL * scale:
                    raise ValueError("covariance is not symmetric")
                cov = _symmetrize(cov)
                _check_psd(cov, "covariance")
            else:
                raise ValueError("covariance must be 1-D or 2-D")
            cov.setflags(write=False)
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return isinstance(self.cov, np.ndarray) and self.cov.ndim == 1

    def dense_cov(self) -> np.ndarray:
        if isinstance(self.cov, DiagPlusRank1):
            return self.cov.dense()
        if self.cov.ndim == 1:
            return np.diag(self.cov)
        return np.array(self.cov)

    def variances(self) -> np.ndarray:
        if isinstance(self.cov, DiagPlusRank1):
            return self.cov.diagonal()
        if self.cov.ndim == 1:
            return np.array(self.cov)
        return np.diag(self.cov).copy()

    def to_json(self) -> str:
        d = {"mean": self.mean.tolist()}
        if self.is_diagonal:
            d["diag"] = self.cov.tolist()
        else:
            d["cov"] = self.dense_cov().tolist()
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "MomentGaussian":
        d = json.loads(text)
        if "diag" in d:
            return cls(np.array(d["mean"]), np.array(d["diag"]))
        return cls(np.array(d["mean"]), np.array(d["cov"]))


@dataclass(frozen=True)
class NaturalGaussian:
    """Gaussian in canonical form ``(eta, precision)``.

    When constructed through :meth:`rank_one` the precision is
    ``scale * direction direction^T`` and ``location`` records the point the
    degenerate kernel peaks on; such objects are never inverted.
    """

    eta: np.ndarray
    precision: np.ndarray
    scale: float | None = None
    direction: np.ndarray | None = None
    location: np.ndarray | None = None

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float).reshape(-1)
        prec = np.asarray(self.precision, dtype=float)
        if prec.shape != (eta.shape[0], eta.shape[0]):
            raise ValueError(f"precision {prec.shape} vs eta {eta.shape}")
        prec = _symmetrize(prec)
        _check_psd(prec, "precision")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "precision", prec)

    @classmethod
    def rank_one(cls, scale: float, direction: np.ndarray, location: np.ndarray) -> "NaturalGaussian":
        if not scale > 0:
            raise ValueError("rank-1 scale must be positive")
        d = np.asarray(direction, dtype=float).reshape(-1)
        loc = np.asarray(location, dtype=float).reshape(-1)
        prec = scale * np.outer(d, d)
        eta = scale * d * float(d @ loc)
        return cls(eta, prec, float(scale), d, loc)

    @property
    def dim(self) -> int:
        return self.eta.shape[0]

    @property
    def is_structured(self) -> bool:
        return self.direction is not None

    def is_full_rank(self) -> bool:
        if self.is_structured and self.dim > 1:
            return False
        return np.linalg.cond(self.precision) < COND_MAX


def _cholesky(m: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(_symmetrize(m), lower=True)
    except linalg.LinAlgError as exc:
        raise SingularMatrixError(f"{what} is not positive definite") from exc


def to_natural(g: MomentGaussian) -> NaturalGaussian:
    """Moment form to canonical form, ``Lambda = Sigma^-1``, ``eta = Lambda mu``."""
    if g.is_diagonal:
        prec = np.diag(1.0 / g.cov)
        return NaturalGaussian(g.mean / g.cov, prec)
    if isinstance(g.cov, DiagPlusRank1):
        inv = g.cov.inverse()
        return NaturalGaussian(inv.matvec(g.mean), inv.dense())
    chol = _cholesky(g.cov, "covariance")
    prec = linalg.cho_solve((chol, True), np.eye(g.dim))
    return NaturalGaussian(prec @ g.mean, prec)


def to_moment(n: NaturalGaussian) -> MomentGaussian:
    if not n.is_full_rank():
        raise SingularMatrixError("precision is rank deficient; no moment form exists")
    chol = _cholesky(n.precision, "precision")
    cov = linalg.cho_solve((chol, True), np.eye(n.dim))
    return MomentGaussian(cov @ n.eta, _symmetrize(cov))


def _log_normalizer(eta: np.ndarray, prec: np.ndarray) -> float:
    """``log int exp(eta^T w - w^T prec w / 2) dw`` for full-rank ``prec``."""
    chol = _cholesky(prec, "precision")
    sol = linalg.cho_solve((chol, True), eta)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return 0.5 * float(eta @ sol) + 0.5 * eta.shape[0] * LOG_2PI - 0.5 * logdet


def _factor_log_constant(n: NaturalGaussian) -> float:
    # Full-rank factors are normalised densities; rank-deficient ones are the
    # kernel exp(-(w - loc)^T prec (w - loc) / 2), which peaks at 1.
    if n.is_full_rank():
        return _log_normalizer(n.eta, n.precision)
    if n.location is None:
        raise SingularMatrixError("rank-deficient factor needs a location for its normaliser")
    return 0.5 * float(n.eta @ n.location)


def product(a: NaturalGaussian, b: NaturalGaussian) -> tuple[NaturalGaussian, float]:
    """Product of two Gaussian factors.

    Returns the canonical parameters ``(eta_a + eta_b, prec_a + prec_b)`` and
    ``log Z = log int a(w) b(w) dw``. Full-rank factors count as normalised
    densities, a rank-deficient factor as its unit-peak kernel.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    eta = a.eta + b.eta
    prec = a.precision + b.precision
    out = NaturalGaussian(eta, prec)
    log_z = _log_normalizer(eta, prec) - _factor_log_constant(a) - _factor_log_constant(b)
    return out, log_z


@dataclass(frozen=True)
class AffineMap:
    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        b = np.asarray(self.offset, dtype=float).reshape(-1)
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"matrix {a.shape} and offset {b.shape} disagree")
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "offset", b)


def _as_dense(cov, n: int) -> np.ndarray:
    if isinstance(cov, DiagPlusRank1):
        return cov.dense()
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        return np.full((n, n), float(cov)) if n == 1 else np.eye(n) * float(cov)
    if cov.ndim == 1:
        return np.diag(cov)
    return cov


def convolve_affine(affine: AffineMap, noise_cov, prior: MomentGaussian) -> MomentGaussian:
    """Marginal of ``x`` under ``x | theta ~ N(A theta + b, V)``, ``theta ~ prior``."""
    a = affine.matrix
    n, k = a.shape
    if k != prior.dim:
        raise ValueError(f"map expects dimension {k}, prior has {prior.dim}")
    v = _as_dense(noise_cov, n)
    if v.shape != (n, n):
        raise ValueError(f"noise covariance {v.shape} does not match output dimension {n}")
    sigma = prior.dense_cov()
    return MomentGaussian(a @ prior.mean + affine.offset, _symmetrize(v + a @ sigma @ a.T))


def condition_affine(
    affine: AffineMap, noise_cov, prior: MomentGaussian, observation: np.ndarray
) -> MomentGaussian:
    """Posterior of ``theta`` after observing ``x`` under the affine-Gaussian model."""
    a = affine.matrix
    n, k = a.shape
    if k != prior.dim:
        raise ValueError(f"map expects dimension {k}, prior has {prior.dim}")
    v = _as_dense(noise_cov, n)
    if np.linalg.cond(v) >= COND_MAX:
        raise SingularMatrixError("observation noise covariance is singular")
    obs = np.asarray(observation, dtype=float).reshape(-1)
    v_chol = _cholesky(v, "noise covariance")
    vinv_a = linalg.cho_solve((v_chol, True), a)
    prior_nat = to_natural(prior)
    c = a.T @ vinv_a + prior_nat.precision
    rhs = vinv_a.T @ (obs - affine.offset) + prior_nat.eta
    return to_moment(NaturalGaussian(rhs, c))


def woodbury_rank1(c_inv_diag: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``(C + u v^T)^-1`` for diagonal ``C`` given the diagonal of ``C^-1``."""
    ci = np.asarray(c_inv_diag, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    if np.any(ci <= 0):
        raise ValueError("C must be diagonal positive")
    ciu = ci * u
    civ = ci * v
    den = 1.0 + float(v @ ciu)
    if abs(den) < 1e-14:
        raise SingularMatrixError("1 + v^T C^-1 u vanishes; update is singular")
    return np.diag(ci) - np.outer(ciu, civ) / den


def _logdet(cov) -> float:
    if isinstance(cov, DiagPlusRank1):
        return cov.logdet()
    if cov.ndim == 1:
        return float(np.sum(np.log(cov)))
    chol = _cholesky(cov, "covariance")
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def _trace_solve(p_cov, q_cov) -> float:
    """``tr(P^-1 Q)`` with fast paths for structured operands."""
    if isinstance(p_cov, np.ndarray) and p_cov.ndim == 1:
        if isinstance(q_cov, DiagPlusRank1):
            return float(np.sum(q_cov.diagonal() / p_cov))
        if q_cov.ndim == 1:
            return float(np.sum(q_cov / p_cov))
        return float(np.sum(np.diag(q_cov) / p_cov))
    if isinstance(p_cov, DiagPlusRank1):
        inv = p_cov.inverse()
        if isinstance(q_cov, np.ndarray) and q_cov.ndim == 1:
            return float(np.sum(inv.diag * q_cov) + inv.scale * np.sum(inv.u**2 * q_cov))
        qd = _as_dense(q_cov, p_cov.dim)
        return float(np.sum(inv.diag * np.diag(qd)) + inv.scale * inv.u @ qd @ inv.u)
    chol = _cholesky(p_cov, "covariance")
    qd = _as_dense(q_cov, p_cov.shape[0])
    return float(np.trace(linalg.cho_solve((chol, True), qd)))


def _mahalanobis(cov, d: np.ndarray) -> float:
    if isinstance(cov, DiagPlusRank1):
        return cov.inverse().quad(d)
    if cov.ndim == 1:
        return float(np.sum(d**2 / cov))
    chol = _cholesky(cov, "covariance")
    return float(d @ linalg.cho_solve((chol, True), d))


def kl_divergence(q: MomentGaussian, p: MomentGaussian) -> float:
    """Closed-form ``KL(q || p)`` between two full-rank Gaussians."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    d = p.mean - q.mean
    if q.is_diagonal and p.is_diagonal:
        ratio = q.cov / p.cov
        return 0.5 * float(np.sum(ratio - 1.0 - np.log(ratio) + d**2 / p.cov))
    kl = 0.5 * (
        _trace_solve(p.cov, q.cov) + _mahalanobis(p.cov, d) - q.dim + _logdet(p.cov) - _logdet(q.cov)
    )
    return float(kl)


def log_density(g: MomentGaussian, w: np.ndarray) -> np.ndarray | float:
    """Log density at a point ``(K,)`` or a batch of points ``(n, K)``."""
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    w2 = np.atleast_2d(w)
    d = w2 - g.mean
    if g.is_diagonal:
        maha = np.sum(d**2 / g.cov, axis=1)
        logdet = float(np.sum(np.log(g.cov)))
    else:
        if isinstance(g.cov, DiagPlusRank1):
            inv = g.cov.inverse()
            maha = np.sum(d**2 * inv.diag, axis=1) + inv.scale * (d @ inv.u) ** 2
            logdet = g.cov.logdet()
        else:
            chol = _cholesky(g.cov, "covariance")
            sol = linalg.solve_triangular(chol, d.T, lower=True)
            maha = np.sum(sol**2, axis=0)
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    out = -0.5 * (g.dim * LOG_2PI + logdet + maha)
    return float(out[0]) if single else out


def make_rng(seed: int, chunk: int = 0) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``(seed, chunk)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), int(chunk)])))


def sample_from(g: MomentGaussian, rng: np.random.Generator, count: int) -> np.ndarray:
    z = rng.standard_normal((count, g.dim))
    if g.is_diagonal:
        return g.mean + z * np.sqrt(g.cov)
    if isinstance(g.cov, DiagPlusRank1):
        # D^1/2 (I + gamma v v^T / |v|^2) with (1 + gamma)^2 = 1 + scale |v|^2
        c = g.cov
        root_d = np.sqrt(c.diag)
        v = c.u / root_d
        vv = float(v @ v)
        inner = 1.0 + c.scale * vv
        if inner <= 0.0:
            raise SingularMatrixError("diag-plus-rank-1 covariance is not positive definite")
        gamma = (math.sqrt(inner) - 1.0) / vv if vv > 0 else 0.0
        return g.mean + root_d * (z + gamma * np.outer(z @ v, v))
    chol = _cholesky(g.dense_cov(), "covariance")
    return g.mean + z @ chol.T


def sample(g: MomentGaussian, seed: int, count: int) -> np.ndarray:
    """``count`` draws as a ``(count, K)`` array; deterministic in ``seed``."""
    return sample_from(g, make_rng(seed), count)
