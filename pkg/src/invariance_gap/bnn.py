"""Bias-free multilayer perceptrons and their weight-space symmetries.

Weights of layer ``l`` form an ``(n_l, n_{l-1})`` matrix whose row ``j`` is
the incoming weight vector of node ``j``. The flat weight vector stacks these
matrices row-major, layer after layer, so every node owns a contiguous slice.

Two symmetry families are covered: translating one node's incoming weights
orthogonally to its input activation (exact at a single input), and
permuting hidden units (exact everywhere). A layer-by-layer fit of the
translation-invariant posterior is provided for toy networks; it optimises a
fixed-noise Monte-Carlo objective with finite-difference quasi-Newton steps.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy import optimize

from . import gaussian as gs
from .gaussian import DiagPlusRank1, MomentGaussian
from .invariance import GaussianMixture, translation_qmix
from .mc import McEstimate

ACTIVATIONS = {
    "identity": lambda a: a,
    "tanh": np.tanh,
    "relu": lambda a: np.maximum(a, 0.0),
}
ENUMERATION_CAP = 10**6
MAX_FIT_WEIGHTS = 1000


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        widths = tuple(int(n) for n in self.layer_widths)
        acts = self.activations
        if isinstance(acts, str):
            acts = (acts,) * (len(widths) - 1)
        acts = tuple(acts)
        if len(widths) < 2:
            raise ValueError("need an input width and at least one layer")
        if any(n < 1 for n in widths):
            raise ValueError("all widths must be >= 1")
        if len(acts) != len(widths) - 1:
            raise ValueError(f"{len(widths) - 1} layers but {len(acts)} activations")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unsupported activation {a!r}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return self.layer_widths[1:-1]

    def layer_shape(self, layer: int) -> tuple[int, int]:
        """Weight matrix shape of layer ``layer`` (1-based)."""
        return self.layer_widths[layer], self.layer_widths[layer - 1]

    def layer_slice(self, layer: int) -> slice:
        start = sum(a * b for a, b in zip(self.layer_widths[1:layer], self.layer_widths[: layer - 1]))
        rows, cols = self.layer_shape(layer)
        return slice(start, start + rows * cols)

    def node_slice(self, layer: int, node: int) -> slice:
        rows, cols = self.layer_shape(layer)
        if not 0 <= node < rows:
            raise IndexError(f"layer {layer} has {rows} nodes")
        start = self.layer_slice(layer).start + node * cols
        return slice(start, start + cols)

    @property
    def n_weights(self) -> int:
        return sum(a * b for a, b in zip(self.layer_widths[1:], self.layer_widths[:-1]))

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activations": list(self.activations)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MlpSpec":
        d = json.loads(text)
        return cls(tuple(d["layer_widths"]), tuple(d["activations"]))


@dataclass(frozen=True)
class WeightVector:
    """Flat weights with per-layer and per-node views."""

    spec: MlpSpec
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(-1)
        if w.shape[0] != self.spec.n_weights:
            raise ValueError(f"expected {self.spec.n_weights} weights, got {w.shape[0]}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def layer(self, layer: int) -> np.ndarray:
        return self.w[self.spec.layer_slice(layer)].reshape(self.spec.layer_shape(layer))

    def node(self, layer: int, node: int) -> np.ndarray:
        return self.w[self.spec.node_slice(layer, node)]

    @classmethod
    def from_layers(cls, spec: MlpSpec, layers: Sequence[np.ndarray]) -> "WeightVector":
        if len(layers) != spec.n_layers:
            raise ValueError(f"expected {spec.n_layers} layer matrices")
        for l, mat in enumerate(layers, start=1):
            if np.shape(mat) != spec.layer_shape(l):
                raise ValueError(f"layer {l} has shape {np.shape(mat)}, expected {spec.layer_shape(l)}")
        return cls(spec, np.concatenate([np.asarray(m, dtype=float).ravel() for m in layers]))

    def with_node(self, layer: int, node: int, values: np.ndarray) -> "WeightVector":
        w = self.w.copy()
        w[self.spec.node_slice(layer, node)] = values
        return WeightVector(self.spec, w)


def _as_weights(spec: MlpSpec, w) -> WeightVector:
    if isinstance(w, WeightVector):
        if w.spec != spec:
            raise ValueError("weight vector belongs to a different architecture")
        return w
    return WeightVector(spec, w)


def forward(spec: MlpSpec, w, x: np.ndarray) -> tuple[np.ndarray | float, list[np.ndarray]]:
    """Network output at ``x`` and the activations ``[x, z_1, ..., z_L]``.

    The output is a float when the last layer has one node.
    """
    wv = _as_weights(spec, w)
    z = np.asarray(x, dtype=float).reshape(-1)
    if z.shape[0] != spec.layer_widths[0]:
        raise ValueError(f"input has {z.shape[0]} entries, expected {spec.layer_widths[0]}")
    acts = [z]
    for l in range(1, spec.n_layers + 1):
        z = ACTIVATIONS[spec.activations[l - 1]](wv.layer(l) @ z)
        acts.append(z)
    out = float(z[0]) if z.shape[0] == 1 else z
    return out, acts


def forward_batch(spec: MlpSpec, w, xs: np.ndarray) -> np.ndarray:
    """Outputs ``(n, n_L)`` for inputs ``(n, n_0)``."""
    wv = _as_weights(spec, w)
    z = np.atleast_2d(np.asarray(xs, dtype=float))
    for l in range(1, spec.n_layers + 1):
        z = ACTIVATIONS[spec.activations[l - 1]](z @ wv.layer(l).T)
    return z


def _forward_layers_sampled(spec: MlpSpec, layers: Sequence[np.ndarray], z: np.ndarray, start: int) -> np.ndarray:
    # layers[i] has shape (S, n_l, n_{l-1}) or (n_l, n_{l-1}); z has shape (S, n).
    for l, mat in enumerate(layers, start=start):
        if mat.ndim == 3:
            a = np.einsum("sij,sj->si", mat, z)
        else:
            a = z @ mat.T
        z = ACTIVATIONS[spec.activations[l - 1]](a)
    return z


@dataclass(frozen=True)
class TranslationBasisZ:
    """Basis ``B_z`` of the shifts ``delta`` with ``z^T delta = 0``."""

    z: np.ndarray
    basis: np.ndarray

    def residual(self) -> float:
        return float(np.max(np.abs(self.z @ self.basis), initial=0.0))


def build_Bz(z: np.ndarray) -> TranslationBasisZ:
    """``[I; -z_1/z_k ... -z_{k-1}/z_k]`` with rows reordered if ``z_k = 0``.

    A zero last entry is swapped with the last nonzero entry before the
    construction and swapped back after. For ``z = 0`` every direction leaves
    the node value unchanged and the identity is returned.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    k = z.shape[0]
    nz = np.flatnonzero(z)
    if nz.size == 0:
        return TranslationBasisZ(z, np.eye(k))
    pivot = int(nz[-1])
    order = np.arange(k)
    order[[pivot, k - 1]] = order[[k - 1, pivot]]
    zp = z[order]
    basis_p = np.vstack([np.eye(k - 1), -zp[None, :-1] / zp[-1]])
    basis = np.empty_like(basis_p)
    basis[order] = basis_p
    return TranslationBasisZ(z, basis)


def translate_node(w_node: np.ndarray, basis, delta) -> np.ndarray:
    b = basis.basis if isinstance(basis, TranslationBasisZ) else np.asarray(basis, dtype=float)
    return np.asarray(w_node, dtype=float) + b @ np.atleast_1d(np.asarray(delta, dtype=float))


def translate_weights(spec: MlpSpec, w, layer: int, node: int, x: np.ndarray, delta) -> WeightVector:
    """Shift node ``(layer, node)`` along ``B_z`` for the activation feeding it at input ``x``."""
    wv = _as_weights(spec, w)
    _, acts = forward(spec, wv, x)
    basis = build_Bz(acts[layer - 1])
    return wv.with_node(layer, node, translate_node(wv.node(layer, node), basis, delta))


def permutation_count(spec: MlpSpec) -> int:
    return math.prod(math.factorial(n) for n in spec.hidden_widths)


def _perm_matrix(perm: Sequence[int]) -> np.ndarray:
    # (P v)_i = v[perm[i]]
    n = len(perm)
    p = np.zeros((n, n))
    p[np.arange(n), list(perm)] = 1.0
    return p


@dataclass(frozen=True)
class StackedPermutation:
    """One relabelling ``perm_l`` of every hidden layer.

    Hidden layer ``l`` maps ``z_l`` to ``z_l[perm_l]``; input and output
    orderings never change.
    """

    spec: MlpSpec
    perms: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        perms = tuple(tuple(int(i) for i in p) for p in self.perms)
        if len(perms) != len(self.spec.hidden_widths):
            raise ValueError("one permutation per hidden layer required")
        for p, n in zip(perms, self.spec.hidden_widths):
            if sorted(p) != list(range(n)):
                raise ValueError(f"{p} is not a permutation of range({n})")
        object.__setattr__(self, "perms", perms)

    def layer_matrix(self, layer: int) -> np.ndarray:
        """Unit permutation matrix for layer ``layer``; identity for input and output."""
        if layer == 0 or layer == self.spec.n_layers:
            return np.eye(self.spec.layer_widths[layer])
        return _perm_matrix(self.perms[layer - 1])

    def block(self, layer: int) -> np.ndarray:
        """Action on the row-major flattening of layer ``layer``'s weights."""
        return np.kron(self.layer_matrix(layer), self.layer_matrix(layer - 1))

    def matrix(self) -> np.ndarray:
        n = self.spec.n_weights
        out = np.zeros((n, n))
        for l in range(1, self.spec.n_layers + 1):
            s = self.spec.layer_slice(l)
            out[s, s] = self.block(l)
        return out

    def is_identity(self) -> bool:
        return all(p == tuple(range(len(p))) for p in self.perms)


def enumerate_permutations(spec: MlpSpec, cap: int = ENUMERATION_CAP) -> Iterator[StackedPermutation]:
    count = permutation_count(spec)
    if count > cap:
        raise ValueError(f"{count} stacked permutations exceed the cap of {cap}")
    per_layer = [itertools.permutations(range(n)) for n in spec.hidden_widths]
    for combo in itertools.product(*per_layer):
        yield StackedPermutation(spec, combo)


def apply_permutation(p: StackedPermutation, w, path: str = "layers") -> WeightVector:
    """``W_l -> P_l W_l P_{l-1}^T`` per layer, or the block-diagonal matrix times ``w``."""
    wv = _as_weights(p.spec, w)
    if path == "layers":
        mats = [p.layer_matrix(l) @ wv.layer(l) @ p.layer_matrix(l - 1).T for l in range(1, p.spec.n_layers + 1)]
        return WeightVector.from_layers(p.spec, mats)
    if path == "kronecker":
        return WeightVector(p.spec, p.matrix() @ wv.w)
    raise ValueError(f"unknown path {path!r}")


def _sample_weights(prior, rng: np.random.Generator, n: int) -> np.ndarray:
    if isinstance(prior, MomentGaussian):
        return gs.sample_from(prior, rng, n)
    fixed = np.asarray(prior, dtype=float).reshape(-1)
    return np.broadcast_to(fixed, (n, fixed.shape[0]))


def prior_output_variance(
    spec: MlpSpec, prior, x: np.ndarray, n_samples: int = 10_000, seed: int = 0, chunk_size: int = 1 << 14
) -> McEstimate:
    """Monte-Carlo ``Var_{w ~ prior}[f(x; w)]`` for a scalar-output network.

    ``prior`` is a :class:`MomentGaussian` or a fixed weight vector (zero
    variance). The standard error uses the fourth central moment.
    """
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples")
    if spec.layer_widths[-1] != 1:
        raise ValueError("output variance is defined for a single output")
    x = np.asarray(x, dtype=float).reshape(-1)
    outs = []
    for idx, start in enumerate(range(0, n_samples, chunk_size)):
        count = min(chunk_size, n_samples - start)
        ws = _sample_weights(prior, gs.make_rng(seed, idx), count)
        layers = [ws[:, spec.layer_slice(l)].reshape((count,) + spec.layer_shape(l)) for l in range(1, spec.n_layers + 1)]
        z = np.broadcast_to(x, (count, x.shape[0]))
        outs.append(_forward_layers_sampled(spec, layers, z, 1)[:, 0])
    f = np.concatenate(outs)
    if np.all(f == f[0]):
        return McEstimate(0.0, 0.0, n_samples, seed)
    centred = f - f.mean()
    var = float(np.sum(centred**2) / (n_samples - 1))
    m4 = float(np.mean(centred**4))
    return McEstimate(var, math.sqrt(max(m4 - var**2, 0.0) / n_samples), n_samples, seed)


def output_mean(spec: MlpSpec, prior, x: np.ndarray, n_samples: int = 10_000, seed: int = 0) -> McEstimate:
    """Monte-Carlo ``E_{w ~ prior}[f(x; w)]``; companion of :func:`prior_output_variance`."""
    from .mc import mc_expectation

    x = np.asarray(x, dtype=float).reshape(-1)
    return mc_expectation(
        lambda rng, n: _sample_weights(prior, rng, n),
        lambda ws: np.array([forward(spec, wi, x)[0] for wi in ws]),
        n_samples,
        seed,
    )


def layerwise_qmix(
    prior_mean: np.ndarray,
    prior_var: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    z_samples: np.ndarray,
) -> GaussianMixture:
    """Invariance-abiding posterior of one node, averaged over activation samples.

    Each distinct row of ``z_samples`` contributes the closed-form translation
    posterior for input ``z``; identical rows are merged and weighted by
    multiplicity.
    """
    prior = MomentGaussian(prior_mean, prior_var)
    g0 = MomentGaussian(m, v)
    zs = np.atleast_2d(np.asarray(z_samples, dtype=float))
    if zs.shape[1] != prior.dim:
        raise ValueError(f"activation samples have {zs.shape[1]} entries, node has {prior.dim} weights")
    counts: dict[bytes, int] = {}
    rows: dict[bytes, np.ndarray] = {}
    for z in zs:
        if not np.any(z != 0.0):
            raise ValueError("activation sample is identically zero")
        key = z.tobytes()
        counts[key] = counts.get(key, 0) + 1
        rows.setdefault(key, z)
    comps = [translation_qmix(prior, g0, rows[key])[0] for key in rows]
    return GaussianMixture(np.log([counts[key] for key in rows]), tuple(comps))


def _draw_nodes(mixtures: Sequence[GaussianMixture], rng: np.random.Generator, count: int) -> np.ndarray:
    return np.stack([mix.sample_from(rng, count) for mix in mixtures], axis=1)


def latent_activation_sampler(
    node_mixtures: Sequence[GaussianMixture] | GaussianMixture,
    z_samples: np.ndarray,
    activation: str,
    seed: int,
    count: int,
) -> np.ndarray:
    """Ancestral draws of a layer's output activations.

    For each draw: pick an incoming activation row, draw every node's weights
    from its mixture, and return ``h(w^T z)``. A single mixture gives a
    1-D result.
    """
    single = isinstance(node_mixtures, GaussianMixture)
    mixtures = [node_mixtures] if single else list(node_mixtures)
    rng = gs.make_rng(seed)
    zs = np.atleast_2d(np.asarray(z_samples, dtype=float))
    idx = rng.integers(0, zs.shape[0], size=count)
    w = _draw_nodes(mixtures, rng, count)
    out = ACTIVATIONS[activation](np.einsum("sjk,sk->sj", w, zs[idx]))
    return out[:, 0] if single else out


def data_log_likelihood(spec: MlpSpec, w, xs: np.ndarray, ys: np.ndarray, sigma2_y: float) -> float:
    """Gaussian log-likelihood of a dataset under fixed weights."""
    f = forward_batch(spec, w, xs)
    ys = np.asarray(ys, dtype=float).reshape(f.shape)
    return float(-0.5 * np.sum((ys - f) ** 2) / sigma2_y - 0.5 * ys.size * math.log(2.0 * math.pi * sigma2_y))


@dataclass(frozen=True)
class FitConfig:
    n_activation_samples: int = 64
    n_mc: int = 256
    tol: float = 1e-3
    max_sweeps: int = 50
    max_evals: int = 4000
    n_kl_samples: int = 512
    method: str = "L-BFGS-B"
    seed: int = 0


@dataclass
class FitTrace:
    sweep: int
    surrogate: float
    stderr: float
    max_change: float

    def to_dict(self) -> dict:
        return {"sweep": self.sweep, "surrogate": self.surrogate, "stderr": self.stderr, "max_change": self.max_change}


@dataclass
class LayerwiseFit:
    spec: MlpSpec
    m: np.ndarray
    v: np.ndarray
    converged: bool
    trace: list[FitTrace] = field(default_factory=list)
    z_samples: list[np.ndarray] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "m": self.m.tolist(),
            "v": [float(t) for t in self.v],
            "converged": self.converged,
            "trace": [t.to_dict() for t in self.trace],
        }


class _LayerwiseProblem:
    """Shared state for the layer-by-layer fit.

    Every layer objective reuses one fixed set of standard normal draws so
    that it is a smooth function of ``(m, log v)``.
    """

    def __init__(self, spec, prior, xs, ys, sigma2_y, config):
        self.spec = spec
        self.prior = prior
        self.xs = xs
        self.ys = ys
        self.sigma2_y = sigma2_y
        self.cfg = config
        self.m = prior.mean.copy()
        self.logv = np.log(prior.variances())
        self.z_samples: list[np.ndarray] = [None] * (spec.n_layers + 1)

    # Node-level pieces -----------------------------------------------------
    def node_mixture(self, layer: int, node: int, m: np.ndarray, logv: np.ndarray) -> GaussianMixture:
        s = self.spec.node_slice(layer, node)
        pv = self.prior.variances()[s]
        return layerwise_qmix(self.prior.mean[s], pv, m[s], np.exp(logv[s]), self.z_samples[layer])

    def layer_mixtures(self, layer: int, m, logv) -> list[GaussianMixture]:
        return [self.node_mixture(layer, j, m, logv) for j in range(self.spec.layer_widths[layer])]

    def prior_node(self, layer: int, node: int) -> MomentGaussian:
        s = self.spec.node_slice(layer, node)
        return MomentGaussian(self.prior.mean[s], self.prior.variances()[s])

    # Sampling with fixed noise ---------------------------------------------
    def _crn(self, layer: int, tag: int, shape) -> np.ndarray:
        return gs.make_rng(self.cfg.seed, 1000 * layer + tag).standard_normal(shape)

    def _crn_uniform(self, layer: int, tag: int, shape) -> np.ndarray:
        return gs.make_rng(self.cfg.seed, 1000 * layer + tag).random(shape)

    @staticmethod
    def _mixture_draws(mix: GaussianMixture, u: np.ndarray, eps: np.ndarray) -> np.ndarray:
        # component by inverse CDF of u, then the structured square root of each component
        cum = np.cumsum(np.exp(mix.log_weights))
        idx = np.minimum(np.searchsorted(cum, u, side="right"), mix.n_components - 1)
        out = np.empty_like(eps)
        for k in np.unique(idx):
            sel = idx == k
            c = mix.components[k]
            if isinstance(c.cov, DiagPlusRank1):
                root_d = np.sqrt(c.cov.diag)
                vvec = c.cov.u / root_d
                vv = float(vvec @ vvec)
                gamma = (math.sqrt(1.0 + c.cov.scale * vv) - 1.0) / vv if vv > 0 else 0.0
                e = eps[sel]
                out[sel] = c.mean + root_d * (e + gamma * np.outer(e @ vvec, vvec))
            else:
                out[sel] = c.mean + eps[sel] * np.sqrt(c.cov)
        return out

    def sample_layer_weights(self, layer: int, mixtures, tag: int, count: int) -> np.ndarray:
        rows, cols = self.spec.layer_shape(layer)
        eps = self._crn(layer, tag, (count, rows, cols))
        u = self._crn_uniform(layer, tag + 1, (count, rows))
        return np.stack([self._mixture_draws(mixtures[j], u[:, j], eps[:, j, :]) for j in range(rows)], axis=1)

    def propagate(self, upto: int, tag: int, count: int, data_idx: np.ndarray) -> np.ndarray:
        """Activations entering layer ``upto`` with weights of earlier layers drawn from their mixtures."""
        z = self.xs[data_idx]
        for l in range(1, upto):
            w = self.sample_layer_weights(l, self.layer_mixtures(l, self.m, self.logv), tag + 10 * l, count)
            z = _forward_layers_sampled(self.spec, [w], z, l)
        return z

    def mean_layers(self, start: int) -> list[np.ndarray]:
        wv = WeightVector(self.spec, self.m)
        return [wv.layer(l) for l in range(start, self.spec.n_layers + 1)]

    def refresh_activation_samples(self, layer: int) -> None:
        n = self.xs.shape[0]
        p = self.cfg.n_activation_samples
        if layer == 1:
            rng = gs.make_rng(self.cfg.seed, 7)
            idx = np.arange(n) if n <= p else np.sort(rng.choice(n, size=p, replace=False))
            z = self.xs[idx]
        else:
            idx = gs.make_rng(self.cfg.seed, 1000 * layer + 900).integers(0, n, size=p)
            z = self.propagate(layer, 500, p, idx)
        # an all-zero activation leaves the node unconstrained; it carries no mixture component
        keep = np.any(z != 0.0, axis=1)
        if not np.any(keep):
            raise ValueError(f"every activation sample entering layer {layer} is zero")
        self.z_samples[layer] = z[keep]

    # Objective ---------------------------------------------------------------
    def layer_terms(self, layer: int, m, logv, tag: int, n_mc: int) -> tuple[np.ndarray, float]:
        """Per-draw log-likelihood values and the KL of the layer's mixtures to the prior."""
        n = self.xs.shape[0]
        data_idx = np.repeat(np.arange(n), n_mc)
        count = data_idx.shape[0]
        z = self.propagate(layer, tag, count, data_idx)
        mixtures = self.layer_mixtures(layer, m, logv)
        w = self.sample_layer_weights(layer, mixtures, tag + 2, count)
        z = _forward_layers_sampled(self.spec, [w], z, layer)
        f = _forward_layers_sampled(self.spec, self.mean_layers(layer + 1), z, layer + 1)
        resid = self.ys[data_idx] - f
        ll = -0.5 * np.sum(resid**2, axis=1) / self.sigma2_y - 0.5 * f.shape[1] * math.log(2.0 * math.pi * self.sigma2_y)
        per_draw = ll.reshape(n, n_mc).sum(axis=0)
        kl = 0.0
        for j, mix in enumerate(mixtures):
            p = self.prior_node(layer, j)
            if mix.n_components == 1:
                kl += gs.kl_divergence(mix.components[0], p)
            else:
                k = self.cfg.n_kl_samples
                e = self._crn(layer, tag + 3 + 10 * j, (k, mix.dim))
                u = self._crn_uniform(layer, tag + 4 + 10 * j, k)
                draws = self._mixture_draws(mix, u, e)
                kl += float(np.mean(mix.log_density(draws) - gs.log_density(p, draws)))
        return per_draw, kl

    def fit_layer(self, layer: int) -> None:
        s = self.spec.layer_slice(layer)
        x0 = np.concatenate([self.m[s], self.logv[s]])
        half = x0.shape[0] // 2

        def unpack(theta):
            m, logv = self.m.copy(), self.logv.copy()
            m[s] = theta[:half]
            logv[s] = np.clip(theta[half:], -30.0, 30.0)
            return m, logv

        def objective(theta):
            m, logv = unpack(theta)
            per_draw, kl = self.layer_terms(layer, m, logv, 100, self.cfg.n_mc)
            return -(float(per_draw.mean()) - kl)

        res = optimize.minimize(
            objective, x0, method=self.cfg.method, options={"maxfun": self.cfg.max_evals}
            if self.cfg.method == "L-BFGS-B" else {"maxfev": self.cfg.max_evals, "xtol": 1e-6, "ftol": 1e-10}
        )
        self.m, self.logv = unpack(res.x)

    def surrogate(self, sweep: int) -> tuple[float, float]:
        """Fresh-noise estimate of the last layer's objective with its standard error."""
        layer = self.spec.n_layers
        per_draw, kl = self.layer_terms(layer, self.m, self.logv, 200 + 17 * sweep, self.cfg.n_mc)
        return float(per_draw.mean()) - kl, float(per_draw.std(ddof=1) / math.sqrt(per_draw.shape[0]))


def layerwise_fit(
    spec: MlpSpec,
    prior: MomentGaussian,
    xs: np.ndarray,
    ys: np.ndarray,
    sigma2_y: float,
    config: FitConfig | None = None,
) -> LayerwiseFit:
    """Fit per-layer likelihood parameters ``(m, v)`` one layer at a time.

    Layer ``l`` maximises a Monte-Carlo ELBO: the data log-likelihood with its
    own weights drawn from the layer's invariance-abiding mixture, earlier
    layers drawn from theirs and later layers at their current means, minus
    the mixture's KL to the prior. Sweeps repeat until the largest change in
    ``(m, log v)`` is below ``tol`` or ``max_sweeps`` is reached; running out
    of sweeps is reported through ``converged``, not raised. With no data the
    likelihood is flat and the prior is returned (``v = inf``).
    """
    cfg = config or FitConfig()
    if spec.n_weights > MAX_FIT_WEIGHTS:
        raise ValueError(f"{spec.n_weights} weights exceed the toy-scale limit of {MAX_FIT_WEIGHTS}")
    if prior.dim != spec.n_weights:
        raise ValueError("prior dimension does not match the architecture")
    xs = np.atleast_2d(np.asarray(xs, dtype=float)) if np.size(xs) else np.zeros((0, spec.layer_widths[0]))
    ys = np.asarray(ys, dtype=float).reshape(xs.shape[0], -1) if xs.shape[0] else np.zeros((0, spec.layer_widths[-1]))
    if xs.shape[0] == 0:
        return LayerwiseFit(spec, prior.mean.copy(), np.full(spec.n_weights, np.inf), True)
    if xs.shape[1] != spec.layer_widths[0] or ys.shape[1] != spec.layer_widths[-1]:
        raise ValueError("dataset shape does not match the architecture")
    prob = _LayerwiseProblem(spec, prior, xs, ys, sigma2_y, cfg)
    trace: list[FitTrace] = []
    converged = False
    for sweep in range(1, cfg.max_sweeps + 1):
        before = np.concatenate([prob.m, prob.logv])
        for layer in range(1, spec.n_layers + 1):
            prob.refresh_activation_samples(layer)
            prob.fit_layer(layer)
        after = np.concatenate([prob.m, prob.logv])
        change = float(np.max(np.abs(after - before) / (1.0 + np.abs(before))))
        value, se = prob.surrogate(sweep)
        trace.append(FitTrace(sweep, value, se, change))
        if change < cfg.tol:
            converged = True
            break
    return LayerwiseFit(spec, prob.m, np.exp(prob.logv), converged, trace, [z for z in prob.z_samples[1:]])


def fitted_node_posterior(fit: LayerwiseFit, prior: MomentGaussian, layer: int, node: int) -> GaussianMixture:
    """The fitted invariance-abiding mixture of one node (the prior when unfitted)."""
    s = fit.spec.node_slice(layer, node)
    pm, pv = prior.mean[s], prior.variances()[s]
    if not np.all(np.isfinite(fit.v[s])):
        return GaussianMixture.uniform([MomentGaussian(pm, pv)])
    return layerwise_qmix(pm, pv, fit.m[s], fit.v[s], fit.z_samples[layer - 1])
