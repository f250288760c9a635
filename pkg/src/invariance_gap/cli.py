"""Command-line entry point: closed-form sweeps, verification suites and network checks."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import bnn
from . import gaussian as gs
from . import invariance as inv
from . import linear_model as lm
from .mc import mc_kl

SEED_ENV = "INVARIANCE_GAP_SEED"
_CONSTANTS = {"pi": math.pi, "e": math.e}


def parse_real(text: str) -> float:
    """A float literal or a small arithmetic expression in ``pi`` and ``e``, e.g. ``1/(2*pi*e)``."""
    try:
        return float(text)
    except ValueError:
        pass
    allowed = set("0123456789.+-*/() epi")
    if not set(text) <= allowed:
        raise argparse.ArgumentTypeError(f"cannot parse {text!r} as a number")
    try:
        value = eval(text, {"__builtins__": {}}, dict(_CONSTANTS))  # noqa: S307 - character whitelist above
    except Exception as exc:  # noqa: BLE001
        raise argparse.ArgumentTypeError(f"cannot parse {text!r}: {exc}") from exc
    return float(value)


def default_k_values() -> list[int]:
    small = list(range(1, 101))
    large = np.unique(np.round(np.geomspace(200, 10_000, 30)).astype(int)).tolist()
    return small + large


@dataclass
class SweepConfig:
    k_values: list[int] = field(default_factory=default_k_values)
    n_obs: int = 10
    y_value: float = 1.0
    sigma2_y: float = 1.0 / (2.0 * math.pi * math.e)
    sigma2_0: float = 1.0
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if not self.k_values or any(int(k) < 1 for k in self.k_values):
            raise ValueError("k_values must be nonempty and each >= 1")
        self.k_values = [int(k) for k in self.k_values]
        if self.n_obs < 1:
            raise ValueError("n_obs must be >= 1")
        if not (self.sigma2_y > 0 and self.sigma2_0 > 0):
            raise ValueError("variances must be positive")

    def model(self, k: int) -> lm.TranslationLinearModel:
        return lm.TranslationLinearModel.isotropic(k, np.full(self.n_obs, self.y_value), self.sigma2_y, self.sigma2_0)


def _fmt(v: float) -> str:
    return repr(float(v)) if not math.isfinite(v) else f"{v:.17g}"


def write_csv(rows: list[list], header: list[str], out: str | None) -> None:
    text = [header] + [[r[0]] + [_fmt(v) for v in r[1:]] for r in rows]
    if out is None or out == "-":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerows(text)
        return
    with open(out, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(text)


def gap_sweep_rows(cfg: SweepConfig) -> list[list]:
    rows = []
    for k in cfg.k_values:
        model = cfg.model(k)
        gap_mix = lm.invariance_gap_closed_form(model, lm.theta_mix_star(model))
        gap_0 = lm.invariance_gap_closed_form(model, lm.theta_0_star(model))
        f_var = lm.prior_predictive_variance(model) - model.sigma2_y
        bound = inv.data_related_bound(f_var, model.y, model.sigma2_y)
        rows.append([k, gap_mix, gap_0, bound])
    return rows


GAP_HEADER = ["K", "gap_at_theta_mix_star", "gap_at_theta_0_star", "data_related_bound"]
_POSTERIORS = (("q0", "mean_field"), ("qmix", "invariance_abiding"))
_THETAS = (("theta_0_star", lm.theta_0_star), ("theta_mix_star", lm.theta_mix_star))
ELBO_HEADER = ["K"] + [
    f"{q}_{t}_{term}" for q, _ in _POSTERIORS for t, _ in _THETAS for term in ("ell", "kl", "elbo", "predictive_variance")
]


def elbo_sweep_rows(cfg: SweepConfig) -> list[list]:
    rows = []
    for k in cfg.k_values:
        model = cfg.model(k)
        thetas = {name: fn(model) for name, fn in _THETAS}
        row: list = [k]
        for _, which in _POSTERIORS:
            for name, _ in _THETAS:
                r = lm.elbo_terms(model, thetas[name], which)
                row += [r.ell, r.kl, r.elbo, r.predictive_variance]
        rows.append(row)
    return rows


# Verification suites -----------------------------------------------------------


@dataclass
class Check:
    name: str
    residual: float
    tol: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "residual": self.residual, "tol": self.tol, "pass": self.passed}


def _below(name: str, residual: float, tol: float) -> Check:
    return Check(name, float(residual), tol, bool(residual < tol))


def _random_translation_draw(rng: np.random.Generator, max_k: int = 20):
    k = int(rng.integers(1, max_k + 1))
    s2 = rng.uniform(0.2, 3.0, k)
    prior = gs.MomentGaussian(rng.normal(size=k), s2)
    g0 = gs.MomentGaussian(2.0 * rng.normal(size=k), rng.uniform(0.05, 5.0) * s2)
    x = rng.normal(size=k)
    x[-1] = x[-1] if x[-1] != 0.0 else 1.0
    return prior, g0, x


def suite_gaussian(seed: int, fault: bool = False) -> list[Check]:
    rng = np.random.default_rng(seed)
    k = 6
    a = rng.normal(size=(k, k))
    cov_a = a @ a.T + k * np.eye(k)
    b = rng.normal(size=(k, k))
    cov_b = b @ b.T + np.eye(k)
    ga = gs.MomentGaussian(rng.normal(size=k), cov_a)
    gb = gs.MomentGaussian(rng.normal(size=k), cov_b)
    prod, log_z = gs.product(gs.to_natural(ga), gs.to_natural(gb))
    pm = gs.to_moment(prod)
    dense_cov = np.linalg.inv(np.linalg.inv(cov_a) + np.linalg.inv(cov_b))
    dense_mean = dense_cov @ (np.linalg.solve(cov_a, ga.mean) + np.linalg.solve(cov_b, gb.mean))
    z_oracle = gs.log_density(gs.MomentGaussian(gb.mean, cov_a + cov_b), ga.mean)
    d = rng.uniform(0.5, 2.0, k)
    u = rng.normal(size=k)
    structured = gs.DiagPlusRank1(d, -0.5 / float(u @ (u * d) / d.min() + 1.0), u * d)
    kl = gs.kl_divergence(ga, gb)
    est = mc_kl(lambda r, n: gs.sample_from(ga, r, n), lambda w: gs.log_density(ga, w), lambda w: gs.log_density(gb, w), 100_000, seed)
    return [
        _below("product_mean", np.max(np.abs(pm.mean - dense_mean)), 1e-10),
        _below("product_cov", np.max(np.abs(pm.dense_cov() - dense_cov)), 1e-10),
        _below("product_log_normalizer", abs(log_z - z_oracle), 1e-9),
        _below("rank1_inverse", np.max(np.abs(structured.inverse().dense() - np.linalg.inv(structured.dense()))), 1e-10),
        _below("rank1_logdet", abs(structured.logdet() - np.linalg.slogdet(structured.dense())[1]), 1e-10),
        _below("kl_vs_monte_carlo_zscore", abs(est.z_score(kl)), 3.0),
    ]


def suite_invariance(seed: int, fault: bool = False) -> list[Check]:
    rng = np.random.default_rng(seed)
    sign = 1.0 if fault else -1.0
    worst_gap = worst_ell = 0.0
    for _ in range(1000):
        prior, g0, x = _random_translation_draw(rng)
        pair = inv.translation_pair(prior, g0, x, rank1_sign=sign)
        worst_gap = max(worst_gap, abs(inv.gap_identity_check(pair).residual))
        model = lm.TranslationLinearModel(x, rng.normal(size=3), 0.5, prior.mean, prior.cov)
        ell0 = lm.expected_log_likelihood(model, pair.q0)
        ell1 = lm.expected_log_likelihood(model, pair.qmix)
        worst_ell = max(worst_ell, abs(ell0 - ell1))
    prior, g0, x = _random_translation_draw(np.random.default_rng(seed + 1), 8)
    trans = inv.verify_conditions(inv.translation_pair(prior, g0, x, rank1_sign=sign), 2000, seed)
    spec = bnn.MlpSpec((1, 2, 1), "tanh")
    mats = [p.matrix() for p in bnn.enumerate_permutations(spec)]
    iso = gs.MomentGaussian(np.zeros(4), np.ones(4))
    g_far = gs.MomentGaussian(np.array([5.0, -5.0, 5.0, -5.0]), np.full(4, 0.01))
    perm = inv.verify_conditions(inv.permutation_pair(iso, g_far, mats), 2000, seed)
    aniso = gs.MomentGaussian(np.zeros(4), np.array([1.0, 2.0, 3.0, 4.0]))
    aniso_report = inv.verify_conditions(inv.permutation_pair(aniso, g_far, mats), 500, seed)
    far_gap = inv.invariance_gap(inv.permutation_pair(iso, g_far, mats), "monte_carlo", 100_000, seed)
    return [
        _below("gap_identity_max_residual", worst_gap, 1e-9),
        _below("ell_equivalence_max_residual", worst_ell, 1e-10),
        _below("translation_conditions", max(trans.condition1_max_log_density_gap, trans.condition2_max_logdet_deviation), 1e-8),
        _below("permutation_conditions", max(perm.condition1_max_log_density_gap, perm.condition2_max_logdet_deviation), 1e-8),
        Check("anisotropic_permutation_rejected", aniso_report.condition1_max_log_density_gap, 1e-8, not aniso_report.passed),
        _below("separated_mode_gap_minus_log2", abs(far_gap.gap - math.log(2.0)), max(3.0 * far_gap.stderr, 1e-12)),
    ]


def suite_linear(seed: int, fault: bool = False) -> list[Check]:
    cfg = SweepConfig()
    worst_mean = worst_cov = worst_elbo = 0.0
    for k in (1, 2, 3, 10, 50, 200):
        model = cfg.model(k)
        theta = lm.theta_mix_star(model)
        truth = lm.true_posterior(model)
        q = lm.qmix_posterior(model, theta)
        worst_mean = max(worst_mean, float(np.max(np.abs(q.mean - truth.mean))))
        worst_cov = max(worst_cov, float(np.max(np.abs(q.dense_cov() - truth.dense_cov()))))
        worst_elbo = max(worst_elbo, abs(lm.elbo_terms(model, theta, "invariance_abiding").elbo - lm.log_evidence(model)))
    gaps = np.array([r[1] for r in gap_sweep_rows(SweepConfig(k_values=list(range(1, 101))))])
    ratio = max(
        abs(lm.theta_0_star(cfg.model(k)).lam[0] / lm.theta_mix_star(cfg.model(k)).lam[0] - k) / k for k in (2, 10, 50)
    )
    return [
        _below("qmix_mean_equals_true_posterior", worst_mean, 1e-10),
        _below("qmix_cov_equals_true_posterior", worst_cov, 1e-10),
        _below("qmix_elbo_equals_log_evidence", worst_elbo, 1e-9),
        _below("gap_second_difference", float(np.max(np.abs(np.diff(gaps, 2)))), 1e-9),
        _below("variance_ratio_equals_K", ratio, 1e-12),
    ]


def suite_bnn(seed: int, fault: bool = False, widths: tuple[int, ...] = (1, 2, 2, 1)) -> list[Check]:
    rng = np.random.default_rng(seed)
    spec = bnn.MlpSpec(widths, "tanh")
    w = rng.normal(size=spec.n_weights)
    xs = rng.normal(size=(50, widths[0]))
    base = bnn.forward_batch(spec, w, xs)
    perms = list(bnn.enumerate_permutations(spec))
    perm_res, path_mismatch, orth = 0.0, 0, 0.0
    for p in perms:
        a = bnn.apply_permutation(p, w, "layers")
        b = bnn.apply_permutation(p, w, "kronecker")
        path_mismatch += int(not np.array_equal(a.w, b.w))
        mat = p.matrix()
        orth = max(orth, float(np.max(np.abs(mat.T @ mat - np.eye(spec.n_weights)))))
        perm_res = max(perm_res, float(np.max(np.abs(bnn.forward_batch(spec, a, xs) - base))))
    trans_res = 0.0
    for _ in range(100):
        layer = int(rng.integers(1, spec.n_layers + 1))
        node = int(rng.integers(spec.layer_widths[layer]))
        x = xs[int(rng.integers(xs.shape[0]))]
        _, acts = bnn.forward(spec, w, x)
        n_dir = bnn.build_Bz(acts[layer - 1]).basis.shape[1]
        w2 = bnn.translate_weights(spec, w, layer, node, x, 5.0 * rng.normal(size=n_dir))
        change = np.asarray(bnn.forward(spec, w2, x)[0]) - np.asarray(bnn.forward(spec, w, x)[0])
        trans_res = max(trans_res, float(np.max(np.abs(change))))
    return [
        Check("permutations_enumerated", float(len(perms)), float(bnn.permutation_count(spec)), len(perms) == bnn.permutation_count(spec)),
        _below("permutation_orthogonality", orth, 1e-15),
        Check("kronecker_vs_layer_path_mismatches", float(path_mismatch), 0.0, path_mismatch == 0),
        _below("permutation_output_change", perm_res, 1e-9),
        _below("translation_output_change", trans_res, 1e-9),
    ]


SUITES: dict[str, Callable[..., list[Check]]] = {
    "gaussian": suite_gaussian,
    "invariance": suite_invariance,
    "linear": suite_linear,
    "bnn": suite_bnn,
}


def run_verify(suite: str, seed: int, fault: bool = False, widths: tuple[int, ...] | None = None) -> dict:
    names = list(SUITES) if suite == "all" else [suite]
    report: dict = {"seed": seed, "fault_injected": fault, "suites": {}}
    for name in names:
        kwargs = {"widths": (1,) + tuple(widths) + (1,)} if name == "bnn" and widths else {}
        checks = SUITES[name](seed, fault, **kwargs)
        report["suites"][name] = [c.to_dict() for c in checks]
    report["pass"] = all(c["pass"] for cs in report["suites"].values() for c in cs)
    return report


# Network check -----------------------------------------------------------------


def load_dataset(path: str, n_in: int) -> tuple[np.ndarray, np.ndarray]:
    """CSV with ``n_in`` input columns followed by one target column; a header row is optional."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    data = []
    for row in rows:
        try:
            data.append([float(v) for v in row])
        except ValueError:
            continue
    arr = np.array(data, dtype=float).reshape(-1, n_in + 1)
    return arr[:, :n_in], arr[:, n_in]


def run_bnn_check(args) -> dict:
    widths = tuple(args.widths)
    spec = bnn.MlpSpec(widths, args.activation)
    if spec.n_weights > bnn.MAX_FIT_WEIGHTS:
        raise ValueError(f"{spec.n_weights} weights exceed the toy-scale limit of {bnn.MAX_FIT_WEIGHTS}")
    checks = suite_bnn(args.seed, widths=widths) if bnn.permutation_count(spec) <= 5040 else []
    report: dict = {"spec": spec.to_dict(), "seed": args.seed, "checks": [c.to_dict() for c in checks]}
    if widths[-1] == 1 and len(widths) == 3 and widths[1] >= 2 and bnn.permutation_count(spec) <= 720:
        mats = [p.matrix() for p in bnn.enumerate_permutations(spec)]
        iso = gs.MomentGaussian(np.zeros(spec.n_weights), np.ones(spec.n_weights))
        rng = np.random.default_rng(args.seed)
        g_far = gs.MomentGaussian(10.0 * rng.normal(size=spec.n_weights), np.full(spec.n_weights, 0.01))
        gap = inv.invariance_gap(inv.permutation_pair(iso, g_far, mats), "monte_carlo", args.n_mc, args.seed)
        report["permutation_gap"] = {"gap": gap.gap, "stderr": gap.stderr, "log_count": math.log(len(mats))}
    if args.fit:
        if args.data:
            xs, ys = load_dataset(args.data, widths[0])
        elif args.n_data == 0:
            xs, ys = np.zeros((0, widths[0])), np.zeros(0)
        else:
            xs = np.full((args.n_data, widths[0]), 1.0 / widths[0])
            ys = np.full(args.n_data, args.y)
        prior = gs.MomentGaussian(np.zeros(spec.n_weights), np.full(spec.n_weights, widths[0] * args.sigma2_0))
        fit = bnn.layerwise_fit(spec, prior, xs, ys, args.sigma2_y, bnn.FitConfig(seed=args.seed))
        report["fit"] = fit.to_dict()
        if spec.n_layers == 1 and spec.activations[0] == "identity" and xs.shape[0] and np.all(xs == xs[0]):
            model = lm.TranslationLinearModel(xs[0] * widths[0], ys, args.sigma2_y, prior.mean, prior.variances())
            oracle = lm.qmix_posterior(model, lm.theta_mix_star(model))
            comp = bnn.fitted_node_posterior(fit, prior, 1, 0).components[0]
            pv_fit = lm.elbo_terms(model, lm.LikelihoodParams(fit.m, fit.v), "invariance_abiding").predictive_variance
            pv_oracle = lm.elbo_terms(model, lm.theta_mix_star(model), "invariance_abiding").predictive_variance
            report["linear_oracle"] = {
                "max_rel_mean_error": float(np.max(np.abs(comp.mean - oracle.mean) / np.abs(oracle.mean))),
                "rel_predictive_variance_error": abs(pv_fit / pv_oracle - 1.0),
            }
    return report


# Argument handling -------------------------------------------------------------


def _widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad widths {text!r}") from exc


def _add_sweep_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-obs", type=int, default=None)
    p.add_argument("--y", type=parse_real, default=None)
    p.add_argument("--sigma2-y", type=parse_real, default=None)
    p.add_argument("--sigma2-0", type=parse_real, default=None)
    p.add_argument("--k-min", type=int, default=None)
    p.add_argument("--k-max", type=int, default=None)
    p.add_argument("--k-step", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with SweepConfig fields; flags take precedence")
    p.add_argument("--out", default=None, help="output CSV path (stdout if omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invariance-gap", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help=f"random seed (env {SEED_ENV} if omitted)")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_sweep_flags(sub.add_parser("gap-sweep", help="invariance gap at both optima versus K"))
    _add_sweep_flags(sub.add_parser("elbo-sweep", help="ELBO terms for both posteriors at both optima versus K"))
    v = sub.add_parser("verify", help="run verification suites; exit 1 on failure")
    v.add_argument("suite", choices=["gaussian", "invariance", "linear", "bnn", "all"])
    v.add_argument("--widths", type=_widths, default=None, help="hidden-layer widths of the bnn suite network")
    v.add_argument("--inject-fault", action="store_true", help="flip the sign of the rank-1 covariance term")
    v.add_argument("--out", default=None)
    b = sub.add_parser("bnn-check", help="invariance checks and optional layer-wise fit on a toy network")
    b.add_argument("--widths", type=_widths, default=(1, 2, 1), help="all layer widths, input first")
    b.add_argument("--activation", choices=sorted(bnn.ACTIVATIONS), default="tanh")
    b.add_argument("--fit", action="store_true")
    b.add_argument("--data", default=None, help="CSV of inputs then target")
    b.add_argument("--n-data", type=int, default=10, help="synthetic identical observations when --data is absent")
    b.add_argument("--y", type=parse_real, default=1.0)
    b.add_argument("--sigma2-y", type=parse_real, default=1.0 / (2.0 * math.pi * math.e))
    b.add_argument("--sigma2-0", type=parse_real, default=1.0)
    b.add_argument("--n-mc", type=int, default=100_000)
    b.add_argument("--out", default=None)
    for p in (v, b) + tuple(sub.choices[c] for c in ("gap-sweep", "elbo-sweep")):
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    return parser


def resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def sweep_config(args) -> SweepConfig:
    values: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values.update(json.load(fh))
    for key, attr in (("n_obs", "n_obs"), ("y_value", "y"), ("sigma2_y", "sigma2_y"), ("sigma2_0", "sigma2_0"), ("out", "out")):
        if getattr(args, attr) is not None:
            values[key] = getattr(args, attr)
    if isinstance(values.get("sigma2_y"), str):
        values["sigma2_y"] = parse_real(values["sigma2_y"])
    if any(getattr(args, a) is not None for a in ("k_min", "k_max", "k_step")):
        lo = args.k_min if args.k_min is not None else 1
        hi = args.k_max if args.k_max is not None else 100
        step = args.k_step if args.k_step is not None else 1
        values["k_values"] = list(range(lo, hi + 1, step))
    values["seed"] = resolve_seed(args)
    return SweepConfig(**values)


def _emit_json(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2, ensure_ascii=False)
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("gap-sweep", "elbo-sweep"):
            cfg = sweep_config(args)
            if args.command == "gap-sweep":
                write_csv(gap_sweep_rows(cfg), GAP_HEADER, cfg.out)
            else:
                write_csv(elbo_sweep_rows(cfg), ELBO_HEADER, cfg.out)
            return 0
        if args.command == "verify":
            report = run_verify(args.suite, resolve_seed(args), args.inject_fault, args.widths)
            _emit_json(report, args.out)
            return 0 if report["pass"] else 1
        args.seed = resolve_seed(args)
        _emit_json(run_bnn_check(args), args.out)
        return 0
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
