import csv
import io
import json
import math
import time

import numpy as np
import pytest

from invariance_gap import cli

TWO_PI_E = 2.0 * math.pi * math.e


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def run(args, capsys=None):
    code = cli.main(args)
    out = capsys.readouterr().out if capsys else None
    return code, out


def test_parse_real_accepts_expression():
    assert cli.parse_real("1/(2*pi*e)") == pytest.approx(1.0 / TWO_PI_E, rel=1e-15)
    assert cli.parse_real("0.25") == 0.25
    with pytest.raises(Exception):
        cli.parse_real("__import__('os')")


def test_default_k_grid():
    ks = cli.default_k_values()
    assert ks[:100] == list(range(1, 101))
    assert ks[-1] == 10_000 and ks[100] == 200
    assert all(a < b for a, b in zip(ks, ks[1:]))


def test_sweep_config_validation():
    with pytest.raises(ValueError):
        cli.SweepConfig(k_values=[])
    with pytest.raises(ValueError):
        cli.SweepConfig(k_values=[0, 1])


def test_gap_sweep_csv_properties(tmp_path):
    out = tmp_path / "gap.csv"
    assert cli.main(["gap-sweep", "--k-min", "1", "--k-max", "60", "--out", str(out)]) == 0
    header, data = read_csv(out)
    assert header == cli.GAP_HEADER
    assert data[0, 1] == 0.0 and data[0, 2] == 0.0
    second = np.diff(data[:, 1], 2)
    assert np.max(np.abs(second)) < 1e-9
    slope = 0.5 * (math.log(1 + 10 * TWO_PI_E) + 1 / (1 + 10 * TWO_PI_E) - 1)
    np.testing.assert_allclose(np.diff(data[:, 1]), slope, rtol=1e-12)
    np.testing.assert_allclose(data[:, 3], 10 * TWO_PI_E, rtol=1e-13)
    raw = out.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")


def test_gap_at_mean_field_optimum_decays_like_inverse_k():
    cfg = cli.SweepConfig(k_values=[1000, 2000, 5000, 10_000])
    gaps = np.array([row[2] for row in cli.gap_sweep_rows(cfg)])
    assert np.all(np.diff(gaps) < 0)
    # with a = K s2y / N: (K-1)/2 [ln(1 + 1/a) - 1/(1 + a)], leading term N^2 / (4 K s2y^2)
    k = np.array(cfg.k_values, dtype=float)
    a = k / (10 * TWO_PI_E)
    np.testing.assert_allclose(gaps, 0.5 * (k - 1) * (np.log1p(1 / a) - 1 / (1 + a)), rtol=1e-10)
    assert gaps[-1] * k[-1] / (100 * TWO_PI_E**2 / 4) == pytest.approx(1.0, abs=0.05)


def test_csv_is_byte_identical_across_runs(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        assert cli.main(["elbo-sweep", "--k-max", "30", "--seed", "3", "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_csv_uses_full_precision(tmp_path):
    out = tmp_path / "gap.csv"
    cli.main(["gap-sweep", "--k-min", "5", "--k-max", "5", "--out", str(out)])
    cell = out.read_text().splitlines()[1].split(",")[1]
    assert float(cell) == cli.gap_sweep_rows(cli.SweepConfig(k_values=[5]))[0][1]


def test_elbo_sweep_columns(tmp_path):
    out = tmp_path / "elbo.csv"
    assert cli.main(["elbo-sweep", "--k-max", "50", "--out", str(out)]) == 0
    header, data = read_csv(out)
    assert len(header) == 17 and header[0] == "K"
    col = {name: data[:, i] for i, name in enumerate(header)}
    for theta in ("theta_0_star", "theta_mix_star"):
        np.testing.assert_allclose(col[f"q0_{theta}_ell"], col[f"qmix_{theta}_ell"], atol=1e-10, rtol=0)
    for term in ("ell", "kl", "elbo", "predictive_variance"):
        c = col[f"qmix_theta_mix_star_{term}"]
        assert np.max(np.abs(c - c[0])) < 1e-9
    s2y = 1 / TWO_PI_E
    np.testing.assert_allclose(col["qmix_theta_mix_star_predictive_variance"], s2y + 1 / (10 / s2y + 1), atol=1e-9)


def test_mean_field_collapses_towards_prior_at_large_k():
    cfg = cli.SweepConfig(k_values=[100, 1000, 10_000])
    idx = {name: i for i, name in enumerate(cli.ELBO_HEADER)}
    rows = cli.elbo_sweep_rows(cfg)
    kl = [r[idx["q0_theta_0_star_kl"]] for r in rows]
    pv = [r[idx["q0_theta_0_star_predictive_variance"]] for r in rows]
    assert kl[0] > kl[1] > kl[2]
    target = 1.0 + 1 / TWO_PI_E
    assert abs(pv[2] - target) < abs(pv[1] - target) < abs(pv[0] - target)


def test_config_file_and_flag_precedence(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"k_values": [1, 2, 3], "n_obs": 100, "sigma2_y": "1/(2*pi*e)"}))
    out = tmp_path / "o.csv"
    assert cli.main(["gap-sweep", "--config", str(cfg_path), "--n-obs", "10", "--out", str(out)]) == 0
    _, data = read_csv(out)
    np.testing.assert_array_equal(data[:, 0], [1, 2, 3])
    np.testing.assert_allclose(data[:, 3], 10 * TWO_PI_E, rtol=1e-13)


def test_sigma_flag_accepts_literal(tmp_path):
    out = tmp_path / "o.csv"
    assert cli.main(["gap-sweep", "--k-max", "3", "--sigma2-y", "1/(2*pi*e)", "--out", str(out)]) == 0


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "17")
    args = cli.build_parser().parse_args(["verify", "gaussian"])
    assert cli.resolve_seed(args) == 17
    args = cli.build_parser().parse_args(["verify", "gaussian", "--seed", "4"])
    assert cli.resolve_seed(args) == 4


def test_unwritable_output_exits_2(tmp_path):
    assert cli.main(["gap-sweep", "--k-max", "2", "--out", str(tmp_path / "missing" / "x.csv")]) == 2


def test_verify_all_passes(capsys):
    code, out = run(["verify", "all", "--seed", "1"], capsys)
    report = json.loads(out)
    assert code == 0 and report["pass"] is True
    assert set(report["suites"]) == {"gaussian", "invariance", "linear", "bnn"}
    for checks in report["suites"].values():
        for c in checks:
            assert "residual" in c and "pass" in c


def test_verify_detects_injected_fault(capsys):
    code, out = run(["verify", "invariance", "--inject-fault"], capsys)
    report = json.loads(out)
    assert code == 1 and report["pass"] is False
    failed = [c["name"] for c in report["suites"]["invariance"] if not c["pass"]]
    assert any("identity" in name for name in failed)


def test_verify_bnn_with_two_hidden_layers(capsys):
    code, out = run(["verify", "bnn", "--widths", "2,2"], capsys)
    report = json.loads(out)
    assert code == 0
    names = {c["name"]: c for c in report["suites"]["bnn"]}
    assert names["permutations_enumerated"]["residual"] == 4.0


def test_bnn_check_invariances(capsys):
    code, out = run(["bnn-check", "--widths", "1,2,1", "--n-mc", "20000"], capsys)
    report = json.loads(out)
    assert code == 0
    assert all(c["pass"] for c in report["checks"])
    gap = report["permutation_gap"]
    assert abs(gap["gap"] - gap["log_count"]) <= max(3 * gap["stderr"], 1e-12)


def test_bnn_check_linear_fit_oracle(capsys):
    code, out = run(["bnn-check", "--widths", "10,1", "--activation", "identity", "--fit"], capsys)
    report = json.loads(out)
    assert code == 0
    assert report["linear_oracle"]["max_rel_mean_error"] < 0.02
    assert report["linear_oracle"]["rel_predictive_variance_error"] < 0.05


def test_bnn_check_empty_data_returns_prior(capsys):
    code, out = run(["bnn-check", "--widths", "3,1", "--activation", "identity", "--fit", "--n-data", "0"], capsys)
    fit = json.loads(out)["fit"]
    assert code == 0
    np.testing.assert_array_equal(fit["m"], 0.0)


def test_bnn_check_reads_dataset(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text("x0,x1,y\n0.5,0.5,1.0\n0.5,0.5,1.0\n")
    code, out = run(["bnn-check", "--widths", "2,1", "--activation", "identity", "--fit", "--data", str(data)], capsys)
    assert code == 0 and "linear_oracle" in json.loads(out)


def test_bnn_check_rejects_oversize_network(capsys):
    code, _ = run(["bnn-check", "--widths", "40,30,1"], capsys)
    assert code == 2


def test_sweeps_run_under_a_minute(tmp_path):
    start = time.perf_counter()
    assert cli.main(["gap-sweep", "--out", str(tmp_path / "g.csv")]) == 0
    assert cli.main(["elbo-sweep", "--out", str(tmp_path / "e.csv")]) == 0
    assert time.perf_counter() - start < 60.0


def test_write_csv_to_stdout(capsys):
    cli.write_csv([[1, 0.5]], ["a", "b"], None)
    out = capsys.readouterr().out
    assert list(csv.reader(io.StringIO(out))) == [["a", "b"], ["1", "0.5"]]
