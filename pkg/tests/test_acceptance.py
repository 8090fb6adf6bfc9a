"""Acceptance criteria at full experimental scale.

Each test prints one ``criterion N: PASS|FAIL`` line.  The whole module takes
several hours on one core; the runs parallelize across repetitions.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from conftest import grid_mle
from stepselect.baselines import fit_clogit_glm
from stepselect.bench import SCENARIO1_GRID, ScenarioConfig, check_mse_identity, run_scenario, _result_rows
from stepselect.cli import main
from stepselect.core import conditional_nll, stratum_log_softmax
from stepselect.net import ArchSpec, EmbeddingSpec, TrainConfig, build_network, gradient_check, train
from stepselect.simkit import SelectionSpec, make_rng, simulate_selection
from test_net import ARCH_MATRIX, randomize_biases, small_stratum_data

THREADS = os.cpu_count() or 1


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return emit


def calibration(cfg):
    return {(c.model, c.true_slope): c for c in run_scenario(cfg).summary}


def test_criterion_1_type_one_error(report):
    s = calibration(ScenarioConfig(1, n_repetitions=400, true_effect_grid=(0.0,), n_strata=2000,
                                   n_controls=9, bootstrap=20, seed=101, threads=THREADS))
    rates = {m: s[m, 0.0].rejection_rate for m in ("glm", "dnn")}
    ok = all(0.02 <= r <= 0.09 for r in rates.values())
    assert report(1, ok, f"rejection rates at slope 0: glm {rates['glm']:.4f}, dnn {rates['dnn']:.4f} "
                         "(band [0.02, 0.09])")


def test_criterion_2_coverage(report):
    s = calibration(ScenarioConfig(1, n_repetitions=200, true_effect_grid=(-1.0, 1.0), n_strata=2000,
                                   bootstrap=20, seed=102, threads=THREADS))
    cov = {k: c.coverage for k, c in s.items()}
    ok = all(0.88 <= v <= 0.99 for v in cov.values())
    text = ", ".join(f"{m} slope {b:g}: {v:.3f}" for (m, b), v in sorted(cov.items()))
    assert report(2, ok, f"coverage {text} (band [0.88, 0.99])")


def test_criterion_3_unbiasedness(report):
    s = calibration(ScenarioConfig(1, n_repetitions=100, true_effect_grid=SCENARIO1_GRID, n_strata=2000,
                                   bootstrap=0, seed=103, threads=THREADS))
    bias = {k: c.bias for k, c in s.items()}
    ok = all(abs(bias["glm", b]) <= 0.1 and abs(bias["dnn", b]) <= 0.2 for b in SCENARIO1_GRID)
    text = ", ".join(f"{b:g}: glm {bias['glm', b]:+.3f} dnn {bias['dnn', b]:+.3f}" for b in SCENARIO1_GRID)
    assert report(3, ok, f"bias by slope {text} (|glm| <= 0.1, |dnn| <= 0.2)")


def test_criterion_4_nonlinear_recovery(report):
    out = {}
    for truth in ("hump", "wiggle"):
        out[truth] = run_scenario(ScenarioConfig(2, n_repetitions=20, truth=truth, seed=104,
                                                 threads=THREADS)).summary
    h = out["hump"]
    var = h["dnn"]["truth_variance"]
    ok = h["dnn"]["mean_mse"] < 0.25 * var and h["spline"]["mean_mse"] < 0.25 * var
    ratios = {t: out[t]["dnn"]["mean_mse"] / out[t]["spline"]["mean_mse"] for t in out}
    ok = ok and all(r <= 1.5 for r in ratios.values())
    assert report(4, ok, f"hump mse dnn {h['dnn']['mean_mse']:.4f}, spline {h['spline']['mean_mse']:.4f}, "
                         f"25% of truth variance {0.25 * var:.4f}; dnn/spline ratio hump "
                         f"{ratios['hump']:.2f}, wiggle {ratios['wiggle']:.2f} (<= 1.5)")


@pytest.fixture(scope="module")
def scenario3_result():
    return run_scenario(ScenarioConfig(3, n_repetitions=100, seed=105, threads=THREADS))


def test_criterion_5_interaction_matrix(report, scenario3_result):
    dnn, glm = scenario3_result.summary["dnn"], scenario3_result.summary["glm"]
    m = {(name, k): em.average_mse(k) for name, em in (("dnn", dnn), ("glm", glm))
         for k in (None, "null_interaction", "true_interaction")}
    ok = (m["dnn", None] < m["glm", None] and m["glm", "null_interaction"] > m["dnn", "null_interaction"]
          and m["dnn", "true_interaction"] > m["glm", "true_interaction"])
    assert report(5, ok, "average mse dnn/glm: overall {:.4f}/{:.4f}, null interactions {:.4f}/{:.4f}, "
                         "true interactions {:.4f}/{:.4f}".format(
                             m["dnn", None], m["glm", None], m["dnn", "null_interaction"],
                             m["glm", "null_interaction"], m["dnn", "true_interaction"],
                             m["glm", "true_interaction"]))


def test_criterion_6_individual_embeddings(report):
    res = run_scenario(ScenarioConfig(4, n_repetitions=10, seed=106, threads=THREADS))
    good = [r["ari"] >= 0.9 and r["null_arrows_shortest"] and r["min_correlated_cosine"] > 0.7
            for r in res.rows]
    ok = res.n_completed == 10 and sum(good) >= 8
    aris = ", ".join(f"{r['ari']:.2f}" for r in res.rows)
    assert report(6, ok, f"{sum(good)} of {len(res.rows)} runs meet ARI >= 0.9, null arrows shortest and "
                         f"correlated cosine > 0.7 (need 8); ARIs {aris}")


def test_criterion_7_opponent_embeddings(report):
    res = run_scenario(ScenarioConfig(5, n_repetitions=10, seed=107, threads=THREADS))
    good = [r["ari"] >= 0.9 and r["centroid_order_ok"] for r in res.rows]
    ok = res.n_completed == 10 and sum(good) >= 8
    assert report(7, ok, f"{sum(good)} of {len(res.rows)} runs meet ARI >= 0.9 and repel > neutral > "
                         "attract (need 8)")


def test_criterion_8_oracle_equivalence(report):
    worst_net = 0.0
    for seed in range(20):
        d = simulate_selection(SelectionSpec(1, (1.0,), n_strata=2000), 800 + seed)
        glm = fit_clogit_glm(d).coefficients[0]
        net = train(build_network(ArchSpec(1, ()), seed), d, TrainConfig(seed=seed))[0]
        worst_net = max(worst_net, abs(net.weights[0][0, 0] - glm))
    worst_grid = 0.0
    for seed in range(10):
        d = simulate_selection(SelectionSpec(1, (0.8,), n_controls=4, n_strata=50), 900 + seed)
        oracle = grid_mle(d.X[:, 0], 5, d.strata.case_col, step=0.001)
        worst_grid = max(worst_grid, abs(fit_clogit_glm(d).coefficients[0] - oracle))
    ok = worst_net <= 0.05 and worst_grid <= 0.002
    assert report(8, ok, f"max |linear net - glm| {worst_net:.4f} (<= 0.05) over 20 datasets; "
                         f"max |glm - grid| {worst_grid:.5f} (<= 0.002) over 10 datasets")


def test_criterion_9_numerical_core(report, scenario3_result):
    worst_grad = 0.0
    for hidden, activation, wiring in ARCH_MATRIX:
        emb = None if wiring is None else EmbeddingSpec(3, 2, "individual", wiring)
        net = randomize_biases(build_network(ArchSpec(3, hidden, activation, emb), 11), 12)
        if net.modulation is not None:
            net.modulation[...] = make_rng(13).normal(size=net.modulation.shape)
        worst_grad = max(worst_grad, gradient_check(net, small_stratum_data(3, 3, 14), 1e-5))
    d = simulate_selection(SelectionSpec(2, (1.0, -1.0), n_strata=500), 9)
    rng = np.random.default_rng(9)
    scores = rng.normal(0, 5, d.n_records)
    sums = np.exp(stratum_log_softmax(scores, d.strata)).sum(axis=1)
    worst_sum = float(np.max(np.abs(sums - 1)))
    shift = rng.normal(0, 50, d.n_strata)[d.stratum_id]
    worst_shift = float(np.max(np.abs(conditional_nll(scores + shift, d.strata)
                                      - conditional_nll(scores, d.strata))))
    worst_mse = check_mse_identity(_result_rows(3, scenario3_result.summary))
    ok = worst_grad < 1e-5 and worst_sum <= 1e-12 and worst_shift <= 1e-10 and worst_mse <= 1e-9
    assert report(9, ok, f"gradient check {worst_grad:.2e} over {len(ARCH_MATRIX)} architectures, "
                         f"softmax sum error {worst_sum:.1e}, shift change {worst_shift:.1e}, "
                         f"mse identity residual {worst_mse:.1e}")


def _outputs(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix in (".csv", ".json")}


def _cli_session(root: Path, threads: int) -> dict[str, bytes]:
    t = ["--threads", str(threads)]
    steps = [
        ["simulate", "--scenario", "4", "--strata", "600", "--seed", "3", "-o", root / "sim"],
        ["fit", "--data", root / "sim/data.csv", "--embed", "individual:2", "--epochs", "20", "--seed", "3",
         "-o", root / "dnn"],
        ["fit", "--data", root / "sim/data.csv", "--model", "glm", "-o", root / "glm"],
        ["fit", "--data", root / "sim/data.csv", "--model", "spline", "--seed", "3", "-o", root / "spline"],
        ["explain", "ace", "--data", root / "sim/data.csv", "--model", root / "dnn/model.json",
         "--bootstrap", "4", "--seed", "3", "-o", root / "ace", *t],
        ["explain", "importance", "--data", root / "sim/data.csv", "--model", root / "glm/model.json",
         "--seed", "3", "-o", root / "imp", *t],
        ["explain", "biplot", "--data", root / "sim/data.csv", "--model", root / "dnn/model.json",
         "--truth", root / "sim/truth.json", "-o", root / "bip", *t],
        ["bench", "--scenario", "all", "--reps", "3", "--strata", "300", "--bootstrap", "3", "--seed", "3",
         "-o", root / "bench", *t],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return _outputs(root)


def test_criterion_10_reproducibility(report, tmp_path):
    a = _cli_session(tmp_path / "a", 1)
    b = _cli_session(tmp_path / "b", 1)
    c = _cli_session(tmp_path / "c", 2)
    diff_runs = sorted(k for k in a if a[k] != b.get(k))
    diff_threads = sorted(k for k in a if a[k] != c.get(k))
    ok = not diff_runs and not diff_threads and set(a) == set(b) == set(c)
    assert report(10, ok, f"{len(a)} CSV/JSON files compared; differing across runs: {diff_runs or 'none'}; "
                          f"across thread counts: {diff_threads or 'none'}")
