"""Simulation experiments: calibration of slope inference, nonlinear-curve
recovery, the pairwise effect matrix, and embedding recovery for grouped
individuals and for opponents.

Each ``run_scenarioK`` writes ``<root>/scenario<K>/rep<i>/metrics.csv`` for
every completed repetition plus ``<root>/scenario<K>/results.csv`` with the
aggregated metrics, and returns the aggregated objects.  Repetition ``i`` of
scenario ``K`` draws all randomness from ``(seed, K, i)``, so results do not
depend on the order or the number of workers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .baselines import (FormulaSpec, SplineSettings, fit_clogit_glm,
                        fit_clogit_spline, model_to_dict, spline_curve, wald_inference)
from .core import StrataDataset, write_csv
from .net import (ArchSpec, DnnFitter, EmbeddingSpec, TrainConfig, build_network,
                  network_to_dict, train)
from .simkit import (MovementKernel, SelectionSpec, SocialSpec, make_rng, simulate_selection,
                     simulate_social, transform, truth_document)
from .xai import (ale_curve, average_conditional_effect, average_cross_partial,
                  bootstrap_inference, embedding_biplot)

logger = logging.getLogger(__name__)

SCENARIO3_MAINS = (-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0)
SCENARIO3_INTERACTIONS = ((0, 7, 1.0), (2, 6, -1.0), (3, 5, 1.0))
SCENARIO1_GRID = (-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0)

# per-scenario network settings; the 2x32 library default overfits the
# one- and nine-feature problems at 2000 strata, and scenario 2 trains
# full-batch so minibatch noise does not roughen the recovered curve
_DEFAULT_NETS: dict[int, tuple[dict, dict]] = {
    1: ({"hidden": (16,), "activation": "relu"},
        {"epochs": 100, "learning_rate": 0.01, "batch_strata": 200}),
    2: ({"hidden": (32, 32), "activation": "relu", "l2": 1e-4},
        {"epochs": 600, "learning_rate": 0.01, "batch_strata": 2000}),
    3: ({"hidden": (16,), "activation": "relu", "l2": 1e-3},
        {"epochs": 100, "learning_rate": 0.01, "batch_strata": 100}),
    4: ({"hidden": (32, 32), "activation": "relu", "l2": 1e-3},
        {"epochs": 150, "learning_rate": 0.01, "batch_strata": 100}),
    5: ({"hidden": (32, 32), "activation": "relu", "l2": 1e-3},
        {"epochs": 150, "learning_rate": 0.01, "batch_strata": 100}),
}
_DEFAULT_STRATA = {1: 2000, 2: 2000, 3: 2000, 4: 6000, 5: 0}


# ---------------------------------------------------------------------- #
# Configuration and result types
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class ScenarioConfig:
    """Settings of one experiment.

    ``true_effect_grid`` lists the slopes of scenario 1.  ``truth`` names the
    registered transform of scenario 2.  ``null_control`` replaces the group
    structure of scenarios 4 and 5 by a shared response.  ``bootstrap`` of 0
    skips the bootstrap in scenario 1 (point estimates only).  ``n_strata``
    of 0 picks the scenario default; scenario 5 sizes its data by
    ``n_steps`` instead.
    """

    scenario: int
    n_repetitions: int = 100
    n_strata: int = 0
    n_controls: int = 9
    true_effect_grid: tuple[float, ...] = SCENARIO1_GRID
    truth: str = "hump"
    arch: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    bootstrap: int = 20
    seed: int = 0
    null_control: bool = False
    n_steps: int = 200
    ale_bins: int = 20
    save_artifacts: bool = False
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "true_effect_grid", tuple(float(b) for b in self.true_effect_grid))
        object.__setattr__(self, "arch", dict(self.arch))
        object.__setattr__(self, "train", dict(self.train))
        if self.scenario not in (1, 2, 3, 4, 5):
            raise ValueError(f"scenario must be 1..5, got {self.scenario}")
        if self.n_repetitions < 1:
            raise ValueError("n_repetitions must be >= 1")
        if self.n_strata < 0 or self.n_controls < 1 or self.n_steps < 1:
            raise ValueError("n_strata must be >= 0, n_controls and n_steps >= 1")
        if self.bootstrap == 1 or self.bootstrap < 0:
            raise ValueError("bootstrap must be 0 (off) or >= 2")
        if self.scenario == 2:
            transform(self.truth)
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.true_effect_grid:
            raise ValueError("true_effect_grid must not be empty")

    @property
    def strata(self) -> int:
        return self.n_strata or _DEFAULT_STRATA[self.scenario]

    def arch_spec(self, n_features: int, embedding: EmbeddingSpec | None = None) -> ArchSpec:
        kw = {**_DEFAULT_NETS[self.scenario][0], **self.arch}
        kw.pop("n_features", None)
        if embedding is not None:
            kw["embedding"] = embedding
        return ArchSpec(n_features=n_features, **kw)

    def train_config(self, seed: int) -> TrainConfig:
        kw = {**_DEFAULT_NETS[self.scenario][1], **self.train}
        kw["seed"] = seed
        return TrainConfig(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_effect_grid"] = list(self.true_effect_grid)
        d["arch"] = {**_DEFAULT_NETS[self.scenario][0], **self.arch}
        d["arch"]["hidden"] = list(d["arch"]["hidden"])
        d["train"] = {**_DEFAULT_NETS[self.scenario][1], **self.train}
        d["n_strata"] = self.strata
        # worker count does not affect results
        d.pop("threads")
        return d


@dataclass(frozen=True)
class CalibrationSummary:
    model: str
    true_slope: float
    n_completed: int
    mean_estimate: float
    bias: float
    coverage: float
    rejection_rate: float


@dataclass(frozen=True)
class EffectCell:
    row: int
    col: int
    truth: float
    mean_estimate: float
    bias: float
    variance: float
    mse: float

    @property
    def kind(self) -> str:
        if self.row == self.col:
            return "main"
        return "true_interaction" if self.truth != 0 else "null_interaction"


@dataclass(frozen=True)
class EffectMatrix:
    """Upper triangle plus diagonal of main effects and pairwise interactions."""

    model: str
    n_completed: int
    cells: tuple[EffectCell, ...]

    def average_mse(self, kind: str | None = None) -> float:
        sel = [c.mse for c in self.cells if kind is None or c.kind == kind]
        return float(np.mean(sel))

    def cell(self, row: int, col: int) -> EffectCell:
        return next(c for c in self.cells if (c.row, c.col) == (row, col))

    def identity_residual(self) -> float:
        return max(abs(c.mse - (c.variance + c.bias ** 2)) for c in self.cells)


@dataclass(frozen=True)
class ClusterSummary:
    """Agreement of k-means clusters of embedding positions with true groups."""

    ari: float
    silhouette: float
    permutation_p: float

    def __post_init__(self):
        if not -1.0 - 1e-12 <= self.ari <= 1.0 + 1e-12:
            raise ValueError("ARI outside [-1, 1]")


@dataclass
class ScenarioResult:
    scenario: int
    n_requested: int
    n_completed: int
    failures: list[str]
    summary: Any
    rows: list[dict]

    @property
    def completion(self) -> float:
        return self.n_completed / self.n_requested


# ---------------------------------------------------------------------- #
# Helpers
# ---------------------------------------------------------------------- #


def repetition_seed(seed: int, scenario: int, rep: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(scenario, rep))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_rows(path: Path, rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


def _dump_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _quiet_train(net, d, cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return train(net, d, cfg)[0]


def _cluster(positions: np.ndarray, labels: np.ndarray, k: int, seed: int,
             n_perm: int = 999) -> ClusterSummary:
    from sklearn.cluster import KMeans
    from sklearn.metrics import adjusted_rand_score, silhouette_score

    pred = KMeans(n_clusters=k, n_init=20, random_state=seed % (2 ** 31)).fit_predict(positions)
    ari = float(adjusted_rand_score(labels, pred))
    sil = float(silhouette_score(positions, pred)) if 1 < len(set(pred)) < len(pred) else 0.0
    rng = make_rng(seed, 0x4152)
    perm = [adjusted_rand_score(rng.permutation(labels), pred) for _ in range(n_perm)]
    p = (1 + sum(a >= ari - 1e-12 for a in perm)) / (1 + n_perm)
    return ClusterSummary(ari, sil, float(p))


# ---------------------------------------------------------------------- #
# Repetitions
# ---------------------------------------------------------------------- #


def _rep_scenario1(cfg: ScenarioConfig, rep: int, out: Path | None) -> list[dict]:
    rows = []
    for s, slope in enumerate(cfg.true_effect_grid):
        seed = repetition_seed(cfg.seed, 1, rep * 1000 + s)
        spec = SelectionSpec(1, (slope,), n_controls=cfg.n_controls, n_strata=cfg.strata)
        d = simulate_selection(spec, seed)
        glm = fit_clogit_glm(d)
        w = wald_inference(glm)[0]
        rows.append(dict(rep=rep, true_slope=slope, model="glm", estimate=w.estimate, se=w.se,
                         ci_low=w.ci_low, ci_high=w.ci_high, p_value=w.p_value))
        fitter = DnnFitter(cfg.arch_spec(1), cfg.train_config(seed), init_seed=seed)
        net = fitter(d)
        if cfg.bootstrap:
            r = bootstrap_inference(fitter, d, [0], B=cfg.bootstrap, seed=seed, model=net)[0]
            rows.append(dict(rep=rep, true_slope=slope, model="dnn", estimate=r.estimate, se=r.se,
                             ci_low=r.ci_low, ci_high=r.ci_high, p_value=r.p_value))
        else:
            est = average_conditional_effect(net, d, 0)
            rows.append(dict(rep=rep, true_slope=slope, model="dnn", estimate=est, se=math.nan,
                             ci_low=math.nan, ci_high=math.nan, p_value=math.nan))
        if out is not None:
            sub = out / f"slope{s}"
            _save_dataset(sub, d, spec, seed)
            _dump_json(sub / "glm.json", model_to_dict(glm))
            _dump_json(sub / "dnn.json", network_to_dict(net))
    for r in rows:
        r["covered"] = bool(r["ci_low"] <= r["true_slope"] <= r["ci_high"])
        r["rejected"] = bool(r["p_value"] < 0.05)
    return rows


def _curve_mse(curve: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(((curve - curve.mean()) - (truth - truth.mean())) ** 2))


def _rep_scenario2(cfg: ScenarioConfig, rep: int, out: Path | None) -> list[dict]:
    seed = repetition_seed(cfg.seed, 2, rep)
    spec = SelectionSpec(1, (1.0,), nonlinear_transforms=((0, cfg.truth),),
                         n_controls=cfg.n_controls, n_strata=cfg.strata)
    d = simulate_selection(spec, seed)
    x = d.X[:, 0]
    grid = np.linspace(*np.quantile(x, [0.05, 0.95]), 100)
    truth = transform(cfg.truth)(grid)
    net = _quiet_train(build_network(cfg.arch_spec(1), seed), d, cfg.train_config(seed))
    ale = ale_curve(net, d, 0, cfg.ale_bins)
    dnn_curve = np.interp(grid, ale.bin_mids, ale.centered_effect)
    spl = fit_clogit_spline(d, 0, SplineSettings(seed=seed))
    spl_curve = spline_curve(spl, grid)
    if out is not None:
        _save_dataset(out, d, spec, seed)
        _dump_json(out / "dnn.json", network_to_dict(net))
        _dump_json(out / "spline.json", model_to_dict(spl))
    tv = float(np.var(truth))
    return [dict(rep=rep, truth=cfg.truth, model="dnn", mse=_curve_mse(dnn_curve, truth), truth_variance=tv),
            dict(rep=rep, truth=cfg.truth, model="spline", mse=_curve_mse(spl_curve, truth),
                 truth_variance=tv, penalty=spl.penalty)]


def scenario3_truth() -> np.ndarray:
    T = np.zeros((9, 9))
    np.fill_diagonal(T, SCENARIO3_MAINS)
    for p, q, g in SCENARIO3_INTERACTIONS:
        T[p, q] = g
    return T


def _rep_scenario3(cfg: ScenarioConfig, rep: int, out: Path | None) -> list[dict]:
    seed = repetition_seed(cfg.seed, 3, rep)
    spec = SelectionSpec(9, SCENARIO3_MAINS, SCENARIO3_INTERACTIONS,
                         n_controls=cfg.n_controls, n_strata=cfg.strata)
    d = simulate_selection(spec, seed)
    glm = fit_clogit_glm(d, FormulaSpec.all_pairs(9))
    G = np.zeros((9, 9))
    G[np.diag_indices(9)] = glm.coefficients[:9]
    for c, (p, q) in zip(glm.coefficients[9:], glm.formula.interactions):
        G[p, q] = c
    net = _quiet_train(build_network(cfg.arch_spec(9), seed), d, cfg.train_config(seed))
    D = np.zeros((9, 9))
    for j in range(9):
        D[j, j] = average_conditional_effect(net, d, j)
        for q in range(j + 1, 9):
            D[j, q] = average_cross_partial(net, d, j, q)
    if out is not None:
        _save_dataset(out, d, spec, seed)
        _dump_json(out / "glm.json", model_to_dict(glm))
        _dump_json(out / "dnn.json", network_to_dict(net))
    T = scenario3_truth()
    rows = []
    for model, E in (("dnn", D), ("glm", G)):
        for p in range(9):
            for q in range(p, 9):
                rows.append(dict(rep=rep, model=model, row=p, col=q, truth=T[p, q], estimate=E[p, q]))
    return rows


def scenario4_truth(seed: int, n_groups: int = 4, null_control: bool = False) -> dict[int, tuple]:
    """Group coefficients for 10 independent, 5 correlated and 5 null predictors.

    Each independent predictor's group values are a random permutation of one
    uniform draw per equal-width slice of (-3, 3), so the groups always
    differ.  The correlated block shares one stratified latent value per group
    (scaled by 0.8) plus N(0, 0.2) jitter.
    """
    rng = make_rng(seed, 0x5334)
    edges = np.linspace(-3.0, 3.0, n_groups + 1)
    width = edges[1] - edges[0]

    def stratified():
        return rng.permutation(edges[:-1] + rng.uniform(0, 1, n_groups) * width)

    indep = np.array([stratified() for _ in range(10)]).T
    latent = 0.8 * stratified()
    table = {}
    for g in range(n_groups):
        corr = np.clip(latent[g] + rng.normal(0.0, 0.2, 5), -2.99, 2.99)
        table[g] = tuple(np.concatenate([indep[g], corr, np.zeros(5)]))
    if null_control:
        table = {g: table[0] for g in range(n_groups)}
    return table


def _rep_scenario4(cfg: ScenarioConfig, rep: int, out: Path | None) -> list[dict]:
    seed = repetition_seed(cfg.seed, 4, rep)
    groups = scenario4_truth(seed, 4, cfg.null_control)
    spec = SelectionSpec(20, (0.0,) * 20, group_betas=groups, individuals_per_group=5,
                         n_controls=cfg.n_controls, n_strata=cfg.strata)
    d = simulate_selection(spec, seed)
    emb = EmbeddingSpec(spec.n_individuals, 2, "individual", "concat")
    net = _quiet_train(build_network(cfg.arch_spec(20, emb), seed), d, cfg.train_config(seed))
    labels = spec.group_of(np.arange(spec.n_individuals))
    clus = _cluster(net.embedding_table, labels, spec.n_groups, seed)
    bp = embedding_biplot(net, d, group_labels=labels)
    norms = np.array([np.linalg.norm(a) for a in bp.arrows])
    unit = bp.arrows[10:15] / np.maximum(norms[10:15, None], 1e-300)
    cos = (unit @ unit.T)[np.triu_indices(5, 1)]
    if out is not None:
        _save_dataset(out, d, spec, seed)
        _dump_json(out / "dnn.json", network_to_dict(net))
    return [dict(rep=rep, null_control=cfg.null_control, ari=clus.ari, silhouette=clus.silhouette,
                 ari_permutation_p=clus.permutation_p,
                 null_arrows_shortest=bool(norms[15:].max() < norms[:10].min()),
                 max_null_arrow=float(norms[15:].max()), min_independent_arrow=float(norms[:10].min()),
                 min_correlated_cosine=float(cos.min()))]


def _rep_scenario5(cfg: ScenarioConfig, rep: int, out: Path | None) -> list[dict]:
    seed = repetition_seed(cfg.seed, 5, rep)
    effects = (0.0, 0.0, 0.0) if cfg.null_control else (0.0, -2.0, 2.0)
    spec = SocialSpec(3, 5, effects, kernel=MovementKernel(), n_steps=cfg.n_steps,
                      n_controls=cfg.n_controls)
    d = simulate_social(spec, seed)
    emb = EmbeddingSpec(spec.n_individuals, 2, "opponent", "concat")
    net = _quiet_train(build_network(cfg.arch_spec(1, emb), seed), d, cfg.train_config(seed))
    ids = np.unique(d.opponent_id)
    labels = spec.group_of(ids)
    clus = _cluster(net.embedding_table[ids], labels, spec.n_groups, seed)
    bp = embedding_biplot(net, d, group_labels={int(i): int(g) for i, g in zip(ids, labels)})
    arrow = bp.arrows[0]
    proj = [float(np.mean(bp.positions[bp.group_labels == g] @ arrow)) if np.any(bp.group_labels == g)
            else math.nan for g in range(spec.n_groups)]
    order = np.argsort(effects)
    ordered = bool(all(proj[order[i]] < proj[order[i + 1]] for i in range(len(order) - 1)))
    if out is not None:
        _save_dataset(out, d, spec, seed)
        _dump_json(out / "dnn.json", network_to_dict(net))
    return [dict(rep=rep, null_control=cfg.null_control, ari=clus.ari, silhouette=clus.silhouette,
                 ari_permutation_p=clus.permutation_p, centroid_order_ok=ordered,
                 proj_neutral=proj[0], proj_attract=proj[1], proj_repel=proj[2])]


def _save_dataset(out: Path, d: StrataDataset, spec, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_csv(d, out / "data.csv")
    _dump_json(out / "truth.json", truth_document(spec, seed, d))


_REPS = {1: _rep_scenario1, 2: _rep_scenario2, 3: _rep_scenario3, 4: _rep_scenario4, 5: _rep_scenario5}


def _run_rep(cfg: ScenarioConfig, rep: int, root: str | None):
    out = Path(root) / f"scenario{cfg.scenario}" / f"rep{rep}" if root is not None else None
    try:
        rows = _REPS[cfg.scenario](cfg, rep, out if cfg.save_artifacts else None)
    except Exception as exc:  # noqa: BLE001 - a failed repetition never aborts the run
        logger.warning("scenario %d repetition %d failed: %s", cfg.scenario, rep, exc)
        return rep, None, f"rep {rep}: {type(exc).__name__}: {exc}"
    if out is not None:
        _write_rows(out / "metrics.csv", rows)
    return rep, rows, None


def _run_all(cfg: ScenarioConfig, root: str | Path | None):
    root_s = None if root is None else str(root)
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            res = list(pool.map(_run_rep, [cfg] * cfg.n_repetitions, range(cfg.n_repetitions),
                                [root_s] * cfg.n_repetitions))
    else:
        res = [_run_rep(cfg, r, root_s) for r in range(cfg.n_repetitions)]
    res.sort(key=lambda t: t[0])
    rows = [row for _, rs, _ in res if rs is not None for row in rs]
    failures = [f for _, _, f in res if f is not None]
    return rows, cfg.n_repetitions - len(failures), failures


# ---------------------------------------------------------------------- #
# Aggregation
# ---------------------------------------------------------------------- #


def calibration_summaries(rows: Sequence[dict]) -> list[CalibrationSummary]:
    out = []
    for model in ("dnn", "glm"):
        slopes = sorted({r["true_slope"] for r in rows if r["model"] == model})
        for b in slopes:
            sel = [r for r in rows if r["model"] == model and r["true_slope"] == b]
            est = np.array([r["estimate"] for r in sel])
            inf = [r for r in sel if not math.isnan(r["p_value"])]
            cov = float(np.mean([r["covered"] for r in inf])) if inf else math.nan
            rej = float(np.mean([r["rejected"] for r in inf])) if inf else math.nan
            out.append(CalibrationSummary(model, b, len(sel), float(est.mean()),
                                          float(est.mean() - b), cov, rej))
    return out


def effect_matrices(rows: Sequence[dict]) -> dict[str, EffectMatrix]:
    out = {}
    for model in ("dnn", "glm"):
        sel = [r for r in rows if r["model"] == model]
        cells = []
        keys = sorted({(r["row"], r["col"]) for r in sel})
        for key in keys:
            rs = [r for r in sel if (r["row"], r["col"]) == key]
            est = np.array([r["estimate"] for r in rs])
            truth = rs[0]["truth"]
            mean = float(est.mean())
            cells.append(EffectCell(key[0], key[1], truth, mean, mean - truth,
                                    float(np.mean((est - mean) ** 2)),
                                    float(np.mean((est - truth) ** 2))))
        n = len({r["rep"] for r in sel})
        out[model] = EffectMatrix(model, n, tuple(cells))
    return out


def _mean(rows, key) -> float:
    vals = [float(r[key]) for r in rows]
    return float(np.mean(vals)) if vals else math.nan


def _result_rows(k: int, summary) -> list[dict]:
    """Long-format aggregated metrics: scenario, model, metric, key, value."""
    out = []
    if k == 1:
        for c in summary:
            for m in ("mean_estimate", "bias", "coverage", "rejection_rate", "n_completed"):
                out.append(dict(scenario=1, model=c.model, metric=m, key=f"slope={c.true_slope!r}",
                                value=getattr(c, m)))
    elif k == 2:
        for model, vals in summary.items():
            for m, v in vals.items():
                out.append(dict(scenario=2, model=model, metric=m, key="", value=v))
    elif k == 3:
        for model, em in summary.items():
            for kind in (None, "main", "true_interaction", "null_interaction"):
                out.append(dict(scenario=3, model=model, metric="average_mse", key=kind or "overall",
                                value=em.average_mse(kind)))
            for c in em.cells:
                for m in ("truth", "mean_estimate", "bias", "variance", "mse"):
                    out.append(dict(scenario=3, model=model, metric=m, key=f"cell={c.row},{c.col}",
                                    value=getattr(c, m)))
    else:
        for m, v in summary.items():
            out.append(dict(scenario=k, model="dnn", metric=m, key="", value=v))
    return out


def _finish(cfg: ScenarioConfig, root, rows, n_done, failures, summary) -> ScenarioResult:
    res = ScenarioResult(cfg.scenario, cfg.n_repetitions, n_done, failures, summary, rows)
    if root is not None:
        base = Path(root) / f"scenario{cfg.scenario}"
        _write_rows(base / "results.csv", _result_rows(cfg.scenario, summary))
        _dump_json(base / "manifest.json", {
            "version": __version__, "config": cfg.to_dict(), "seed": cfg.seed,
            "n_requested": cfg.n_repetitions, "n_completed": n_done, "failures": failures,
        })
    return res


def run_scenario1(cfg: ScenarioConfig, root=None) -> ScenarioResult:
    """Slope calibration: GLM Wald inference vs DNN bootstrap ACE."""
    rows, n, fails = _run_all(cfg, root)
    return _finish(cfg, root, rows, n, fails, calibration_summaries(rows))


def run_scenario2(cfg: ScenarioConfig, root=None) -> ScenarioResult:
    """Curve recovery of a registered nonlinear truth by DNN-ALE and spline."""
    rows, n, fails = _run_all(cfg, root)
    summary = {}
    for model in ("dnn", "spline"):
        sel = [r for r in rows if r["model"] == model]
        summary[model] = {"mean_mse": _mean(sel, "mse"), "truth_variance": _mean(sel, "truth_variance")}
    return _finish(cfg, root, rows, n, fails, summary)


def run_scenario3(cfg: ScenarioConfig, root=None) -> ScenarioResult:
    """Main-effect and interaction matrix of DNN (ACE, cross-partials) and GLM."""
    rows, n, fails = _run_all(cfg, root)
    return _finish(cfg, root, rows, n, fails, effect_matrices(rows))


def run_scenario4(cfg: ScenarioConfig, root=None) -> ScenarioResult:
    """Individual embeddings of four groups with 20 predictors."""
    rows, n, fails = _run_all(cfg, root)
    summary = {"mean_ari": _mean(rows, "ari"), "mean_silhouette": _mean(rows, "silhouette"),
               "frac_null_arrows_shortest": _mean(rows, "null_arrows_shortest"),
               "frac_correlated_cosine_gt_0.7": float(np.mean([r["min_correlated_cosine"] > 0.7 for r in rows]))
               if rows else math.nan,
               "frac_ari_ge_0.9": float(np.mean([r["ari"] >= 0.9 for r in rows])) if rows else math.nan}
    return _finish(cfg, root, rows, n, fails, summary)


def run_scenario5(cfg: ScenarioConfig, root=None) -> ScenarioResult:
    """Opponent embeddings for attracting, neutral and repelling groups."""
    rows, n, fails = _run_all(cfg, root)
    summary = {"mean_ari": _mean(rows, "ari"), "mean_silhouette": _mean(rows, "silhouette"),
               "frac_centroid_order_ok": _mean(rows, "centroid_order_ok"),
               "frac_ari_ge_0.9": float(np.mean([r["ari"] >= 0.9 for r in rows])) if rows else math.nan}
    return _finish(cfg, root, rows, n, fails, summary)


RUNNERS = {1: run_scenario1, 2: run_scenario2, 3: run_scenario3, 4: run_scenario4, 5: run_scenario5}


def run_scenario(cfg: ScenarioConfig, root=None) -> ScenarioResult:
    return RUNNERS[cfg.scenario](cfg, root)


# ---------------------------------------------------------------------- #
# Summary
# ---------------------------------------------------------------------- #


class SchemaError(ValueError):
    pass


_RESULT_COLUMNS = ["scenario", "model", "metric", "key", "value"]


def summarize(root, out_csv=None) -> tuple[list[dict], str]:
    """Merge ``scenario*/results.csv`` under ``root`` into ``summary.csv``.

    Returns the merged rows and a human-readable table.  Effect-matrix
    cells are checked for ``mse == variance + bias**2`` to 1e-9.
    """
    root = Path(root)
    files = sorted(root.glob("scenario*/results.csv"))
    merged: list[dict] = []
    for f in files:
        with open(f, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != _RESULT_COLUMNS:
                raise SchemaError(f"{f}: expected columns {_RESULT_COLUMNS}, got {reader.fieldnames}")
            merged += list(reader)
    check_mse_identity(merged)
    target = Path(out_csv) if out_csv else root / "summary.csv"
    if merged:
        _write_rows(target, merged)
    else:
        logger.warning("no scenario results found under %s", root)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(",".join(_RESULT_COLUMNS) + "\n", encoding="utf-8")
    return merged, format_table(merged)


def check_mse_identity(rows: Sequence[dict], tol: float = 1e-9) -> float:
    """Largest |mse - (variance + bias^2)| over effect-matrix cells."""
    cells: dict[tuple, dict] = {}
    for r in rows:
        if r["metric"] in ("bias", "variance", "mse") and str(r["key"]).startswith("cell="):
            cells.setdefault((r["scenario"], r["model"], r["key"]), {})[r["metric"]] = float(r["value"])
    worst = 0.0
    for key, c in cells.items():
        if set(c) != {"bias", "variance", "mse"}:
            raise SchemaError(f"incomplete effect cell {key}")
        worst = max(worst, abs(c["mse"] - (c["variance"] + c["bias"] ** 2)))
    if worst > tol:
        raise ValueError(f"mse != variance + bias^2 (max residual {worst:.3g})")
    return worst


def format_table(rows: Sequence[dict]) -> str:
    shown = [r for r in rows if not str(r["key"]).startswith("cell=")]
    if not shown:
        return "(no results)"
    w = [max(len(str(r[c])) for r in shown + [dict(zip(_RESULT_COLUMNS, _RESULT_COLUMNS))])
         for c in _RESULT_COLUMNS]
    head = "  ".join(c.ljust(n) for c, n in zip(_RESULT_COLUMNS, w))
    lines = [head, "-" * len(head)]
    for r in shown:
        lines.append("  ".join(str(r[c]).ljust(n) for c, n in zip(_RESULT_COLUMNS, w)))
    return "\n".join(lines)


def write_bench_manifest(root, configs: Sequence[ScenarioConfig], results: Sequence[ScenarioResult],
                         seed: int) -> None:
    _dump_json(Path(root) / "manifest.json", {
        "version": __version__,
        "seed": seed,
        "scenarios": [
            {"config": c.to_dict(), "n_requested": r.n_requested, "n_completed": r.n_completed,
             "failures": r.failures}
            for c, r in zip(configs, results)
        ],
    })
