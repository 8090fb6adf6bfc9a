"""Model-agnostic explanations of fitted step-selection models.

Every function here only needs ``model.score_rows(d, X)``: the score of each
candidate row of ``d`` with covariates ``X`` (all other inputs, such as
embedding ids, taken from ``d``).  Inputs are never modified.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import stats

from .core import StrataDataset, mean_conditional_nll
from .simkit import make_rng

logger = logging.getLogger(__name__)

RETRYABLE = (ArithmeticError, RuntimeError, np.linalg.LinAlgError, ValueError)


class ScoringModel(Protocol):
    def score_rows(self, d: StrataDataset, X: np.ndarray | None = None) -> np.ndarray: ...


# ---------------------------------------------------------------------- #
# Result types
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class EffectReport:
    """Average conditional effect with bootstrap uncertainty.

    ``degenerate`` marks a zero bootstrap SE, for which the p-value is
    reported as 1.
    """

    feature: str
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    n_bootstrap: int
    n_failed: int = 0
    degenerate: bool = False

    @classmethod
    def from_replicates(cls, feature: str, estimate: float, replicates: Sequence[float],
                        n_failed: int = 0) -> EffectReport:
        reps = np.asarray(replicates, dtype=float)
        se = float(reps.std(ddof=1)) if reps.size >= 2 else math.nan
        degenerate = se == 0.0
        if degenerate:
            p = 1.0
        elif math.isnan(se):
            p = math.nan
        else:
            p = float(2 * stats.norm.sf(abs(estimate) / se))
        return cls(feature, float(estimate), se, estimate - 1.96 * se, estimate + 1.96 * se,
                   p, int(reps.size), n_failed, degenerate)


@dataclass
class ImportanceTable:
    """Signed permutation importances; the ``clamped_*`` views floor them at 0."""

    singles: dict[str, float] = field(default_factory=dict)
    pairs: dict[tuple[str, str], float] = field(default_factory=dict)

    def clamped_singles(self) -> dict[str, float]:
        return {k: max(v, 0.0) for k, v in self.singles.items()}

    def clamped_pairs(self) -> dict[tuple[str, str], float]:
        return {k: max(v, 0.0) for k, v in self.pairs.items()}

    def pair(self, a: str, b: str) -> float:
        return self.pairs[(a, b)] if (a, b) in self.pairs else self.pairs[(b, a)]

    def ranked_pairs(self) -> list[tuple[str, str]]:
        return sorted(self.pairs, key=lambda k: -self.pairs[k])


@dataclass(frozen=True)
class AleCurve:
    feature: str
    bin_edges: np.ndarray
    centered_effect: np.ndarray
    counts: np.ndarray

    @property
    def bin_mids(self) -> np.ndarray:
        return (self.bin_edges[:-1] + self.bin_edges[1:]) / 2


@dataclass(frozen=True)
class BiplotResult:
    ids: np.ndarray
    positions: np.ndarray
    features: tuple[str, ...]
    arrows: np.ndarray
    per_id_effects: np.ndarray
    group_labels: np.ndarray | None = None
    rank_deficient: bool = False

    def position(self, id: int) -> np.ndarray:
        return self.positions[int(np.flatnonzero(self.ids == id)[0])]

    def arrow(self, feature: str) -> np.ndarray:
        return self.arrows[self.features.index(feature)]

    def arrow_norms(self) -> dict[str, float]:
        return {f: float(np.linalg.norm(a)) for f, a in zip(self.features, self.arrows)}


# ---------------------------------------------------------------------- #
# Conditional effects
# ---------------------------------------------------------------------- #


def default_epsilon(d: StrataDataset, feature: int) -> float:
    return 0.1 * float(np.std(d.X[:, feature]))


def _epsilon(d: StrataDataset, j: int, epsilon: float | None) -> float:
    sd = float(np.std(d.X[:, j]))
    if sd == 0:
        raise ValueError(f"feature {d.feature_names[j]!r} is constant")
    eps = 0.1 * sd if epsilon is None else float(epsilon)
    if not 0 < eps <= 0.5 * sd * (1 + 1e-12):
        raise ValueError(f"epsilon must lie in (0, {0.5 * sd:.6g}] (half the feature SD)")
    return eps


def _shifted(X: np.ndarray, j: int, delta: float) -> np.ndarray:
    Y = np.array(X, dtype=float)
    Y[:, j] += delta
    return Y


def average_conditional_effect(model: ScoringModel, d: StrataDataset, feature: int | str,
                               epsilon: float | None = None) -> float:
    """Mean central-difference derivative of the score in one covariate.

    ``epsilon`` defaults to 0.1 times the feature's standard deviation.
    """
    j = d.feature_index(feature)
    eps = _epsilon(d, j, epsilon)
    up = model.score_rows(d, _shifted(d.X, j, eps))
    down = model.score_rows(d, _shifted(d.X, j, -eps))
    return float(np.mean((up - down) / (2 * eps)))


def average_cross_partial(model: ScoringModel, d: StrataDataset, i: int | str, j: int | str,
                          eps_i: float | None = None, eps_j: float | None = None) -> float:
    """Mean four-point estimate of the mixed second derivative of the score."""
    i, j = d.feature_index(i), d.feature_index(j)
    if i == j:
        raise ValueError("cross-partial needs two distinct features")
    ei, ej = _epsilon(d, i, eps_i), _epsilon(d, j, eps_j)
    f = {}
    for si in (1, -1):
        for sj in (1, -1):
            Y = _shifted(_shifted(d.X, i, si * ei), j, sj * ej)
            f[si, sj] = model.score_rows(d, Y)
    return float(np.mean((f[1, 1] - f[1, -1] - f[-1, 1] + f[-1, -1]) / (4 * ei * ej)))


def _replicate(fitter, d: StrataDataset, features, eps, seed: int, b: int, max_retries: int):
    S = d.n_strata
    ids = d.strata.ids
    for attempt in range(max_retries + 1):
        rng = make_rng(seed, b, attempt)
        sample = d.take_strata(ids[rng.integers(0, S, size=S)])
        try:
            model = fitter(sample)
            return [average_conditional_effect(model, sample, j, e) for j, e in zip(features, eps)]
        except RETRYABLE as exc:
            logger.debug("bootstrap replicate %d attempt %d failed: %s", b, attempt, exc)
    return None


def bootstrap_inference(fitter: Callable[[StrataDataset], ScoringModel], d: StrataDataset,
                        features: Sequence[int | str] | None = None, B: int = 20, seed: int = 0,
                        epsilon: float | None = None, max_retries: int = 3,
                        n_jobs: int = 1, model: ScoringModel | None = None) -> list[EffectReport]:
    """Stratum bootstrap of average conditional effects.

    The point estimate is the effect of ``fitter(d)`` (or ``model`` when
    given) on the full data; the SE is the standard deviation of the
    replicate effects.  A failing replicate is redrawn up to ``max_retries``
    times, then excluded and counted in ``n_failed``.  Replicate ``b`` uses
    the random stream ``(seed, b, attempt)``, so results do not depend on
    ``n_jobs``.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    feats = list(range(d.n_features)) if features is None else [d.feature_index(f) for f in features]
    eps = [_epsilon(d, j, epsilon) for j in feats]
    full = fitter(d) if model is None else model
    est = [average_conditional_effect(full, d, j, e) for j, e in zip(feats, eps)]
    args = [(fitter, d, feats, eps, seed, b, max_retries) for b in range(B)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replicate, *zip(*args)))
    else:
        results = [_replicate(*a) for a in args]
    ok = np.array([r for r in results if r is not None], dtype=float).reshape(-1, len(feats))
    n_failed = sum(r is None for r in results)
    if n_failed:
        logger.warning("%d of %d bootstrap replicates failed and were excluded", n_failed, B)
    return [EffectReport.from_replicates(d.feature_names[j], est[k], ok[:, k], n_failed)
            for k, j in enumerate(feats)]


# ---------------------------------------------------------------------- #
# Permutation importance
# ---------------------------------------------------------------------- #


def _nll(model, d, X) -> float:
    return mean_conditional_nll(model.score_rows(d, X), d.strata)


def _permutations(n: int, n_permutations: int, seed: int) -> list[np.ndarray]:
    return [make_rng(seed, 0x5045, r).permutation(n) for r in range(n_permutations)]


def permutation_importance(model: ScoringModel, d: StrataDataset, feature: int | str,
                           n_permutations: int = 10, seed: int = 0) -> float:
    """Mean rise in conditional NLL when the column is shuffled across all
    records.  Signed; negative values mean the feature does not help."""
    j = d.feature_index(feature)
    base = _nll(model, d, d.X)
    tot = 0.0
    for perm in _permutations(d.n_records, n_permutations, seed):
        X = np.array(d.X)
        X[:, j] = d.X[perm, j]
        tot += _nll(model, d, X)
    return tot / n_permutations - base


def interaction_importance(model: ScoringModel, d: StrataDataset, pair: tuple[int | str, int | str],
                           n_permutations: int = 10, seed: int = 0) -> float:
    """Mean rise in conditional NLL when the pair's joint (non-additive)
    score component is scrambled.

    For one row permutation let ``s_i``, ``s_j`` and ``s_ij`` be the scores
    with column i, column j and both columns shuffled.  The reconstruction
    ``s_i + s_j - s_ij`` equals the unshuffled scores exactly for a model
    additive in the pair, so the value is 0 without interaction and
    symmetric in the pair.
    """
    i, j = (d.feature_index(f) for f in pair)
    if i == j:
        raise ValueError("interaction importance needs two distinct features")
    base = _nll(model, d, d.X)
    tot = 0.0
    for perm in _permutations(d.n_records, n_permutations, seed):
        Xi = np.array(d.X)
        Xi[:, i] = d.X[perm, i]
        Xj = np.array(d.X)
        Xj[:, j] = d.X[perm, j]
        Xij = np.array(Xi)
        Xij[:, j] = d.X[perm, j]
        s = model.score_rows(d, Xi) + model.score_rows(d, Xj) - model.score_rows(d, Xij)
        tot += mean_conditional_nll(s, d.strata)
    return tot / n_permutations - base


def importance_table(model: ScoringModel, d: StrataDataset, features: Sequence[int | str] | None = None,
                     pairs: bool = True, n_permutations: int = 10, seed: int = 0) -> ImportanceTable:
    feats = list(range(d.n_features)) if features is None else [d.feature_index(f) for f in features]
    names = d.feature_names
    table = ImportanceTable()
    for j in feats:
        table.singles[names[j]] = permutation_importance(model, d, j, n_permutations, seed)
    if pairs:
        for a in range(len(feats)):
            for b in range(a + 1, len(feats)):
                i, j = feats[a], feats[b]
                table.pairs[(names[i], names[j])] = interaction_importance(
                    model, d, (i, j), n_permutations, seed)
    return table


# ---------------------------------------------------------------------- #
# Accumulated local effects
# ---------------------------------------------------------------------- #


def ale_curve(model: ScoringModel, d: StrataDataset, feature: int | str, n_bins: int = 20) -> AleCurve:
    """First-order ALE over quantile bins.

    Each bin's local effect is the mean score difference of its records moved
    to the upper and lower bin edge; effects are accumulated over edges, each
    bin reports the mean of its two edge values, and the curve is shifted to
    a count-weighted mean of zero.
    """
    j = d.feature_index(feature)
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    x = d.X[:, j]
    n_distinct = len(np.unique(x))
    if n_distinct < 2:
        raise ValueError(f"feature {d.feature_names[j]!r} is constant")
    if n_distinct < n_bins:
        raise ValueError(f"feature has {n_distinct} distinct values, fewer than {n_bins} bins")
    edges = np.quantile(x, np.linspace(0, 1, n_bins + 1))
    if np.any(np.diff(edges) <= 0):
        raise ValueError("quantile bin edges coincide (heavy ties); use fewer bins")
    k = np.clip(np.searchsorted(edges, x, side="left") - 1, 0, n_bins - 1)
    lo, hi = np.array(d.X), np.array(d.X)
    lo[:, j] = edges[k]
    hi[:, j] = edges[k + 1]
    diff = model.score_rows(d, hi) - model.score_rows(d, lo)
    counts = np.bincount(k, minlength=n_bins)
    local = np.bincount(k, weights=diff, minlength=n_bins) / np.maximum(counts, 1)
    acc = np.concatenate([[0.0], np.cumsum(local)])
    per_bin = (acc[:-1] + acc[1:]) / 2
    per_bin -= np.sum(per_bin * counts) / counts.sum()
    return AleCurve(d.feature_names[j], edges, per_bin, counts)


# ---------------------------------------------------------------------- #
# Embedding bi-plot
# ---------------------------------------------------------------------- #


def embedding_biplot(model, d: StrataDataset, features: Sequence[int | str] | None = None,
                     epsilon: float | None = None,
                     group_labels: dict[int, int] | Sequence[int] | None = None) -> BiplotResult:
    """Back-project per-id effects onto the embedding space.

    For each id present in ``d`` the average conditional effect of every
    feature is computed on that id's own records; the arrows are the slopes
    of a least-squares regression of these effects on the id's embedding
    coordinates (with intercept).
    """
    emb = getattr(getattr(model, "arch", None), "embedding", None)
    if emb is None:
        raise ValueError("model has no embedding layer")
    id_col = d.ids_for(emb.target)
    if id_col is None:
        raise ValueError(f"dataset has no {emb.target} ids")
    ids = np.unique(id_col)
    if len(ids) < 3:
        raise ValueError("bi-plot needs at least 3 distinct ids")
    feats = list(range(d.n_features)) if features is None else [d.feature_index(f) for f in features]
    eps = [_epsilon(d, j, epsilon) for j in feats]
    positions = np.array([model.embedding_table[i] for i in ids])
    effects = np.empty((len(ids), len(feats)))
    for r, i in enumerate(ids):
        sub = d.take_rows(np.flatnonzero(id_col == i))
        for c, (j, e) in enumerate(zip(feats, eps)):
            up = model.score_rows(sub, _shifted(sub.X, j, e))
            down = model.score_rows(sub, _shifted(sub.X, j, -e))
            effects[r, c] = np.mean((up - down) / (2 * e))
    A = np.column_stack([np.ones(len(ids)), positions])
    coef, _, rank, _ = np.linalg.lstsq(A, effects, rcond=None)
    deficient = rank < A.shape[1]
    if deficient:
        logger.warning("embedding positions are collinear; bi-plot arrows are not identified")
    labels = None
    if group_labels is not None:
        lookup = group_labels if isinstance(group_labels, dict) else dict(enumerate(group_labels))
        labels = np.array([lookup[int(i)] for i in ids])
    return BiplotResult(ids, positions, tuple(d.feature_names[j] for j in feats), coef[1:].T,
                        effects, labels, bool(deficient))


# ---------------------------------------------------------------------- #
# CSV output
# ---------------------------------------------------------------------- #


def _f(v) -> str:
    return repr(float(v))


def _write(path, header, rows) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_effects_csv(reports: Sequence[EffectReport], path) -> None:
    _write(path, ["feature", "estimate", "se", "ci_low", "ci_high", "p_value",
                  "n_bootstrap", "n_failed", "degenerate"],
           [[r.feature, _f(r.estimate), _f(r.se), _f(r.ci_low), _f(r.ci_high), _f(r.p_value),
             r.n_bootstrap, r.n_failed, int(r.degenerate)] for r in reports])


def write_importance_csv(table: ImportanceTable, path) -> None:
    _write(path, ["feature", "importance", "raw"],
           [[k, _f(max(v, 0.0)), _f(v)] for k, v in table.singles.items()])


def write_interactions_csv(table: ImportanceTable, path) -> None:
    _write(path, ["feature_a", "feature_b", "importance", "raw"],
           [[a, b, _f(max(v, 0.0)), _f(v)] for (a, b), v in table.pairs.items()])


def write_ale_csv(curve: AleCurve, path) -> None:
    e = curve.bin_edges
    _write(path, ["bin_low", "bin_high", "bin_mid", "count", "effect"],
           [[_f(e[k]), _f(e[k + 1]), _f(m), int(c), _f(v)]
            for k, (m, c, v) in enumerate(zip(curve.bin_mids, curve.counts, curve.centered_effect))])


def write_biplot_csv(result: BiplotResult, positions_path, arrows_path) -> None:
    dims = result.positions.shape[1]
    _write(positions_path, ["id", *[f"dim{k + 1}" for k in range(dims)], "group"],
           [[int(i), *[_f(v) for v in p], "" if result.group_labels is None else int(g)]
            for i, p, g in zip(result.ids, result.positions,
                               result.group_labels if result.group_labels is not None
                               else [None] * len(result.ids))])
    axes = ["u", "v", "w"][:dims] if dims <= 3 else [f"a{k + 1}" for k in range(dims)]
    _write(arrows_path, ["feature", *axes],
           [[f, *[_f(v) for v in a]] for f, a in zip(result.features, result.arrows)])
