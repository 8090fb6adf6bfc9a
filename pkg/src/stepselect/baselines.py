"""Conditional-logit baselines: a Newton-Raphson GLM with Wald inference and
a penalized B-spline fit for one nonlinear predictor.

Both models score candidates linearly in their parameters, so the
conditional log-likelihood is concave and Newton's method converges from
zero in a handful of steps.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, stats
from scipy.interpolate import BSpline

from .core import StrataDataset, StrataIndex
from .simkit import make_rng

SEPARATION_LIMIT = 50.0


class ConvergenceError(RuntimeError):
    pass


class SeparationError(ConvergenceError):
    pass


class RankDeficientError(ValueError):
    def __init__(self, columns: Sequence[str], message: str | None = None):
        self.columns = list(columns)
        super().__init__(message or f"design matrix is rank deficient in columns {self.columns}")


# ---------------------------------------------------------------------- #
# Formula
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class FormulaSpec:
    """Main effects and pairwise products entering a linear score.

    Indices are 0-based covariate columns.
    """

    main_effects: tuple[int, ...]
    interactions: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "main_effects", tuple(int(i) for i in self.main_effects))
        pairs = tuple(tuple(sorted((int(p), int(q)))) for p, q in self.interactions)
        object.__setattr__(self, "interactions", pairs)
        if len(set(self.main_effects)) != len(self.main_effects):
            raise ValueError("duplicate main effect")
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate interaction")
        if any(p == q for p, q in pairs):
            raise ValueError("interaction of a feature with itself")
        if any(i < 0 for i in self.main_effects) or any(p < 0 for p, _ in pairs):
            raise ValueError("negative feature index")
        if not self.main_effects and not pairs:
            raise ValueError("formula has no terms")

    @classmethod
    def all_mains(cls, n_features: int) -> FormulaSpec:
        return cls(tuple(range(n_features)))

    @classmethod
    def all_pairs(cls, n_features: int) -> FormulaSpec:
        pairs = [(i, j) for i in range(n_features) for j in range(i + 1, n_features)]
        return cls(tuple(range(n_features)), tuple(pairs))

    @classmethod
    def parse(cls, text: str, feature_names: Sequence[str]) -> FormulaSpec:
        """Parse ``"x1 + x2 + x1:x2"``; ``a*b`` expands to ``a + b + a:b``."""
        names = list(feature_names)

        def idx(tok: str) -> int:
            tok = tok.strip()
            if tok not in names:
                raise ValueError(f"unknown feature {tok!r} in formula")
            return names.index(tok)

        mains, pairs = [], []
        terms = [t.strip() for t in re.split(r"\+", text) if t.strip()]
        if not terms:
            raise ValueError("empty formula")
        for t in terms:
            if "*" in t:
                a, b = (idx(s) for s in t.split("*"))
                for m in (a, b):
                    if m not in mains:
                        mains.append(m)
                pairs.append((a, b))
            elif ":" in t:
                a, b = (idx(s) for s in t.split(":"))
                pairs.append((a, b))
            elif idx(t) not in mains:
                mains.append(idx(t))
        return cls(tuple(mains), tuple(dict.fromkeys(tuple(sorted(p)) for p in pairs)))

    @property
    def n_terms(self) -> int:
        return len(self.main_effects) + len(self.interactions)

    def check(self, n_features: int) -> None:
        top = max([*self.main_effects, *(q for _, q in self.interactions)])
        if top >= n_features:
            raise ValueError(f"formula uses feature {top} but data has {n_features}")

    def design(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        cols = [X[..., i] for i in self.main_effects]
        cols += [X[..., p] * X[..., q] for p, q in self.interactions]
        return np.stack(cols, axis=-1)

    def term_names(self, feature_names: Sequence[str]) -> list[str]:
        out = [feature_names[i] for i in self.main_effects]
        out += [f"{feature_names[p]}:{feature_names[q]}" for p, q in self.interactions]
        return out

    def to_dict(self) -> dict:
        return {"main_effects": list(self.main_effects),
                "interactions": [list(p) for p in self.interactions]}

    @classmethod
    def from_dict(cls, d: dict) -> FormulaSpec:
        return cls(tuple(d["main_effects"]), tuple(tuple(p) for p in d.get("interactions", [])))


# ---------------------------------------------------------------------- #
# Shared Newton machinery
# ---------------------------------------------------------------------- #


def _stratum_terms(D: np.ndarray, valid: np.ndarray, case_col: np.ndarray, beta: np.ndarray):
    """Log-likelihood, gradient and negative Hessian of the conditional
    logit with padded design ``D`` of shape (S, k, P)."""
    s = np.where(valid, D @ beta, -np.inf)
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    tot = e.sum(axis=1, keepdims=True)
    p = e / tot
    r = np.arange(D.shape[0])
    loglik = float(np.sum(s[r, case_col] - m[:, 0] - np.log(tot[:, 0])))
    xbar = np.einsum("sk,skp->sp", p, D)
    grad = (D[r, case_col] - xbar).sum(axis=0)
    W = (D - xbar[:, None, :]) * np.sqrt(p)[..., None]
    W = W.reshape(-1, D.shape[2])
    H = W.T @ W
    return loglik, grad, H


def _padded_design(design: np.ndarray, idx: StrataIndex) -> np.ndarray:
    return np.where(idx.valid[..., None], design[idx.rows], 0.0)


def _newton(D, valid, case_col, penalty: np.ndarray | None = None, beta0=None,
            tol: float = 1e-8, max_iter: int = 50, decrement_tol: float | None = None):
    """Maximize loglik - beta' penalty beta.  Returns (beta, loglik, H, grad, iters, converged).

    Stops when max |grad| < ``tol`` or, if given, when the Newton decrement
    ``grad' H^-1 grad / 2`` drops below ``decrement_tol``.
    """
    P = D.shape[2]
    beta = np.zeros(P) if beta0 is None else np.array(beta0, dtype=float)
    pen = np.zeros((P, P)) if penalty is None else penalty

    def objective(b):
        ll, g, H = _stratum_terms(D, valid, case_col, b)
        return ll - b @ pen @ b, ll, g - 2 * pen @ b, H + 2 * pen

    obj, ll, g, H = objective(beta)
    for it in range(max_iter + 1):
        if np.max(np.abs(g), initial=0.0) < tol:
            if penalty is None and _diverging_ray(D, valid, case_col, beta, ll):
                raise SeparationError(
                    f"log-likelihood still rising along the fitted direction at iteration {it}; "
                    "the data are (quasi-)separated")
            return beta, ll, H, g, it, True
        if it == max_iter:
            break
        # Jacobi scaling keeps heavily penalized directions accurate
        sc = 1.0 / np.sqrt(np.maximum(np.diag(H), 1e-300))
        try:
            step = sc * linalg.solve(H * sc[:, None] * sc[None, :], g * sc, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(H, g)[0]
        if decrement_tol is not None and g @ step / 2 < decrement_tol:
            return beta, ll, H, g, it, True
        t = 1.0
        while True:
            cand = beta + t * step
            res = objective(cand)
            if res[0] >= obj - 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        beta = cand
        obj, ll, g, H = res
        if np.max(np.abs(beta)) > SEPARATION_LIMIT:
            raise SeparationError(
                f"coefficient magnitude exceeded {SEPARATION_LIMIT:g} at iteration {it + 1}; "
                "the data are (quasi-)separated")
    return beta, ll, H, g, max_iter, False


def _diverging_ray(D, valid, case_col, beta, ll) -> bool:
    # a finite maximizer loses likelihood when pushed twice as far out
    if np.max(np.abs(beta), initial=0.0) < 5.0:
        return False
    ll2 = _stratum_terms(D, valid, case_col, 2 * beta)[0]
    return ll2 >= ll - 1e-6


def _within_stratum_centered(D: np.ndarray, valid: np.ndarray) -> np.ndarray:
    n = valid.sum(axis=1, keepdims=True)
    mean = D.sum(axis=1) / n
    return (D - mean[:, None, :])[valid]


# ---------------------------------------------------------------------- #
# GLM
# ---------------------------------------------------------------------- #


@dataclass
class ClogitFit:
    """Conditional-logit maximum-likelihood fit.

    ``covariance`` is the inverse observed information.  Columns without
    any within-stratum variation carry no information; their coefficient is
    0 with infinite variance.
    """

    formula: FormulaSpec
    feature_names: tuple[str, ...]
    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    n_iterations: int
    loglik: float
    gradient_norm: float = 0.0
    kind: str = field(default="glm", init=False)

    @property
    def term_names(self) -> list[str]:
        return self.formula.term_names(self.feature_names)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def score(self, X: np.ndarray, ids=None) -> np.ndarray:
        return self.formula.design(X) @ self.coefficients

    def score_rows(self, d: StrataDataset, X: np.ndarray | None = None) -> np.ndarray:
        return self.score(d.X if X is None else X)

    def coefficient(self, term: str) -> float:
        return float(self.coefficients[self.term_names.index(term)])


def fit_clogit_glm(d: StrataDataset, f: FormulaSpec | None = None, tol: float = 1e-8,
                   max_iter: int = 50) -> ClogitFit:
    """Newton-Raphson maximum likelihood of the conditional logit from zero.

    Raises
    ------
    RankDeficientError
        Collinear design columns (after removing stratum means).
    SeparationError
        Some coefficient magnitude exceeded 50 during the iterations.
    """
    f = FormulaSpec.all_mains(d.n_features) if f is None else f
    f.check(d.n_features)
    idx = d.strata
    D = _padded_design(f.design(d.X), idx)
    names = f.term_names(d.feature_names)
    Xc = _within_stratum_centered(D, idx.valid)
    scale = np.maximum(np.abs(D[idx.valid]).max(axis=0), 1.0)
    no_info = np.abs(Xc).max(axis=0) <= 1e-12 * scale
    informative = np.flatnonzero(~no_info)
    if informative.size:
        _, R, piv = linalg.qr(Xc[:, informative], mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > diag[0] * 1e-10 * max(Xc.shape)))
        if rank < informative.size:
            bad = informative[np.sort(piv[rank:])]
            raise RankDeficientError([names[i] for i in bad])
    P = f.n_terms
    beta = np.zeros(P)
    cov = np.zeros((P, P))
    if informative.size:
        sub = D[:, :, informative]
        b, ll, H, g, iters, conv = _newton(sub, idx.valid, idx.case_col, tol=tol, max_iter=max_iter)
        beta[informative] = b
        cov[np.ix_(informative, informative)] = linalg.inv(H)
        cov = (cov + cov.T) / 2
        gnorm = float(np.max(np.abs(g)))
    else:
        ll = _stratum_terms(D, idx.valid, idx.case_col, beta)[0]
        iters, conv, gnorm = 0, True, 0.0
    cov[no_info, no_info] = np.inf
    return ClogitFit(f, tuple(d.feature_names), beta, cov, conv, iters, ll, gnorm)


@dataclass(frozen=True)
class WaldRow:
    term: str
    estimate: float
    se: float
    z: float
    p_value: float
    ci_low: float
    ci_high: float


def wald_inference(fit: ClogitFit) -> list[WaldRow]:
    """Per-coefficient Wald z-tests and 95% intervals."""
    if not fit.converged:
        raise ConvergenceError("Wald inference needs a converged fit")
    rows = []
    for name, est, var in zip(fit.term_names, fit.coefficients, np.diag(fit.covariance)):
        se = math.sqrt(max(var, 0.0))
        if se == 0 or math.isinf(se):
            z = 0.0 if est == 0 or math.isinf(se) else math.copysign(math.inf, est)
        else:
            z = est / se
        p = float(2 * stats.norm.sf(abs(z)))
        rows.append(WaldRow(name, float(est), se, z, p, est - 1.96 * se, est + 1.96 * se))
    return rows


# ---------------------------------------------------------------------- #
# Penalized spline
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class SplineSettings:
    n_interior_knots: int = 20
    degree: int = 3
    penalty_grid: tuple[float, ...] = tuple(10.0 ** k for k in range(-4, 4))
    n_folds: int = 5
    seed: int = 0
    one_se_rule: bool = True

    def __post_init__(self):
        object.__setattr__(self, "penalty_grid", tuple(float(x) for x in self.penalty_grid))
        if self.n_interior_knots < 1 or self.degree < 1:
            raise ValueError("need >= 1 interior knot and degree >= 1")
        if not self.penalty_grid or any(x < 0 for x in self.penalty_grid):
            raise ValueError("penalty grid must be non-empty and non-negative")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")


@dataclass
class SplineFit:
    """B-spline expansion of one covariate.

    ``coefficients`` are on the full basis and sum to zero (the constant is
    not identified by the conditional likelihood).
    """

    feature: int
    feature_names: tuple[str, ...]
    knots: np.ndarray
    basis_degree: int
    coefficients: np.ndarray
    penalty: float
    loglik: float
    cv_nll: dict[float, float] = field(default_factory=dict)
    converged: bool = True
    kind: str = field(default="spline", init=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def bounds(self) -> tuple[float, float]:
        k = self.basis_degree
        return float(self.knots[k]), float(self.knots[-k - 1])

    def _spline(self) -> BSpline:
        return BSpline(self.knots, self.coefficients, self.basis_degree, extrapolate=True)

    def score(self, X: np.ndarray, ids=None) -> np.ndarray:
        return self._spline()(np.asarray(X, dtype=float)[:, self.feature])

    def score_rows(self, d: StrataDataset, X: np.ndarray | None = None) -> np.ndarray:
        return self.score(d.X if X is None else X)


def _knot_vector(x: np.ndarray, n_interior: int, degree: int) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    inner = np.quantile(x, np.linspace(0, 1, n_interior + 2)[1:-1])
    return np.concatenate([np.full(degree + 1, lo), inner, np.full(degree + 1, hi)])


def _basis(x: np.ndarray, t: np.ndarray, degree: int) -> np.ndarray:
    x = np.clip(x, t[degree], t[-degree - 1])
    return BSpline.design_matrix(x, t, degree).toarray()


def greville(t: np.ndarray, degree: int) -> np.ndarray:
    n = len(t) - degree - 1
    return np.array([t[j + 1:j + degree + 1].mean() for j in range(n)])


def second_divided_difference(t: np.ndarray, degree: int) -> np.ndarray:
    """Operator whose null space is the coefficient vectors of affine curves."""
    g = greville(t, degree)
    n = len(g)
    D = np.zeros((n - 2, n))
    for j in range(n - 2):
        h1, h2 = g[j + 1] - g[j], g[j + 2] - g[j + 1]
        w = 2.0 / (h1 + h2)
        D[j, j] = w / h1
        D[j, j + 1] = -w * (1 / h1 + 1 / h2)
        D[j, j + 2] = w / h2
    return D


def _sum_to_zero_basis(n: int) -> np.ndarray:
    q, _ = np.linalg.qr(np.ones((n, 1)), mode="complete")
    return q[:, 1:]


class _SplineProblem:
    def __init__(self, d: StrataDataset, feature: int, settings: SplineSettings):
        x = d.X[:, feature]
        s = settings
        if len(np.unique(x)) < s.n_interior_knots + 2:
            raise ValueError(f"feature has {len(np.unique(x))} distinct values; "
                             f"need at least {s.n_interior_knots + 2} for {s.n_interior_knots} knots")
        self.t = _knot_vector(x, s.n_interior_knots, s.degree)
        self.degree = s.degree
        B = _basis(x, self.t, s.degree)
        self.Z = _sum_to_zero_basis(B.shape[1])
        self.idx = d.strata
        Dd = second_divided_difference(self.t, s.degree) @ self.Z
        # rotate to the penalty eigenbasis so the penalty is diagonal
        ev, self.U = np.linalg.eigh(Dd.T @ Dd)
        ev[ev < 1e-10 * ev.max()] = 0.0
        self.D = _padded_design(B @ self.Z @ self.U, self.idx)
        # penalty weight 1 balances the roughness term against the information at zero
        H0 = _stratum_terms(self.D, self.idx.valid, self.idx.case_col, np.zeros(len(ev)))[2]
        self.S = np.diag(ev * (np.trace(H0) / ev.sum()))

    def fit(self, lam: float, strata: np.ndarray | None = None, beta0=None):
        sel = slice(None) if strata is None else strata
        return _newton(self.D[sel], self.idx.valid[sel], self.idx.case_col[sel],
                       penalty=lam * self.S, beta0=beta0, tol=1e-8, max_iter=100,
                       decrement_tol=1e-12)

    def stratum_nll(self, alpha, strata):
        sc = np.where(self.idx.valid[strata], self.D[strata] @ alpha, -np.inf)
        m = sc.max(axis=1)
        lse = m + np.log(np.exp(sc - m[:, None]).sum(axis=1))
        return lse - sc[np.arange(len(strata)), self.idx.case_col[strata]]


def _one_se_choice(held: dict[float, np.ndarray]) -> float:
    """Largest penalty whose held-out NLL exceeds the best by less than one
    standard error of the paired per-stratum difference."""
    best = min(held, key=lambda k: (held[k].mean(), -k))
    ok = []
    for lam, per in held.items():
        diff = per - held[best]
        se = diff.std(ddof=1) / math.sqrt(len(diff)) if len(diff) > 1 else 0.0
        if diff.mean() <= se:
            ok.append(lam)
    return max(ok)


def fit_clogit_spline(d: StrataDataset, feature: int | str = 0,
                      spec: SplineSettings | None = None) -> SplineFit:
    """Penalized B-spline conditional logit for one feature.

    The penalty weight is chosen from ``spec.penalty_grid`` by stratum-level
    K-fold cross-validated conditional NLL, then the model is refitted on all
    strata.  With ``one_se_rule`` the largest penalty within one paired
    standard error of the best held-out NLL is taken.  The roughness penalty
    uses second divided differences of the coefficients at the Greville
    abscissae, so an infinite weight leaves an affine curve.
    """
    spec = SplineSettings() if spec is None else spec
    j = d.feature_index(feature)
    prob = _SplineProblem(d, j, spec)
    S = prob.idx.n_strata
    cv: dict[float, float] = {}
    if len(spec.penalty_grid) == 1:
        lam = spec.penalty_grid[0]
    else:
        folds = make_rng(spec.seed, 0x4356).permutation(S) % spec.n_folds
        held = {}
        for lam in spec.penalty_grid:
            per = np.empty(S)
            for k in range(spec.n_folds):
                train_s = np.flatnonzero(folds != k)
                test_s = np.flatnonzero(folds == k)
                per[test_s] = prob.stratum_nll(prob.fit(lam, train_s)[0], test_s)
            held[lam] = per
            cv[lam] = float(per.mean())
        lam = _one_se_choice(held) if spec.one_se_rule else min(cv, key=lambda k: (cv[k], -k))
    alpha, ll, _, _, _, conv = prob.fit(lam)
    return SplineFit(j, tuple(d.feature_names), prob.t, spec.degree, prob.Z @ prob.U @ alpha,
                     lam, ll, cv, conv)


def spline_curve(fit: SplineFit, grid: Sequence[float] | np.ndarray) -> np.ndarray:
    """Fitted curve on ``grid``, shifted to mean zero over the grid."""
    g = np.asarray(grid, dtype=float)
    lo, hi = fit.bounds
    if g.size and (g.min() < lo - 1e-12 or g.max() > hi + 1e-12):
        raise ValueError(f"grid extends beyond the knot range [{lo}, {hi}]")
    y = BSpline(fit.knots, fit.coefficients, fit.basis_degree, extrapolate=False)(np.clip(g, lo, hi))
    return y - y.mean()


# ---------------------------------------------------------------------- #
# Serialization
# ---------------------------------------------------------------------- #


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=float).ravel()]


def model_to_dict(fit: ClogitFit | SplineFit) -> dict:
    if isinstance(fit, ClogitFit):
        return {
            "kind": "glm",
            "format_version": 1,
            "feature_names": list(fit.feature_names),
            "formula": fit.formula.to_dict(),
            "coefficients": _floats(fit.coefficients),
            "covariance": [_floats(r) for r in fit.covariance],
            "converged": fit.converged,
            "n_iterations": fit.n_iterations,
            "loglik": float(fit.loglik),
        }
    return {
        "kind": "spline",
        "format_version": 1,
        "feature_names": list(fit.feature_names),
        "feature": fit.feature,
        "knots": _floats(fit.knots),
        "basis_degree": fit.basis_degree,
        "coefficients": _floats(fit.coefficients),
        "penalty": fit.penalty,
        "loglik": float(fit.loglik),
        "cv_nll": [[k, v] for k, v in fit.cv_nll.items()],
        "converged": fit.converged,
    }


def model_from_dict(doc: dict) -> ClogitFit | SplineFit:
    kind = doc.get("kind")
    if kind == "glm":
        return ClogitFit(FormulaSpec.from_dict(doc["formula"]), tuple(doc["feature_names"]),
                         np.asarray(doc["coefficients"], dtype=float),
                         np.asarray(doc["covariance"], dtype=float),
                         bool(doc["converged"]), int(doc["n_iterations"]), float(doc["loglik"]))
    if kind == "spline":
        return SplineFit(int(doc["feature"]), tuple(doc["feature_names"]),
                         np.asarray(doc["knots"], dtype=float), int(doc["basis_degree"]),
                         np.asarray(doc["coefficients"], dtype=float), float(doc["penalty"]),
                         float(doc["loglik"]), {float(k): float(v) for k, v in doc.get("cv_nll", [])},
                         bool(doc.get("converged", True)))
    raise ValueError(f"not a baseline model document (kind={kind!r})")


def save_model(fit: ClogitFit | SplineFit, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model_to_dict(fit), fh)
        fh.write("\n")


# ---------------------------------------------------------------------- #
# Fitters (dataset -> model callables used by bootstrap refits)
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class GlmFitter:
    formula: FormulaSpec | None = None

    def __call__(self, d: StrataDataset) -> ClogitFit:
        fit = fit_clogit_glm(d, self.formula)
        if not fit.converged:
            raise ConvergenceError("Newton iterations did not converge")
        return fit


@dataclass(frozen=True)
class SplineFitter:
    feature: int = 0
    settings: SplineSettings = field(default_factory=SplineSettings)

    def __call__(self, d: StrataDataset) -> SplineFit:
        return fit_clogit_spline(d, self.feature, self.settings)
