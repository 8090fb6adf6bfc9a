"""Synthetic step-selection data.

Candidate covariates are drawn from U(0, 1), centered on the pooled sample,
scored with a log-linear selection function (main effects, pairwise
interactions, optional named nonlinear transforms) and the case is drawn from
the normalized weights.  A small agent simulation covers the social scenario
where the only covariate is the distance to the nearest other individual.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .core import StrataDataset, center_covariates

# ---------------------------------------------------------------------- #
# Random streams
# ---------------------------------------------------------------------- #


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *keys)``.

    Streams with different keys are independent, so repetitions can be run in
    any order or in parallel and still reproduce bit for bit.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------- #
# Registered univariate transforms (nonlinear truths)
# ---------------------------------------------------------------------- #


def _hump(x):
    return 2.0 * np.exp(-((x / 0.35) ** 2))


def _wiggle(x):
    return np.sin(6.0 * x) + 0.5 * x


TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda x: np.asarray(x, dtype=float),
    "hump": _hump,
    "wiggle": _wiggle,
    "zero": lambda x: np.zeros_like(np.asarray(x, dtype=float)),
}


def transform(name: str) -> Callable[[np.ndarray], np.ndarray]:
    try:
        return TRANSFORMS[name]
    except KeyError:
        raise ValueError(f"unknown transform {name!r}; known: {sorted(TRANSFORMS)}") from None


# ---------------------------------------------------------------------- #
# Specs
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class SelectionSpec:
    """Ground truth of the log-linear selection model.

    ``interactions`` holds ``(p, q, gamma)`` triples with 0-based feature
    indices.  ``nonlinear_transforms`` maps a feature to a registered
    transform applied before weighting.  With ``group_betas`` individual ``i``
    belongs to group ``i // individuals_per_group`` and strata are assigned to
    individuals round-robin.
    """

    n_features: int
    betas: tuple[float, ...]
    interactions: tuple[tuple[int, int, float], ...] = ()
    nonlinear_transforms: tuple[tuple[int, str], ...] = ()
    group_betas: dict[int, tuple[float, ...]] | None = None
    individuals_per_group: int = 5
    n_controls: int = 9
    n_strata: int = 2000

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "betas", tuple(float(b) for b in self.betas))
        set_(self, "interactions", tuple((int(p), int(q), float(g)) for p, q, g in self.interactions))
        set_(self, "nonlinear_transforms", tuple((int(j), str(n)) for j, n in self.nonlinear_transforms))
        if self.group_betas is not None:
            set_(self, "group_betas", {int(g): tuple(float(b) for b in v)
                                       for g, v in self.group_betas.items()})
        self.validate()

    def validate(self) -> None:
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if len(self.betas) != self.n_features:
            raise ValueError(f"betas has length {len(self.betas)}, expected {self.n_features}")
        for p, q, _ in self.interactions:
            if p == q or not (0 <= p < self.n_features and 0 <= q < self.n_features):
                raise ValueError(f"invalid interaction pair ({p}, {q})")
        for j, name in self.nonlinear_transforms:
            if not 0 <= j < self.n_features:
                raise ValueError(f"transform on unknown feature {j}")
            transform(name)
        if self.group_betas is not None:
            if sorted(self.group_betas) != list(range(len(self.group_betas))):
                raise ValueError("group ids must be 0..n_groups-1")
            for g, b in self.group_betas.items():
                if len(b) != self.n_features:
                    raise ValueError(f"group {g} betas have length {len(b)}")
            if self.individuals_per_group < 1:
                raise ValueError("individuals_per_group must be >= 1")
        if self.n_controls < 1:
            raise ValueError("n_controls must be >= 1")
        if self.n_strata < 1:
            raise ValueError("n_strata must be >= 1")

    @property
    def n_groups(self) -> int:
        return 0 if self.group_betas is None else len(self.group_betas)

    @property
    def n_individuals(self) -> int:
        return self.n_groups * self.individuals_per_group

    def group_of(self, individual: np.ndarray | int):
        return np.asarray(individual) // self.individuals_per_group

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.group_betas is not None:
            d["group_betas"] = {str(k): list(v) for k, v in self.group_betas.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SelectionSpec:
        d = dict(d)
        if d.get("group_betas") is not None:
            d["group_betas"] = {int(k): tuple(v) for k, v in d["group_betas"].items()}
        return cls(**d)


@dataclass(frozen=True)
class MovementKernel:
    gamma_shape: float = 2.0
    gamma_rate: float = 1.0
    vm_mu: float = 0.0
    vm_kappa: float = 0.5

    def __post_init__(self):
        if not (self.gamma_shape > 0 and self.gamma_rate > 0):
            raise ValueError("gamma shape and rate must be > 0")
        if not (-math.pi < self.vm_mu <= math.pi):
            raise ValueError("von Mises mu must lie in (-pi, pi]")
        if not self.vm_kappa >= 0:
            raise ValueError("von Mises kappa must be >= 0")

    @property
    def mean_step(self) -> float:
        return self.gamma_shape / self.gamma_rate


@dataclass(frozen=True)
class SocialSpec:
    """Groups of individuals moving in an open arena.

    ``group_distance_effect[g]`` is the selection coefficient on distance to
    the opponent when the opponent belongs to group ``g`` (attract < 0,
    neutral = 0, repel > 0).
    """

    n_groups: int = 3
    individuals_per_group: int = 5
    group_distance_effect: tuple[float, ...] = (0.0, -2.0, 2.0)
    arena: tuple[float, float, float, float] = (0.0, 0.0, 40.0, 40.0)
    kernel: MovementKernel = field(default_factory=MovementKernel)
    n_steps: int = 200
    n_controls: int = 9

    def __post_init__(self):
        object.__setattr__(self, "group_distance_effect",
                           tuple(float(b) for b in self.group_distance_effect))
        object.__setattr__(self, "arena", tuple(float(a) for a in self.arena))
        if len(self.group_distance_effect) != self.n_groups:
            raise ValueError("group_distance_effect needs one value per group")
        x0, y0, x1, y1 = self.arena
        if not (x1 > x0 and y1 > y0):
            raise ValueError("arena must have positive width and height")
        if self.n_groups < 1 or self.individuals_per_group < 1:
            raise ValueError("need at least one group and one individual per group")
        if self.n_groups * self.individuals_per_group < 2:
            raise ValueError("need at least two individuals")
        if self.n_steps < 1 or self.n_controls < 1:
            raise ValueError("n_steps and n_controls must be >= 1")

    @property
    def n_individuals(self) -> int:
        return self.n_groups * self.individuals_per_group

    def group_of(self, individual):
        return np.asarray(individual) // self.individuals_per_group

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SocialSpec:
        d = dict(d)
        if isinstance(d.get("kernel"), dict):
            d["kernel"] = MovementKernel(**d["kernel"])
        return cls(**d)


# ---------------------------------------------------------------------- #
# Selection model
# ---------------------------------------------------------------------- #


def selection_scores(spec: SelectionSpec, X: np.ndarray,
                     betas: Sequence[float] | np.ndarray | None = None) -> np.ndarray:
    """Linear predictor of the selection function for candidate rows ``X``.

    ``betas`` may be a vector or a per-row matrix (grouped truths).
    """
    X = np.asarray(X, dtype=float)
    Z = X.copy()
    for j, name in spec.nonlinear_transforms:
        Z[..., j] = transform(name)(X[..., j])
    b = np.asarray(spec.betas if betas is None else betas, dtype=float)
    s = np.sum(Z * b, axis=-1)
    for p, q, g in spec.interactions:
        s = s + g * X[..., p] * X[..., q]
    return s


def softmax_probabilities(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite selection score")
    w = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


def selection_probabilities(spec: SelectionSpec, covariate_matrix: np.ndarray,
                            betas: Sequence[float] | None = None) -> np.ndarray:
    """Normalized selection weights of one stratum's candidates.

    ``covariate_matrix`` has one row per candidate (centered covariates).
    Weights are exponentiated after subtracting the maximum score.
    """
    X = np.asarray(covariate_matrix, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.n_features:
        raise ValueError(f"expected a (candidates, {spec.n_features}) matrix, got {X.shape}")
    return softmax_probabilities(selection_scores(spec, X, betas))


def draw_case(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF multinomial draw per row; ties go to the first index."""
    cdf = np.cumsum(p, axis=-1)
    idx = (cdf < u[..., None] * cdf[..., -1:]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def simulate_selection(spec: SelectionSpec, rng_seed: int) -> StrataDataset:
    """Generate ``n_strata`` strata of ``n_controls + 1`` candidates each.

    The returned dataset is centered (pooled column means removed) and the
    case in every stratum is drawn from the selection probabilities computed
    on the centered covariates.
    """
    spec.validate()
    rng = make_rng(rng_seed)
    S, k, F = spec.n_strata, spec.n_controls + 1, spec.n_features
    raw = rng.uniform(0.0, 1.0, size=(S * k, F))
    stratum = np.repeat(np.arange(S), k)
    individual = None
    if spec.group_betas is not None:
        individual = np.repeat(np.arange(S) % spec.n_individuals, k)
    d = center_covariates(StrataDataset(
        stratum_id=stratum, case=np.zeros(S * k, bool), X=raw,
        feature_names=tuple(f"x{j + 1}" for j in range(F)),
        individual_id=individual, n_individuals=spec.n_individuals,
    ))
    X = d.X.reshape(S, k, F)
    if spec.group_betas is None:
        scores = selection_scores(spec, X)
    else:
        table = np.array([spec.group_betas[g] for g in range(spec.n_groups)])
        groups = spec.group_of(np.arange(S) % spec.n_individuals)
        scores = selection_scores(spec, X, table[groups][:, None, :])
    p = softmax_probabilities(scores)
    chosen = draw_case(p, rng.uniform(size=S))
    case = np.zeros((S, k), bool)
    case[np.arange(S), chosen] = True
    return StrataDataset(
        stratum_id=stratum, case=case.ravel(), X=d.X, feature_names=d.feature_names,
        individual_id=individual, n_individuals=spec.n_individuals,
        centered=True, offsets=d.offsets,
    )


# ---------------------------------------------------------------------- #
# Movement kernel
# ---------------------------------------------------------------------- #


def _a_inverse(r: float) -> float:
    """Approximate inverse of A(k) = I1(k)/I0(k) (piecewise, Best & Fisher)."""
    if r < 0.53:
        return 2 * r + r ** 3 + 5 * r ** 5 / 6
    if r < 0.85:
        return -0.4 + 1.39 * r + 0.43 / (1 - r)
    return 1.0 / (r ** 3 - 4 * r ** 2 + 3 * r)


def _gamma_mle(x: np.ndarray, tol: float = 1e-12, max_iter: int = 100) -> tuple[float, float]:
    s = math.log(x.mean()) - np.log(x).mean()
    if not s > 0:
        raise ValueError("degenerate step lengths: all values equal")
    k = (3 - s + math.sqrt((s - 3) ** 2 + 24 * s)) / (12 * s)
    for _ in range(max_iter):
        f = math.log(k) - special.digamma(k) - s
        fp = 1.0 / k - special.polygamma(1, k)
        step = f / fp
        k_new = k - step
        if k_new <= 0:
            k_new = k / 2
        if abs(k_new - k) < tol * k:
            k = k_new
            break
        k = k_new
    return float(k), float(k / x.mean())


def fit_movement_kernel(steps: Sequence[tuple[float, float]] | np.ndarray) -> MovementKernel:
    """Fit gamma step lengths (MLE) and von Mises turning angles.

    Parameters
    ----------
    steps : sequence of ``(step_length, turning_angle)`` pairs, at least 30.
    """
    a = np.asarray(steps, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError("steps must be (step_length, turning_angle) pairs")
    if len(a) < 30:
        raise ValueError(f"need at least 30 observations, got {len(a)}")
    lengths, angles = a[:, 0], a[:, 1]
    if not np.all(lengths > 0) or not np.all(np.isfinite(a)):
        raise ValueError("step lengths must be finite and > 0")
    shape, rate = _gamma_mle(lengths)
    c, s = np.cos(angles).mean(), np.sin(angles).mean()
    r = math.hypot(c, s)
    if r >= 1 - 1e-12:
        raise ValueError("degenerate turning angles: all values equal")
    mu = math.atan2(s, c)
    if mu <= -math.pi:
        mu = math.pi
    return MovementKernel(gamma_shape=shape, gamma_rate=rate, vm_mu=mu, vm_kappa=_a_inverse(r))


def _draw_steps(rng: np.random.Generator, kernel: MovementKernel, n: int):
    lengths = rng.gamma(kernel.gamma_shape, 1.0 / kernel.gamma_rate, size=n)
    turns = rng.vonmises(kernel.vm_mu, kernel.vm_kappa, size=n)
    return lengths, turns


def sample_candidate_steps(origin: Sequence[float], heading: float, kernel: MovementKernel,
                           n: int, rng_seed: int | np.random.Generator) -> np.ndarray:
    """Draw ``n`` candidate end points around ``origin``; returns an (n, 2) array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else make_rng(rng_seed)
    lengths, turns = _draw_steps(rng, kernel, n)
    bearing = heading + turns
    return np.asarray(origin, dtype=float) + lengths[:, None] * np.column_stack(
        [np.cos(bearing), np.sin(bearing)])


def _wrap(a):
    """Map angles to (-pi, pi]."""
    w = np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


# ---------------------------------------------------------------------- #
# Social scenario
# ---------------------------------------------------------------------- #


def simulate_social(spec: SocialSpec, rng_seed: int) -> StrataDataset:
    """Step all individuals in turn; each step contrasts the chosen position
    against kernel-sampled alternatives using the distance to the opponent.

    The opponent of a focal step is the other individual nearest to the
    focal's current position; its group sets the distance coefficient.
    Candidates falling outside the arena are redrawn.
    """
    rng = make_rng(rng_seed)
    n_ind = spec.n_individuals
    k = spec.n_controls + 1
    x0, y0, x1, y1 = spec.arena
    pos = np.column_stack([rng.uniform(x0, x1, n_ind), rng.uniform(y0, y1, n_ind)])
    heading = rng.uniform(-np.pi, np.pi, n_ind)
    groups = spec.group_of(np.arange(n_ind))
    effects = np.asarray(spec.group_distance_effect)

    n_strata = spec.n_steps * n_ind
    dist = np.empty((n_strata, k))
    sl = np.empty((n_strata, k))
    ta = np.empty((n_strata, k))
    focal = np.empty(n_strata, np.int64)
    opp = np.empty(n_strata, np.int64)
    chosen = np.empty(n_strata, np.int64)
    drawn = accepted = 0
    s = 0
    for _ in range(spec.n_steps):
        for f in range(n_ind):
            gaps = np.hypot(*(pos - pos[f]).T)
            gaps[f] = np.inf
            o = int(np.argmin(gaps))
            lengths = np.empty(k)
            turns = np.empty(k)
            pts = np.empty((k, 2))
            filled = 0
            while filled < k:
                need = k - filled
                ln, tn = _draw_steps(rng, spec.kernel, need)
                b = heading[f] + tn
                cand = pos[f] + ln[:, None] * np.column_stack([np.cos(b), np.sin(b)])
                inside = ((cand[:, 0] >= x0) & (cand[:, 0] <= x1)
                          & (cand[:, 1] >= y0) & (cand[:, 1] <= y1))
                drawn += need
                m = int(inside.sum())
                accepted += m
                pts[filled:filled + m] = cand[inside]
                lengths[filled:filled + m] = ln[inside]
                turns[filled:filled + m] = tn[inside]
                filled += m
                if drawn > 1000 and accepted < 0.01 * drawn:
                    raise RuntimeError("arena too small for the movement kernel: "
                                       "more than 99% of candidate steps rejected")
            d = np.hypot(*(pts - pos[o]).T)
            p = softmax_probabilities(effects[groups[o]] * d)
            c = int(draw_case(p, rng.uniform(size=1))[0])
            dist[s], sl[s], ta[s] = d, lengths, _wrap(turns)
            focal[s], opp[s], chosen[s] = f, o, c
            heading[f] = math.atan2(pts[c, 1] - pos[f, 1], pts[c, 0] - pos[f, 0])
            pos[f] = pts[c]
            s += 1
    case = np.zeros((n_strata, k), bool)
    case[np.arange(n_strata), chosen] = True
    d = StrataDataset(
        stratum_id=np.repeat(np.arange(n_strata), k),
        case=case.ravel(),
        X=dist.reshape(-1, 1),
        feature_names=("dist",),
        individual_id=np.repeat(focal, k),
        opponent_id=np.repeat(opp, k),
        step_length=sl.ravel(),
        turning_angle=ta.ravel(),
        n_individuals=n_ind,
        n_opponents=n_ind,
    )
    return center_covariates(d)


# ---------------------------------------------------------------------- #
# Truth sidecar
# ---------------------------------------------------------------------- #


def truth_document(spec: SelectionSpec | SocialSpec, seed: int, d: StrataDataset | None = None,
                   **extra) -> dict:
    kind = "selection" if isinstance(spec, SelectionSpec) else "social"
    doc = {"kind": kind, "seed": int(seed), "spec": spec.to_dict()}
    if d is not None and d.offsets is not None:
        doc["centering_offsets"] = [float(v) for v in d.offsets]
    if isinstance(spec, SocialSpec):
        doc["opponent_group"] = [int(g) for g in spec.group_of(np.arange(spec.n_individuals))]
    elif spec.group_betas is not None:
        doc["individual_group"] = [int(g) for g in spec.group_of(np.arange(spec.n_individuals))]
    doc.update(extra)
    return doc


def write_truth(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_truth(path) -> tuple[SelectionSpec | SocialSpec, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    cls = SelectionSpec if doc["kind"] == "selection" else SocialSpec
    return cls.from_dict(doc["spec"]), doc
