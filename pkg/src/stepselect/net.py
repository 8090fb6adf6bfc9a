"""Feed-forward step-selection network trained under the conditional-softmax
likelihood.

The network maps a candidate's covariates (optionally joined with a learned
embedding of the focal individual or of the opponent) to a scalar score; the
probability of the observed step is the softmax of the scores within its
stratum.  Forward and backward passes are written out with numpy.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import StepRecord, StrataDataset, StrataIndex
from .simkit import make_rng

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "selu", "tanh")
_SELU_ALPHA = 1.6732632423543772
_SELU_SCALE = 1.0507009873554805


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class EmbeddingSpec:
    """Learned table of ``dim``-vectors for individual or opponent ids.

    ``wiring="concat"`` appends the vector to the covariates before the first
    dense layer.  ``wiring="modulation"`` rescales each covariate by
    ``1 + (e @ M)_j`` with a learned ``(dim, n_features)`` matrix ``M``.
    """

    vocab_size: int
    dim: int = 2
    target: str = "individual"
    wiring: str = "concat"

    def __post_init__(self):
        if self.vocab_size < 1 or self.dim < 1:
            raise ValueError("embedding vocab_size and dim must be >= 1")
        if self.target not in ("individual", "opponent"):
            raise ValueError(f"embedding target must be 'individual' or 'opponent', got {self.target!r}")
        if self.wiring not in ("concat", "modulation"):
            raise ValueError(f"embedding wiring must be 'concat' or 'modulation', got {self.wiring!r}")


@dataclass(frozen=True)
class ArchSpec:
    n_features: int
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    embedding: EmbeddingSpec | None = None
    dropout_rate: float = 0.0
    l2: float = 0.0
    l1: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if isinstance(self.embedding, dict):
            object.__setattr__(self, "embedding", EmbeddingSpec(**self.embedding))
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.l2 < 0 or self.l1 < 0:
            raise ValueError("l1 and l2 must be >= 0")

    @property
    def input_width(self) -> int:
        e = self.embedding
        if e is not None and e.wiring == "concat":
            return self.n_features + e.dim
        return self.n_features

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_width, *self.hidden, 1]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    learning_rate: float = 0.01
    batch_strata: int = 100
    optimizer: str = "adam"
    seed: int = 0
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_strata < 1:
            raise ValueError("batch_strata must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass
class FitTrace:
    train_nll: list[float] = field(default_factory=list)
    valid_nll: list[float] | None = None

    def __len__(self) -> int:
        return len(self.train_nll)


@dataclass
class SsfNetwork:
    """Weights of a step-selection network.

    ``weights[l]`` has shape ``(fan_in, fan_out)``.  ``modulation`` is only
    present with ``wiring="modulation"`` embeddings.
    """

    arch: ArchSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    embedding_table: np.ndarray | None = None
    modulation: np.ndarray | None = None
    trained: bool = False
    kind = "dnn"

    @property
    def n_features(self) -> int:
        return self.arch.n_features

    # parameter bookkeeping ------------------------------------------------

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        if self.embedding_table is not None:
            out.append(self.embedding_table)
        if self.modulation is not None:
            out.append(self.modulation)
        return out

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"W{i}", f"b{i}"]
        if self.embedding_table is not None:
            names.append("embedding")
        if self.modulation is not None:
            names.append("modulation")
        return names

    def _penalized(self) -> list[bool]:
        # biases are not penalized
        return [not n.startswith("b") for n in self.param_names()]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> SsfNetwork:
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return SsfNetwork(self.arch, [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases],
                          cp(self.embedding_table), cp(self.modulation), self.trained)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta: np.ndarray) -> None:
        i = 0
        for p in self.params():
            p[...] = theta[i:i + p.size].reshape(p.shape)
            i += p.size

    # scoring --------------------------------------------------------------

    def _ids(self, d: StrataDataset | None, ids: np.ndarray | None, n: int) -> np.ndarray | None:
        emb = self.arch.embedding
        if emb is None:
            return None
        if ids is None and d is not None:
            ids = d.ids_for(emb.target)
        if ids is None:
            raise ValueError(f"network embeds {emb.target} ids but none were given")
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (n,):
            raise ValueError("one id per candidate row required")
        if ids.size and (ids.min() < 0 or ids.max() >= emb.vocab_size):
            raise ValueError(f"{emb.target} id out of vocabulary [0, {emb.vocab_size})")
        return ids

    def score(self, X: np.ndarray, ids: np.ndarray | None = None) -> np.ndarray:
        """Inference-mode scores (dropout off) of candidate rows."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.arch.n_features:
            raise ValueError(f"expected {self.arch.n_features} covariates per row, got shape {X.shape}")
        ids = self._ids(None, ids, X.shape[0])
        return _forward(self, X, ids, training=False)[0]

    def score_rows(self, d: StrataDataset, X: np.ndarray | None = None) -> np.ndarray:
        """Scores of every record of ``d``; ``X`` overrides the covariates."""
        X = d.X if X is None else X
        return self.score(X, self._ids(d, None, X.shape[0]))


# ---------------------------------------------------------------------- #
# Construction
# ---------------------------------------------------------------------- #


def build_network(arch: ArchSpec, seed: int = 0) -> SsfNetwork:
    """Initialize weights: He-uniform for relu, Glorot-uniform for tanh/selu;
    embeddings (and modulation matrix) from N(0, 0.1)."""
    rng = make_rng(seed, 0x4E45)
    sizes = arch.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if arch.activation == "relu":
            limit = math.sqrt(6.0 / fan_in)
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    table = modulation = None
    if arch.embedding is not None:
        e = arch.embedding
        table = rng.normal(0.0, 0.1, size=(e.vocab_size, e.dim))
        if e.wiring == "modulation":
            modulation = rng.normal(0.0, 0.1, size=(e.dim, arch.n_features))
    return SsfNetwork(arch, weights, biases, table, modulation)


# ---------------------------------------------------------------------- #
# Forward / backward
# ---------------------------------------------------------------------- #


def _activate(z: np.ndarray, name: str) -> np.ndarray:
    """In-place activation of the pre-activation buffer ``z``."""
    if name == "relu":
        return np.maximum(z, 0.0, out=z)
    if name == "tanh":
        return np.tanh(z, out=z)
    neg = z < 0
    z[neg] = _SELU_ALPHA * np.expm1(z[neg])
    z *= _SELU_SCALE
    return z


def _activation_grad(a: np.ndarray, g: np.ndarray, name: str) -> None:
    """Multiply ``g`` in place by the activation derivative, given outputs ``a``."""
    if name == "relu":
        g *= a > 0
    elif name == "tanh":
        g *= 1.0 - a * a
    else:
        g *= np.where(a > 0, _SELU_SCALE, a + _SELU_SCALE * _SELU_ALPHA)


def _network_input(net: SsfNetwork, X: np.ndarray, ids: np.ndarray | None):
    e = net.arch.embedding
    if e is None:
        return X, None
    E = net.embedding_table[ids]
    if e.wiring == "concat":
        return np.concatenate([X, E], axis=1), E
    return X * (1.0 + E @ net.modulation), E


def _forward(net: SsfNetwork, X: np.ndarray, ids: np.ndarray | None, training: bool,
             rng: np.random.Generator | None = None):
    """Return ``(scores, cache)``."""
    act = net.arch.activation
    p_drop = net.arch.dropout_rate if training else 0.0
    Z, E = _network_input(net, X, ids)
    h = Z
    outs, masks = [Z], []
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W
        z += b
        if i < last:
            a = _activate(z, act)
            if p_drop > 0:
                m = (rng.random(a.shape) >= p_drop) / (1.0 - p_drop)
                masks.append(m)
                h = a * m
            else:
                masks.append(None)
                h = a
            outs.append(a)
        else:
            h = z
    if p_drop > 0:
        # downstream layers consume the dropped activations
        dropped = [Z] + [a * m for a, m in zip(outs[1:], masks)]
    else:
        dropped = outs
    return h[:, 0], (X, ids, E, outs, dropped, masks)


def _backward(net: SsfNetwork, cache, dscores: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``sum(dscores * scores)`` w.r.t. ``net.params()``."""
    X, ids, E, outs, dropped, masks = cache
    act = net.arch.activation
    L = len(net.weights)
    gW = [None] * L
    gb = [None] * L
    g = dscores[:, None]
    for i in range(L - 1, -1, -1):
        gW[i] = dropped[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0 or E is not None:
            g = g @ net.weights[i].T
            if i > 0:
                if masks[i - 1] is not None:
                    g *= masks[i - 1]
                _activation_grad(outs[i], g, act)
    grads = []
    for a, b in zip(gW, gb):
        grads += [a, b]
    if E is not None:
        emb = net.arch.embedding
        gE = np.zeros_like(net.embedding_table)
        if emb.wiring == "concat":
            np.add.at(gE, ids, g[:, net.arch.n_features:])
            grads.append(gE)
        else:
            du = g * X
            np.add.at(gE, ids, du @ net.modulation.T)
            grads.append(gE)
            grads.append(E.T @ du)
    return grads


def _softmax_grad(scores: np.ndarray, valid: np.ndarray, case_col: np.ndarray):
    """Per-stratum NLLs and d(sum NLL)/d(scores) in the padded layout."""
    s = np.where(valid, scores, -np.inf)
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    tot = e.sum(axis=1, keepdims=True)
    r = np.arange(s.shape[0])
    nll = (m[:, 0] + np.log(tot[:, 0])) - s[r, case_col]
    p = e / tot
    p[r, case_col] -= 1.0
    return nll, p


def stratum_nll(scores: Sequence[float] | np.ndarray, case_index: int) -> float:
    """``-log softmax(scores)[case_index]`` with max subtraction."""
    s = np.asarray(scores, dtype=float)
    if not 0 <= case_index < s.size:
        raise IndexError(f"case_index {case_index} out of range for {s.size} candidates")
    m = s.max()
    return float(m + math.log(np.exp(s - m).sum()) - s[case_index])


def score_candidates(net: SsfNetwork, stratum: StrataDataset | Sequence[StepRecord]) -> np.ndarray:
    """Scores of the candidates of a single stratum, in record order."""
    d = stratum if isinstance(stratum, StrataDataset) else StrataDataset.from_records(stratum)
    if len(np.unique(d.stratum_id)) > 1:
        raise ValueError("records must share one stratum_id")
    if d.n_features != net.arch.n_features:
        raise ValueError(f"network expects {net.arch.n_features} covariates, records have {d.n_features}")
    return net.score_rows(d)


# ---------------------------------------------------------------------- #
# Training
# ---------------------------------------------------------------------- #


@dataclass
class _Padded:
    X: np.ndarray  # (S, k, F)
    ids: np.ndarray | None  # (S, k)
    valid: np.ndarray  # (S, k)
    case_col: np.ndarray  # (S,)


def _padded(net: SsfNetwork, d: StrataDataset) -> _Padded:
    idx: StrataIndex = d.strata
    ids = net._ids(d, None, d.n_records)
    return _Padded(
        X=d.X[idx.rows],
        ids=None if ids is None else ids[idx.rows],
        valid=np.array(idx.valid),
        case_col=np.array(idx.case_col),
    )


def _batch_loss_grad(net: SsfNetwork, P: _Padded, sel: np.ndarray, rng=None, training=True):
    """Mean NLL over strata ``sel`` and its gradient (no penalty)."""
    nb, k = len(sel), P.X.shape[1]
    X = P.X[sel].reshape(nb * k, -1)
    ids = None if P.ids is None else P.ids[sel].reshape(-1)
    scores, cache = _forward(net, X, ids, training=training, rng=rng)
    nll, dS = _softmax_grad(scores.reshape(nb, k), P.valid[sel], P.case_col[sel])
    dS /= nb
    return nll.mean(), _backward(net, cache, dS.reshape(-1))


def _penalty(net: SsfNetwork) -> float:
    a = net.arch
    if a.l2 == 0 and a.l1 == 0:
        return 0.0
    tot = 0.0
    for p, pen in zip(net.params(), net._penalized()):
        if pen:
            tot += a.l2 * float(np.sum(p * p)) + a.l1 * float(np.sum(np.abs(p)))
    return tot


def _add_penalty_grad(net: SsfNetwork, grads: list[np.ndarray]) -> None:
    a = net.arch
    if a.l2 == 0 and a.l1 == 0:
        return
    for p, g, pen in zip(net.params(), grads, net._penalized()):
        if pen:
            g += 2.0 * a.l2 * p + a.l1 * np.sign(p)


def dataset_nll(net: SsfNetwork, d: StrataDataset) -> float:
    """Mean conditional NLL of ``d`` under ``net`` (inference mode)."""
    from .core import mean_conditional_nll
    return mean_conditional_nll(net.score_rows(d), d.strata)


def _check_centered(d: StrataDataset) -> None:
    if d.centered:
        return
    means = np.abs(d.X.mean(axis=0))
    scale = np.maximum(d.X.std(axis=0), 1e-12)
    if np.any(means > 1e-6 * np.maximum(scale, 1.0)):
        warnings.warn("covariates are not centered; centering is recommended before training",
                      stacklevel=3)


def train(net: SsfNetwork, data: StrataDataset, cfg: TrainConfig,
          validation: StrataDataset | None = None) -> tuple[SsfNetwork, FitTrace]:
    """Minimize mean stratum NLL + l2*|theta|^2 + l1*|theta|_1 by minibatch
    gradient steps over shuffled strata.  Returns a trained copy and the trace.

    The trace records, per epoch, the mean conditional NLL of the training
    strata accumulated over that epoch's minibatches.
    """
    if data.n_features != net.arch.n_features:
        raise ValueError(f"network expects {net.arch.n_features} covariates, data has {data.n_features}")
    _check_centered(data)
    net = net.copy()
    P = _padded(net, data)
    PV = _padded(net, validation) if validation is not None else None
    S = P.X.shape[0]
    rng = make_rng(cfg.seed, 0x5452)
    params = net.params()
    lr = cfg.learning_rate
    adam = cfg.optimizer == "adam"
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    trace = FitTrace(valid_nll=[] if PV is not None else None)
    best, best_state, wait = math.inf, None, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(S)
        total = 0.0
        for start in range(0, S, cfg.batch_strata):
            sel = order[start:start + cfg.batch_strata]
            loss, grads = _batch_loss_grad(net, P, sel, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}; lower the learning rate "
                    f"(currently {lr}) or check the covariate scale")
            total += loss * len(sel)
            _add_penalty_grad(net, grads)
            t += 1
            if adam:
                c1 = 1.0 - b1 ** t
                c2 = 1.0 - b2 ** t
                for p, g, mi, vi in zip(params, grads, m, v):
                    mi *= b1
                    mi += (1 - b1) * g
                    vi *= b2
                    vi += (1 - b2) * (g * g)
                    p -= (lr / c1) * mi / (np.sqrt(vi / c2) + eps)
            else:
                for p, g in zip(params, grads):
                    p -= lr * g
        epoch_nll = total / S
        if not math.isfinite(epoch_nll) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDiverged(f"weights became non-finite at epoch {epoch + 1}; "
                                   f"lower the learning rate (currently {lr})")
        trace.train_nll.append(epoch_nll)
        monitor = epoch_nll
        if PV is not None:
            vn = float(_batch_loss_grad(net, PV, np.arange(PV.X.shape[0]), training=False)[0])
            trace.valid_nll.append(vn)
            monitor = vn
        if cfg.early_stop_patience is not None:
            if monitor < best - 1e-12:
                best, best_state, wait = monitor, net.flat(), 0
            else:
                wait += 1
                if wait >= cfg.early_stop_patience:
                    logger.debug("early stop at epoch %d", epoch + 1)
                    break
    if best_state is not None:
        net.set_flat(best_state)
    net.trained = True
    return net, trace


# ---------------------------------------------------------------------- #
# Checks and accessors
# ---------------------------------------------------------------------- #


def gradient_check(net: SsfNetwork, stratum: StrataDataset, epsilon: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences of the
    stratum NLL, over every parameter entry.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-4)``; the floor keeps
    round-off on near-zero entries from dominating.
    """
    if not 0 < epsilon <= 1e-3:
        raise ValueError("epsilon must lie in (0, 1e-3]")
    if net.arch.dropout_rate > 0:
        net = replace_arch(net, dropout_rate=0.0)
    net = net.copy()
    P = _padded(net, stratum)
    sel = np.arange(P.X.shape[0])
    _, grads = _batch_loss_grad(net, P, sel, training=False)
    analytic = np.concatenate([g.ravel() for g in grads])
    theta = net.flat()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + epsilon
        net.set_flat(theta)
        fp = _batch_loss_grad(net, P, sel, training=False)[0]
        theta[i] = old - epsilon
        net.set_flat(theta)
        fm = _batch_loss_grad(net, P, sel, training=False)[0]
        theta[i] = old
        numeric[i] = (fp - fm) / (2 * epsilon)
    net.set_flat(theta)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float(np.max(np.abs(analytic - numeric) / denom))


def replace_arch(net: SsfNetwork, **changes) -> SsfNetwork:
    out = net.copy()
    out.arch = replace(net.arch, **changes)
    return out


def embedding_lookup(net: SsfNetwork, id: int) -> np.ndarray:
    if net.embedding_table is None:
        raise ValueError("network has no embedding layer")
    if not 0 <= id < net.embedding_table.shape[0]:
        raise IndexError(f"id {id} outside [0, {net.embedding_table.shape[0]})")
    return net.embedding_table[id].copy()


# ---------------------------------------------------------------------- #
# Serialization
# ---------------------------------------------------------------------- #


def network_to_dict(net: SsfNetwork) -> dict:
    arch = asdict(net.arch)
    arch["hidden"] = list(net.arch.hidden)
    return {
        "kind": "dnn",
        "format_version": 1,
        "arch": arch,
        "trained": net.trained,
        "params": [
            {"name": n, "shape": list(p.shape), "values": [float(x) for x in p.ravel()]}
            for n, p in zip(net.param_names(), net.params())
        ],
    }


def network_from_dict(doc: dict) -> SsfNetwork:
    if doc.get("kind") != "dnn":
        raise ValueError(f"not a network document (kind={doc.get('kind')!r})")
    arch = dict(doc["arch"])
    if arch.get("embedding") is not None:
        arch["embedding"] = EmbeddingSpec(**arch["embedding"])
    net = build_network(ArchSpec(**arch))
    by_name = {p["name"]: p for p in doc["params"]}
    if set(by_name) != set(net.param_names()):
        raise ValueError("parameter names do not match the architecture")
    for name, p in zip(net.param_names(), net.params()):
        src = by_name[name]
        if tuple(src["shape"]) != p.shape:
            raise ValueError(f"parameter {name} has shape {src['shape']}, expected {list(p.shape)}")
        p[...] = np.asarray(src["values"], dtype=float).reshape(p.shape)
    net.trained = bool(doc.get("trained", False))
    return net


def save_network(net: SsfNetwork, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(network_to_dict(net), fh)
        fh.write("\n")


def load_network(path) -> SsfNetwork:
    with open(path, encoding="utf-8") as fh:
        return network_from_dict(json.load(fh))


@dataclass(frozen=True)
class DnnFitter:
    """Build-and-train procedure; ``init_seed`` fixes the initial weights."""

    arch: ArchSpec
    config: TrainConfig = TrainConfig()
    init_seed: int = 0

    def __call__(self, d: StrataDataset) -> SsfNetwork:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return train(build_network(self.arch, self.init_seed), d, self.config)[0]
