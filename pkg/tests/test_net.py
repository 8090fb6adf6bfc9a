import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_dataset
from stepselect.baselines import fit_clogit_glm
from stepselect.core import center_covariates, stratum_log_softmax
from stepselect.net import (ArchSpec, DnnFitter, EmbeddingSpec, TrainConfig, TrainingDiverged,
                            build_network, dataset_nll, embedding_lookup, gradient_check,
                            load_network, network_from_dict, network_to_dict, save_network,
                            score_candidates, stratum_nll, train)
from stepselect.simkit import SelectionSpec, make_rng, simulate_selection

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


def oracle_scores(net, X, ids=None):
    """Row-by-row, unit-by-unit forward pass."""
    act = {
        "relu": lambda v: max(v, 0.0),
        "tanh": math.tanh,
        "selu": lambda v: SELU_SCALE * (v if v > 0 else SELU_ALPHA * (math.exp(v) - 1.0)),
    }[net.arch.activation]
    emb = net.arch.embedding
    out = []
    for r, x in enumerate(np.asarray(X, dtype=float)):
        h = list(x)
        if emb is not None:
            e = net.embedding_table[ids[r]]
            if emb.wiring == "concat":
                h = h + list(e)
            else:
                h = [h[j] * (1.0 + sum(e[t] * net.modulation[t, j] for t in range(emb.dim)))
                     for j in range(len(h))]
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            z = [sum(h[a] * W[a, c] for a in range(len(h))) + b[c] for c in range(W.shape[1])]
            h = z if i == len(net.weights) - 1 else [act(v) for v in z]
        out.append(h[0])
    return np.array(out)


def randomize_biases(net, seed):
    rng = np.random.default_rng(seed)
    for b in net.biases:
        b[...] = rng.normal(0.0, 0.5, size=b.shape)
    return net


def small_stratum_data(n_features, vocab, seed, k=5, S=2):
    rng = np.random.default_rng(seed)
    return make_dataset(rng.normal(size=(S * k, n_features)), k, case_cols=rng.integers(0, k, S),
                        individual_id=rng.integers(0, vocab, S * k), n_individuals=vocab)


@pytest.fixture(scope="module")
def scenario1_beta15():
    return simulate_selection(SelectionSpec(1, (1.5,), n_strata=2000), 21)


class TestBuild:
    def test_parameter_count(self):
        net = build_network(ArchSpec(9, (32, 32)))
        assert net.n_params == 9 * 32 + 32 + 32 * 32 + 32 + 32 * 1 + 1 == 1409

    def test_same_seed_same_weights(self):
        a = build_network(ArchSpec(3, (4,), embedding=EmbeddingSpec(5, 2)), 7)
        b = build_network(ArchSpec(3, (4,), embedding=EmbeddingSpec(5, 2)), 7)
        np.testing.assert_array_equal(a.flat(), b.flat())
        assert not np.array_equal(a.flat(), build_network(a.arch, 8).flat())

    def test_no_hidden_layer_is_affine(self, rng):
        net = randomize_biases(build_network(ArchSpec(3, ()), 1), 2)
        x, y = rng.normal(size=(2, 3))
        s = lambda v: net.score(np.atleast_2d(v))[0]  # noqa: E731
        assert s(x + y) - s(x) - s(y) + s(np.zeros(3)) == pytest.approx(0.0, abs=1e-12)

    def test_initializer_ranges(self):
        net = build_network(ArchSpec(10, (20,), activation="relu"), 0)
        assert np.abs(net.weights[0]).max() <= math.sqrt(6 / 10)
        net = build_network(ArchSpec(10, (20,), activation="tanh"), 0)
        assert np.abs(net.weights[0]).max() <= math.sqrt(6 / 30)
        assert all(np.all(b == 0) for b in net.biases)

    @pytest.mark.parametrize("kw", [dict(hidden=(0,)), dict(activation="gelu"), dict(dropout_rate=1.0),
                                    dict(l2=-1.0), dict(n_features=0)])
    def test_invalid_arch(self, kw):
        with pytest.raises(ValueError):
            ArchSpec(**{"n_features": 2, **kw})

    def test_invalid_embedding(self):
        with pytest.raises(ValueError):
            EmbeddingSpec(5, 2, target="group")
        with pytest.raises(ValueError):
            EmbeddingSpec(5, 2, wiring="add")


class TestScore:
    def test_zero_network(self, rng):
        net = build_network(ArchSpec(4, (8, 8)), 0)
        for p in net.params():
            p[...] = 0.0
        np.testing.assert_array_equal(net.score(rng.normal(size=(6, 4))), 0.0)

    def test_affine_evaluation(self):
        net = build_network(ArchSpec(2, ()), 0)
        net.weights[0][:, 0] = [1.0, -1.0]
        net.biases[0][:] = 0.0
        assert net.score(np.array([[2.0, 3.0]]))[0] == -1.0

    @pytest.mark.parametrize("activation", ["relu", "tanh", "selu"])
    @pytest.mark.parametrize("wiring", [None, "concat", "modulation"])
    def test_matches_oracle(self, activation, wiring):
        emb = None if wiring is None else EmbeddingSpec(4, 2, "individual", wiring)
        net = randomize_biases(build_network(ArchSpec(3, (5, 4), activation, emb), 3), 4)
        if net.modulation is not None:
            net.modulation[...] = make_rng(5).normal(size=net.modulation.shape)
        d = small_stratum_data(3, 4, 6, k=6, S=1)
        ids = d.individual_id if wiring else None
        np.testing.assert_allclose(score_candidates(net, d), oracle_scores(net, d.X, ids),
                                   rtol=0, atol=1e-12)

    def test_score_candidates_rejects_mixed_strata(self):
        net = build_network(ArchSpec(1, ()), 0)
        with pytest.raises(ValueError):
            score_candidates(net, make_dataset(np.zeros(4), 2))

    def test_unknown_id_rejected(self):
        net = build_network(ArchSpec(1, (), embedding=EmbeddingSpec(2)), 0)
        with pytest.raises(ValueError):
            net.score(np.zeros((2, 1)), np.array([0, 2]))

    def test_softmax_sums_to_one(self, rng):
        net = randomize_biases(build_network(ArchSpec(2, (6,)), 0), 1)
        d = make_dataset(rng.normal(size=(40, 2)), 8)
        lp = stratum_log_softmax(net.score_rows(d), d.strata)
        np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)


class TestStratumNll:
    def test_uniform(self):
        assert stratum_nll([0.3] * 4, 2) == pytest.approx(math.log(4), abs=1e-12)
        assert stratum_nll([0.0] * 4, 0) == pytest.approx(1.3863, abs=1e-4)

    def test_hand_values(self):
        assert stratum_nll([10.0, 0.0], 0) == pytest.approx(math.log1p(math.exp(-10)), abs=1e-15)
        assert stratum_nll([10.0, 0.0], 0) == pytest.approx(4.54e-5, rel=1e-3)
        assert stratum_nll([0.0, 10.0], 0) == pytest.approx(10.0000454, abs=1e-7)

    def test_nonnegative_and_no_overflow(self):
        assert stratum_nll([1000.0, -1000.0], 0) == 0.0
        assert stratum_nll([-1000.0, 1000.0], 0) == pytest.approx(2000.0)

    def test_bad_index(self):
        with pytest.raises(IndexError):
            stratum_nll([0.0, 1.0], 2)

    @given(arrays(np.float64, 7, elements=st.floats(-50, 50)), st.integers(0, 6), st.floats(-1e4, 1e4))
    def test_shift_invariance(self, scores, case, c):
        assert stratum_nll(scores + c, case) == pytest.approx(stratum_nll(scores, case), abs=1e-10)


ARCH_MATRIX = [(h, a, w) for h in [(), (5,), (4, 3)] for a in ["relu", "tanh", "selu"]
               for w in [None, "concat", "modulation"]]


class TestGradientCheck:
    @pytest.mark.parametrize("hidden,activation,wiring", ARCH_MATRIX)
    def test_architecture_matrix(self, hidden, activation, wiring):
        emb = None if wiring is None else EmbeddingSpec(3, 2, "individual", wiring)
        net = randomize_biases(build_network(ArchSpec(3, hidden, activation, emb), 11), 12)
        if net.modulation is not None:
            net.modulation[...] = make_rng(13).normal(size=net.modulation.shape)
        d = small_stratum_data(3, 3, 14)
        assert gradient_check(net, d, 1e-5) < 1e-5

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_zero_weights_tied_scores(self, activation):
        net = build_network(ArchSpec(2, (4,), activation), 0)
        for p in net.params():
            p[...] = 0.0
        d = small_stratum_data(2, 1, 15, S=1)
        assert len(set(net.score_rows(d))) == 1
        assert gradient_check(net, d, 1e-5) < 1e-5

    def test_dropout_is_disabled_for_the_check(self):
        net = randomize_biases(build_network(ArchSpec(2, (4,), "tanh", dropout_rate=0.5), 0), 1)
        assert gradient_check(net, small_stratum_data(2, 1, 16)) < 1e-5

    @pytest.mark.parametrize("eps", [0.0, -1e-5, 0.1])
    def test_epsilon_domain(self, eps):
        net = build_network(ArchSpec(1, ()), 0)
        with pytest.raises(ValueError):
            gradient_check(net, small_stratum_data(1, 1, 0), eps)


class TestTrain:
    def test_beats_zero_network(self, scenario1_beta15):
        net, trace = train(build_network(ArchSpec(1, (32, 32)), 0), scenario1_beta15,
                           TrainConfig(150, 0.01, 100))
        assert len(trace) == 150
        glm_nll = -fit_clogit_glm(scenario1_beta15).loglik / scenario1_beta15.n_strata
        assert trace.train_nll[-1] < math.log(10)
        assert dataset_nll(net, scenario1_beta15) == pytest.approx(glm_nll, abs=0.02)

    def test_mle_bounds_attainable_nll_gain(self, scenario1_beta15):
        # with one uniform covariate and slope 1.5 even the MLE gains only a few percent
        glm_nll = -fit_clogit_glm(scenario1_beta15).loglik / scenario1_beta15.n_strata
        assert 0.9 * math.log(10) < glm_nll < math.log(10)

    def test_no_hidden_layer_matches_glm(self, scenario1_beta15):
        net, _ = train(build_network(ArchSpec(1, ()), 0), scenario1_beta15, TrainConfig(150, 0.01, 100))
        glm = fit_clogit_glm(scenario1_beta15)
        assert net.weights[0][0, 0] == pytest.approx(glm.coefficients[0], abs=0.05)

    def test_zero_learning_rate(self, scenario1_beta15):
        net0 = build_network(ArchSpec(1, (4,)), 0)
        net, trace = train(net0, scenario1_beta15, TrainConfig(5, 0.0, 500, optimizer="sgd"))
        np.testing.assert_array_equal(net.flat(), net0.flat())
        np.testing.assert_allclose(trace.train_nll, trace.train_nll[0], rtol=1e-12)

    def test_small_learning_rate_full_batch_monotone(self, scenario1_beta15):
        net = randomize_biases(build_network(ArchSpec(1, (8,), "tanh"), 0), 1)
        _, trace = train(net, scenario1_beta15, TrainConfig(10, 0.05, 2000, optimizer="sgd"))
        assert np.all(np.diff(trace.train_nll) <= 1e-12)

    def test_input_not_mutated_and_reproducible(self, scenario1_beta15):
        net0 = build_network(ArchSpec(1, (4,)), 0)
        before = net0.flat()
        a, _ = train(net0, scenario1_beta15, TrainConfig(3, 0.01, 100, seed=5))
        b, _ = train(net0, scenario1_beta15, TrainConfig(3, 0.01, 100, seed=5))
        np.testing.assert_array_equal(net0.flat(), before)
        np.testing.assert_array_equal(a.flat(), b.flat())
        assert a.trained and not net0.trained

    def test_divergence_reported(self, scenario1_beta15):
        bad = scenario1_beta15.with_X(scenario1_beta15.X * 1e6)
        with pytest.raises(TrainingDiverged, match="learning rate"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                train(build_network(ArchSpec(1, (8,)), 0), bad, TrainConfig(20, 1e3, 100, optimizer="sgd"))

    def test_uncentered_warning(self, rng):
        d = make_dataset(rng.uniform(5, 6, size=40), 4)
        with pytest.warns(UserWarning, match="centered"):
            train(build_network(ArchSpec(1, ()), 0), d, TrainConfig(1))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            train(build_network(ArchSpec(1, ()), 0), center_covariates(d), TrainConfig(1))

    def test_early_stopping_with_validation(self, scenario1_beta15):
        tr = scenario1_beta15.take_strata(np.arange(200))
        va = scenario1_beta15.take_strata(np.arange(200, 400))
        _, trace = train(build_network(ArchSpec(1, (32, 32)), 0), tr,
                         TrainConfig(300, 0.05, 20, early_stop_patience=3), validation=va)
        assert len(trace) < 300
        assert len(trace.valid_nll) == len(trace)

    def test_penalty_excludes_biases(self):
        from stepselect.net import _penalty
        net = randomize_biases(build_network(ArchSpec(2, (3,), l2=0.1, l1=0.01), 0), 1)
        W = np.concatenate([w.ravel() for w in net.weights])
        assert _penalty(net) == pytest.approx(0.1 * np.sum(W ** 2) + 0.01 * np.sum(np.abs(W)), rel=1e-12)

    def test_dropout_inference_is_deterministic(self, rng):
        net = build_network(ArchSpec(2, (16,), dropout_rate=0.5), 0)
        X = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(net.score(X), net.score(X))

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_strata=0), dict(optimizer="rmsprop"),
                                    dict(learning_rate=-1.0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestEmbedding:
    def test_lookup_semantics(self):
        net = build_network(ArchSpec(1, (), embedding=EmbeddingSpec(4, 3)), 9)
        np.testing.assert_array_equal(embedding_lookup(net, 2), net.embedding_table[2])
        a, b = embedding_lookup(net, 0), embedding_lookup(net, 1)
        assert not np.array_equal(a, b)
        a[:] = 99.0
        assert not np.any(net.embedding_table == 99.0)
        with pytest.raises(IndexError):
            embedding_lookup(net, 4)

    def test_only_looked_up_rows_receive_gradient(self):
        from stepselect.net import _batch_loss_grad, _padded
        net = build_network(ArchSpec(2, (3,), "tanh", EmbeddingSpec(5, 2)), 0)
        d = make_dataset(np.random.default_rng(0).normal(size=(6, 2)), 3,
                         individual_id=[1, 1, 1, 3, 3, 3], n_individuals=5)
        _, grads = _batch_loss_grad(net, _padded(net, d), np.arange(2), training=False)
        gE = grads[-1]
        assert np.all(gE[[0, 2, 4]] == 0) and np.any(gE[[1, 3]] != 0)

    def test_trained_groups_cluster(self):
        from stepselect.bench import scenario4_truth
        spec = SelectionSpec(20, (0.0,) * 20, group_betas=scenario4_truth(3), n_strata=3000)
        d = simulate_selection(spec, 3)
        arch = ArchSpec(20, (32, 32), l2=1e-3, embedding=EmbeddingSpec(20, 2))
        net = DnnFitter(arch, TrainConfig(100, 0.01, 100), 3)(d)
        E = net.embedding_table
        g = spec.group_of(np.arange(20))
        D = np.linalg.norm(E[:, None] - E[None], axis=2)
        iu = np.triu_indices(20, 1)
        same = (g[:, None] == g[None])[iu]
        assert D[iu][same].mean() < D[iu][~same].mean()


class TestSerialization:
    @pytest.mark.parametrize("wiring", [None, "concat", "modulation"])
    def test_roundtrip(self, wiring, tmp_path):
        emb = None if wiring is None else EmbeddingSpec(3, 2, "opponent", wiring)
        net = randomize_biases(build_network(ArchSpec(2, (4,), "selu", emb, 0.1, 1e-3), 1), 2)
        save_network(net, tmp_path / "m.json")
        back = load_network(tmp_path / "m.json")
        assert back.arch == net.arch
        np.testing.assert_array_equal(back.flat(), net.flat())

    def test_shape_mismatch_rejected(self):
        doc = network_to_dict(build_network(ArchSpec(2, (4,)), 0))
        doc["params"][0]["shape"] = [4, 2]
        with pytest.raises(ValueError):
            network_from_dict(doc)

    def test_wrong_kind_rejected(self):
        with pytest.raises(ValueError):
            network_from_dict({"kind": "glm"})
