import math
from dataclasses import replace

import numpy as np
import pytest

from crftrack.core import CrfParams
from crftrack.experiments import fit_providers, scene_tracklets, training_windows, ablation_config
from crftrack.learning import (
    CrfModel,
    TrainingDiverged,
    cross_entropy,
    finite_difference_gradient,
    load_params,
    node_gt_labels,
    param_gradient,
    parameter_names,
    save_params,
    train,
    unary_frozen_mask,
    window_loss,
    windows_from_tracklets,
)
from crftrack.potentials import LogisticPairProvider, LogisticUnaryProvider
from crftrack.simulate import SceneConfig


@pytest.fixture(scope="module")
def windows():
    _, ts = scene_tracklets(SceneConfig(n_targets=6, n_frames=80, crossings=2, miss_rate=0.1, position_noise=2.0,
                                        appearance_noise=0.3, seed=77))
    ws = [w for w in windows_from_tracklets(ts, window_size=40) if w.n_nodes and len(w.edges)]
    assert ws
    return ws


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestLoss:
    def test_perfect(self):
        assert cross_entropy(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]) == 0.0

    def test_uniform(self, rng):
        gt = rng.integers(0, 2, 17)
        assert cross_entropy(np.full((17, 2), 0.5), gt) == pytest.approx(math.log(2), abs=1e-15)

    def test_hand_instance(self):
        q = np.array([[0.2, 0.8], [0.9, 0.1], [0.4, 0.6]])
        want = -(math.log(0.8) + math.log(0.1) + math.log(0.4)) / 3
        assert cross_entropy(q, [1, 1, 0]) == pytest.approx(want, rel=1e-15)

    def test_floor(self):
        assert cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-9))


class TestGradient:
    def test_against_finite_differences(self, windows):
        rng = np.random.default_rng(3)
        base = CrfModel()
        for w in windows[:3]:
            for _ in range(2):
                theta = base.vector() + rng.normal(0, 0.1, CrfModel.size())
                theta[:3] = rng.uniform(0.3, 1.5, 3)
                m = base.with_vector(theta)
                _, g = param_gradient(w, m)
                assert rel_err(g, finite_difference_gradient(w, m)) < 1e-5

    def test_gamma_unused_at_zero_iterations(self, windows):
        m = CrfModel(CrfParams(iterations=0))
        _, g = param_gradient(windows[0], m)
        assert g[2] == 0.0

    def test_w_u_scales_unary(self, windows):
        w = windows[0]
        a = CrfModel(CrfParams(w_u=1.0)).potentials(w).unary
        b = CrfModel(CrfParams(w_u=2.5)).potentials(w).unary
        assert np.allclose(b, 2.5 * a, rtol=1e-14)

    def test_w_u_sign_matches_slope(self, windows):
        m = CrfModel()
        for w in windows:
            _, g = param_gradient(w, m)
            h = 1e-5
            slope = (window_loss(w, replace_w_u(m, 1 + h)) - window_loss(w, replace_w_u(m, 1 - h))) / (2 * h)
            if abs(slope) > 1e-8:
                assert np.sign(g[0]) == np.sign(slope)

    def test_names_match_size(self):
        assert len(parameter_names()) == CrfModel.size() == len(CrfModel().vector())


def replace_w_u(m, value):
    return CrfModel(replace(m.params, w_u=value), m.unary, m.pair)


class TestTrain:
    def test_zero_epochs_bit_identical(self, windows):
        init = CrfModel()
        out, log = train(windows, init, epochs=0)
        assert np.array_equal(out.vector(), init.vector()) and len(log.epochs) == 1

    def test_zero_lr(self, windows):
        init = CrfModel()
        out, log = train(windows, init, lr=0.0, epochs=3, patience=10)
        assert np.array_equal(out.vector(), init.vector())
        assert len({tr for _, tr, _ in log.epochs}) == 1

    def test_frozen_mask(self, windows):
        init = CrfModel()
        out, _ = train(windows, init, lr=0.05, epochs=2, trainable=unary_frozen_mask())
        mask = unary_frozen_mask()
        assert np.array_equal(out.vector()[~mask], init.vector()[~mask])
        assert not np.array_equal(out.vector()[mask], init.vector()[mask])

    def test_loss_decreases(self, windows):
        init = CrfModel()
        out, log = train(windows, init, lr=0.05, epochs=4)
        assert log.epochs[log.best_epoch][2] <= log.epochs[0][2]
        assert out.params.w_u >= 0 and out.params.w_d >= 0 and out.params.gamma > 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self, windows):
        init = CrfModel()
        with pytest.raises(TrainingDiverged):
            train(windows, init, lr=np.inf, epochs=1)

    def test_csv_log(self, windows):
        _, log = train(windows, CrfModel(), lr=0.01, epochs=1)
        lines = log.csv().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 3


def test_params_round_trip(tmp_path):
    p = CrfParams(w_u=1.2345678901234567, w_d=0.1, gamma=0.33, iterations=7)
    save_params(tmp_path / "p.txt", p)
    assert load_params(tmp_path / "p.txt") == p
    (tmp_path / "bad.txt").write_text("w_u=1\nfoo=2\n")
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.txt")


def test_gt_labels_one_successor(windows):
    _, ts = scene_tracklets(SceneConfig(n_targets=6, n_frames=80, crossings=2, seed=78))
    from crftrack.graph import build_nodes

    nodes = build_nodes(ts, 20, LogisticUnaryProvider())
    y = node_gt_labels(nodes)
    linked = [(v.first.id, v.second.id) for v, x in zip(nodes, y) if x]
    assert len({a for a, _ in linked}) == len(linked) and len({b for _, b in linked}) == len(linked)
    for v, x in zip(nodes, y):
        if x:
            assert v.first.identity() == v.second.identity()


@pytest.fixture(scope="module")
def fitted():
    return fit_providers(training_windows([1000, 1001]))


def test_fitted_unary_confident_on_positives(fitted):
    unary, _ = fitted
    held = training_windows([2000])
    x = np.vstack([w.unary_design for w in held])
    y = np.concatenate([w.gt_labels for w in held])
    z = unary.prob_from_design(x)
    assert unary.prob_from_design(np.array([1.0, 0.0, 0.0, 1 / 20])) > 0.9
    assert np.median(z[y == 1]) > 0.9
    assert np.mean(z[y == 0] > 0.5) < 0.02


def test_default_pair_provider_repels():
    # shipped weights; held-out scene
    _, ts = scene_tracklets(ablation_config(2001))
    p = LogisticPairProvider()
    for w in windows_from_tracklets(ts, pair_provider=p):
        if not len(w.edges):
            continue
        rep = w.pair_design_i[:, -1] > 0
        zi, zj = p.prob_from_design(w.pair_design_i), p.prob_from_design(w.pair_design_j)
        assert np.all((zi * zj)[rep] < 0.25)
