import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crftrack.core import CONSISTENCY, REPELLENCY, ContractViolation, CrfNode
from crftrack.graph import DifficultPairConfig, attach_joint_probabilities, build_graph, build_nodes, find_difficult_pairs
from crftrack.potentials import (
    PAIR_FEATURES,
    LogisticPairProvider,
    LogisticUnaryProvider,
    TablePairProvider,
    TableUnaryProvider,
    feature_dimension,
    joint_probability,
    load_provider,
    motion_feature_nodepair,
    motion_feature_pair,
    node_pair_feature,
    pair_designs_batch,
    pairwise_potential,
    read_probability_table,
    save_provider,
    swap_pair_feature,
    unary_potential,
    unary_probability,
    write_probability_table,
    zero_pair_provider,
    zero_unary_provider,
)
from crftrack.simulate import SceneConfig, generate_scene
from crftrack.tracklets import link_detections, make_tracklet

from conftest import node, straight_tracklet


def unit_vec(rng, d=16):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


class TestNodes:
    def _pair(self, gap):
        a = straight_tracklet(0, 1, 5, (0, 0), (1, 0))
        b = straight_tracklet(1, a.t_e + gap, 5, (10, 0), (1, 0))
        return a, b

    def test_gap_five_one_node(self):
        assert len(build_nodes(self._pair(5), 20, zero_unary_provider())) == 1

    @pytest.mark.parametrize("gap", [0, 20])
    def test_strict_bounds(self, gap):
        if gap == 0:
            a = straight_tracklet(0, 1, 5, (0, 0), (1, 0))
            b = straight_tracklet(1, 5, 5, (10, 0), (1, 0))  # starts on a's last frame
            assert build_nodes([a, b], 20, zero_unary_provider()) == []
        else:
            assert build_nodes(self._pair(gap), 20, zero_unary_provider()) == []

    def test_brute_force_enumeration(self, rng):
        ts = []
        for k in range(9):
            start = int(rng.integers(1, 60))
            ts.append(straight_tracklet(k, start, int(rng.integers(1, 12)), rng.uniform(0, 500, 2), rng.normal(size=2)))
        nodes = build_nodes(ts, 20, zero_unary_provider())
        want = {(a.id, b.id) for a, b in itertools.permutations(ts, 2) if 0 < b.t_s - a.t_e < 20}
        assert {(v.first.id, v.second.id) for v in nodes} == want
        keys = [(v.second.t_s, v.first.t_e, v.first.id, v.second.id) for v in nodes]
        assert keys == sorted(keys)

    def test_node_requires_forward_gap(self):
        a = straight_tracklet(0, 1, 5, (0, 0), (1, 0))
        with pytest.raises(ContractViolation):
            CrfNode(0, a, a, (0.5, 0.5))


class TestDifficultPairs:
    def test_shared_first_is_repellency(self):
        a = straight_tracklet(0, 1, 5, (0, 0), (1, 0))
        b = straight_tracklet(1, 10, 5, (500, 0), (1, 0))
        c = straight_tracklet(2, 12, 5, (900, 400), (1, 0))
        edges = find_difficult_pairs([node(0, a, b), node(1, a, c)])
        assert [(e.i, e.j, e.kind) for e in edges] == [(0, 1, REPELLENCY)]

    def test_tail_close_is_consistency(self):
        i1 = straight_tracklet(0, 1, 10, (0, 0), (0, 0))
        j1 = straight_tracklet(1, 1, 11, (5, 0), (0, 0))  # ends 1 frame later, 5 px away
        i2 = straight_tracklet(2, 20, 5, (600, 0), (0, 0))
        j2 = straight_tracklet(3, 22, 5, (0, 600), (0, 0))
        cfg = DifficultPairConfig(tau_close=50)
        edges = find_difficult_pairs([node(0, i1, i2), node(1, j1, j2)], cfg)
        assert [(e.i, e.j, e.kind) for e in edges] == [(0, 1, CONSISTENCY)]

    def test_far_apart_no_edge(self):
        i1 = straight_tracklet(0, 1, 5, (0, 0), (0, 0))
        i2 = straight_tracklet(1, 10, 5, (10, 0), (0, 0))
        j1 = straight_tracklet(2, 100, 5, (900, 600), (0, 0))
        j2 = straight_tracklet(3, 110, 5, (910, 600), (0, 0))
        assert find_difficult_pairs([node(0, i1, i2), node(1, j1, j2)], DifficultPairConfig(tau_close=50)) == []

    def test_chain_is_not_an_edge(self):
        a = straight_tracklet(0, 1, 5, (0, 0), (0, 0))
        b = straight_tracklet(1, 8, 5, (0, 0), (0, 0))
        c = straight_tracklet(2, 15, 5, (0, 0), (0, 0))
        assert find_difficult_pairs([node(0, a, b), node(1, b, c)]) == []

    def test_scene_invariants(self):
        scene = generate_scene(SceneConfig(n_targets=6, n_frames=60, crossings=2, seed=4))
        ts = link_detections(scene.detections)
        nodes = build_nodes(ts, 20, LogisticUnaryProvider())
        edges = find_difficult_pairs(nodes)
        rev = find_difficult_pairs(list(reversed(nodes)))
        assert {(e.i, e.j, e.kind) for e in edges} == {(e.i, e.j, e.kind) for e in rev}
        pos = {v.index: v for v in nodes}
        keys = [(e.i, e.j) for e in edges]
        assert len(keys) == len(set(keys)) and all(i < j for i, j in keys)
        for e in edges:
            u, v = pos[e.i], pos[e.j]
            if e.kind == REPELLENCY:
                assert (u.first.id == v.first.id) != (u.second.id == v.second.id)


class TestMotionFeatures:
    def test_perfect_continuation(self):
        tk = straight_tracklet(0, 1, 1, (0, 0), (1, 0))
        tk = make_tracklet(0, tk.detections)
        tk = type(tk)(0, tk.detections, np.array([1.0, 0]), np.array([1.0, 0]))
        tm = type(tk)(1, straight_tracklet(1, 6, 1, (5, 0), (0, 0)).detections, np.array([1.0, 0]), np.array([1.0, 0]))
        mf = motion_feature_pair(tk, tm)
        assert np.array_equal(mf.dp1, (0, 0)) and np.array_equal(mf.dp2, (0, 0))

    def test_stationary(self):
        tk = straight_tracklet(0, 1, 3, (0, 0), (0, 0))
        tm = straight_tracklet(1, 6, 3, (10, 0), (0, 0))
        mf = motion_feature_pair(tk, tm)
        assert np.array_equal(mf.dp1, (-10, 0)) and np.array_equal(mf.dp2, (10, 0))

    def test_nonpositive_gap(self):
        tk = straight_tracklet(0, 1, 3, (0, 0), (0, 0))
        with pytest.raises(ContractViolation):
            motion_feature_pair(tk, straight_tracklet(1, 3, 3, (0, 0), (0, 0)))

    def test_random_against_direct_formula(self, rng):
        for _ in range(30):
            tk = straight_tracklet(0, 1, 6, rng.uniform(0, 100, 2), rng.normal(size=2))
            tm = straight_tracklet(1, 6 + int(rng.integers(1, 10)), 6, rng.uniform(0, 100, 2), rng.normal(size=2))
            g = tm.t_s - tk.t_e
            p_k, p_m = np.array(tk.detections[-1].center), np.array(tm.detections[0].center)
            mf = motion_feature_pair(tk, tm)
            assert np.allclose(mf.dp1, p_k + tk.tail_velocity * g - p_m, rtol=0, atol=1e-12)
            assert np.allclose(mf.dp2, p_m - tm.head_velocity * g - p_k, rtol=0, atol=1e-12)

    def test_nodepair_translation(self):
        d = 30.0
        i1 = straight_tracklet(0, 1, 5, (0, 0), (1, 0))
        i2 = straight_tracklet(1, 10, 5, (10, 0), (1, 0))
        j1 = straight_tracklet(2, 1, 5, (d, 0), (1, 0))
        j2 = straight_tracklet(3, 10, 5, (10 + d, 0), (1, 0))
        f = motion_feature_nodepair(node(0, i1, i2), node(1, j1, j2))
        assert np.allclose(f.dp1, (-d, 0)) and np.allclose(f.dp2, (-d, 0))
        g = motion_feature_nodepair(node(1, j1, j2), node(0, i1, i2))
        assert np.allclose(g.dp1, (d, 0)) and np.allclose(g.dp2, (d, 0))

    def test_nodepair_stationary_same_end(self):
        i1 = straight_tracklet(0, 1, 5, (3, 4), (0, 0))
        j1 = straight_tracklet(1, 1, 5, (40, -7), (0, 0))
        i2 = straight_tracklet(2, 9, 5, (100, 0), (0, 0))
        j2 = straight_tracklet(3, 9, 5, (0, 100), (0, 0))
        f = motion_feature_nodepair(node(0, i1, i2), node(1, j1, j2))
        assert np.array_equal(f.dp2, np.subtract((3, 4), (40, -7)))

    def test_nodepair_random_formula(self, rng):
        for _ in range(20):
            ts = [straight_tracklet(k, s, 6, rng.uniform(0, 200, 2), rng.normal(size=2)) for k, s in enumerate((1, 3, 12, 15))]
            vi, vj = node(0, ts[0], ts[2]), node(1, ts[1], ts[3])
            tx = min(ts[0].t_e, ts[1].t_e)
            bi = ts[2].head - ts[2].head_velocity * (ts[2].t_s - tx)
            bj = ts[3].head - ts[3].head_velocity * (ts[3].t_s - tx)
            f = motion_feature_nodepair(vi, vj)
            assert np.allclose(f.dp1, bi - bj, atol=1e-12)
            assert np.allclose(f.dp2, ts[0].center_at(tx) - ts[1].center_at(tx), atol=1e-12)


class TestPairFeature:
    def _nodes(self, rng, d=16):
        ts = [straight_tracklet(k, s, 6, rng.uniform(0, 200, 2), rng.normal(size=2), appearance=unit_vec(rng, d))
              for k, s in enumerate((1, 3, 12, 15))]
        return node(0, ts[0], ts[2]), node(1, ts[1], ts[3])

    @pytest.mark.parametrize("d,n", [(16, 84), (128, 532)])
    def test_dimension(self, rng, d, n):
        vi, vj = self._nodes(rng, d)
        assert feature_dimension(d) == n
        assert node_pair_feature(vi, vj, d).shape == (n,)

    def test_swap_matches_recompute(self, rng):
        for _ in range(10):
            vi, vj = self._nodes(rng)
            f = node_pair_feature(vi, vj)
            assert np.allclose(swap_pair_feature(f, 16), node_pair_feature(vj, vi), atol=1e-12)

    def test_batch_matches_per_edge(self):
        scene = generate_scene(SceneConfig(n_targets=6, n_frames=80, crossings=2, seed=9))
        nodes = build_nodes(link_detections(scene.detections), 20, LogisticUnaryProvider())
        pos = {v.index: v for v in nodes}
        edges = find_difficult_pairs(nodes)
        pairs = [(pos[e.i], pos[e.j]) for e in edges]
        assert pairs
        p = LogisticPairProvider()
        xi, xj = pair_designs_batch(pairs)
        ref = np.array([np.concatenate(p.designs(a, b)) for a, b in pairs])
        assert xi.shape == (len(pairs), PAIR_FEATURES)
        assert np.allclose(np.hstack([xi, xj]), ref, rtol=0, atol=1e-12)


class TestPotentials:
    def test_unary_values(self):
        assert unary_potential(1.0, 1.0, 0.0) == 0.0
        assert unary_potential(0.5, 1.0, 0.0) == pytest.approx(math.log(2), abs=1e-12)
        assert unary_potential(0.9, 2.0, 1e-6) == pytest.approx(-2 * math.log(0.900001), rel=1e-14)
        assert unary_potential(0.9, 2.0, 1e-6) == pytest.approx(0.210719, abs=1e-6)

    def test_pairwise_values(self):
        assert pairwise_potential(1.0, 1.0, 1.0, 0.0)[1, 1] == 0.0
        assert np.allclose(pairwise_potential(0.5, 0.5, 1.0, 0.0), 2 * math.log(2), atol=1e-12)
        t = pairwise_potential(0.8, 0.6, 1.0, 0.0)
        want = {(1, 1): 0.733969, (1, 0): 1.139434, (0, 1): 2.120264, (0, 0): 2.525729}
        for k, v in want.items():
            assert t[k] == pytest.approx(v, abs=1e-6)
        assert t[1, 0] == pytest.approx(-math.log(0.8 * 0.4), rel=1e-14)


class TestProviders:
    def test_zero_providers_half(self):
        a = straight_tracklet(0, 1, 5, (0, 0), (1, 0))
        b = straight_tracklet(1, 8, 5, (9, 0), (1, 0))
        c = straight_tracklet(2, 9, 5, (50, 0), (1, 0))
        assert unary_probability((a, b), zero_unary_provider()) == (0.5, 0.5)
        assert joint_probability(node(0, a, b), node(1, a, c), zero_pair_provider()) == (0.5, 0.5)

    def test_clamped(self):
        a = straight_tracklet(0, 1, 5, (0, 0), (1, 0))
        b = straight_tracklet(1, 8, 5, (9, 0), (1, 0))
        assert unary_probability((a, b), TableUnaryProvider({"0->1": (0.0, 1.0)})) == pytest.approx((1e-6, 1 - 1e-6), abs=1e-15)
        assert unary_probability((a, b), TableUnaryProvider({"0->1": (1.0, 0.0)}))[1] == 1e-6
        assert unary_probability((a, b), TableUnaryProvider({"0->1": (0.25, 0.75)})) == (0.25, 0.75)

    def test_table_replay_bit_exact(self, tmp_path):
        vals = {"0->1": (0.123456789012345, 0.876543210987655), "2->3": (0.3, 0.7)}
        p = tmp_path / "t.csv"
        write_probability_table(p, vals)
        back = read_probability_table(p)
        assert back == vals
        a = straight_tracklet(0, 1, 5, (0, 0), (1, 0))
        b = straight_tracklet(1, 8, 5, (9, 0), (1, 0))
        assert TableUnaryProvider(back).probability(a, b) == vals["0->1"]

    def test_table_pair_reverse_lookup(self):
        a = straight_tracklet(0, 1, 5, (0, 0), (1, 0))
        b = straight_tracklet(1, 8, 5, (9, 0), (1, 0))
        c = straight_tracklet(2, 9, 5, (50, 0), (1, 0))
        prov = TablePairProvider({"0->1|0->2": (0.2, 0.9)})
        assert prov.probability(node(0, a, c), node(1, a, b)) == (0.9, 0.2)

    def test_save_load_round_trip(self, tmp_path):
        for prov in (LogisticUnaryProvider(), LogisticPairProvider()):
            path = tmp_path / f"{prov.kind}.txt"
            save_provider(path, prov)
            assert np.array_equal(load_provider(path).get_params(), prov.get_params())

    def test_deterministic(self):
        scene = generate_scene(SceneConfig(n_targets=4, n_frames=50, crossings=1, seed=1))
        nodes = build_nodes(link_detections(scene.detections), 20, LogisticUnaryProvider())
        g1 = build_graph(nodes, LogisticPairProvider())
        g2 = build_graph(nodes, LogisticPairProvider())
        assert np.array_equal(g1.joint_probs(), g2.joint_probs())
        assert np.array_equal(g1.unary_probs(), g2.unary_probs())

    def test_batch_and_loop_paths_agree(self):
        scene = generate_scene(SceneConfig(n_targets=5, n_frames=60, crossings=2, seed=2))
        nodes = build_nodes(link_detections(scene.detections), 20, LogisticUnaryProvider())
        edges = find_difficult_pairs(nodes)
        prov = LogisticPairProvider()
        fast = attach_joint_probabilities(nodes, edges, prov)
        pos = {v.index: v for v in nodes}
        slow = [joint_probability(pos[e.i], pos[e.j], prov) for e in edges]
        assert np.allclose([e.joint_prob for e in fast], slow, rtol=0, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 5))
def test_pairwise_table_matches_scalar_formula(zi, zj, w):
    t = pairwise_potential(zi, zj, w, 1e-6)
    pi, pj = (1 - zi, zi), (1 - zj, zj)
    for a in (0, 1):
        for b in (0, 1):
            assert t[a, b] == pytest.approx(-w * math.log(pi[a] * pj[b] + 1e-6), rel=1e-12, abs=1e-12)
