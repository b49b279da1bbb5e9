import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crftrack.association import (
    UNASSIGNED,
    associate_crf,
    associate_unary,
    check_one_to_one,
    hungarian,
    interpolate,
    sliding_windows,
    stitch,
    two_round,
)
from crftrack.core import ContractViolation, CrfParams, Detection, Track
from crftrack.graph import build_graph, build_nodes
from crftrack.inference import decode, infer
from crftrack.metrics import evaluate
from crftrack.potentials import LogisticPairProvider, LogisticUnaryProvider, TableUnaryProvider
from crftrack.simulate import SceneConfig, generate_scene
from crftrack.tracklets import link_detections

from conftest import node, straight_tracklet


class TestWindows:
    def test_examples(self):
        assert sliding_windows(200, 200, 0.5) == [range(0, 200)]
        assert sliding_windows(300, 200, 0.5) == [range(0, 200), range(100, 300)]
        assert sliding_windows(0) == []

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 2000), st.integers(1, 300), st.floats(0, 0.9))
    def test_cover_everything(self, n, size, overlap):
        ws = sliding_windows(n, size, overlap)
        assert ws[0].start == 0 and ws[-1].stop == n
        assert all(len(w) <= size for w in ws)
        assert all(b.start <= a.stop for a, b in zip(ws, ws[1:]))


class TestHungarian:
    def test_identity(self):
        c = 1 - np.eye(3)
        assert hungarian(c) == [0, 1, 2]

    def test_against_permutations(self):
        c = np.array([[4, 1, 3], [2, 0, 5], [3, 2, 2]], float)
        best = min(itertools.permutations(range(3)), key=lambda p: sum(c[r, p[r]] for r in range(3)))
        assert sum(c[r, best[r]] for r in range(3)) == 5
        a = hungarian(c)
        assert a == [1, 0, 2] and sum(c[r, a[r]] for r in range(3)) == 5

    def test_threshold(self):
        assert hungarian([[0.4]], 0.5) == [0]
        assert hungarian([[0.6]], 0.5) == [UNASSIGNED]

    def test_forbidden(self):
        assert hungarian([[np.inf, 1.0], [np.inf, 2.0]]) in ([UNASSIGNED, 1], [1, UNASSIGNED])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4))
    def test_optional_matching_brute_force(self, seed, n, m):
        rng = np.random.default_rng(seed)
        c = rng.uniform(0, 2, (n, m))
        c0 = 1.0
        a = hungarian(c, c0)
        # brute force over partial matchings: each matched pair costs c[r, col],
        # each unmatched row/column pair costs c0 in total
        def cost(assign):
            used = [x for x in assign if x != UNASSIGNED]
            if len(set(used)) != len(used):
                return np.inf
            return sum(c[r, x] for r, x in enumerate(assign) if x != UNASSIGNED) + 0.5 * c0 * (n - len(used)) + 0.5 * c0 * (m - len(used))
        best = min(cost(p) for p in itertools.product([UNASSIGNED, *range(m)], repeat=n))
        assert cost(a) == pytest.approx(best, abs=1e-12)


class TestUnaryBaseline:
    def _nodes(self, z):
        a = straight_tracklet(0, 1, 5, (0, 0), (1, 0))
        b = straight_tracklet(1, 8, 5, (8, 0), (1, 0))
        return [node(0, a, b, z)]

    def test_confident_link(self):
        assert associate_unary(self._nodes(0.9)).labels.tolist() == [1]

    def test_weak_link(self):
        assert associate_unary(self._nodes(0.4)).labels.tolist() == [0]

    def test_one_to_one_on_scene(self):
        scene = generate_scene(SceneConfig(n_targets=8, crossings=3, seed=6))
        nodes = build_nodes(link_detections(scene.detections), 20, LogisticUnaryProvider())
        check_one_to_one(associate_unary(nodes).links())


class TestStitch:
    def test_chain(self):
        ts = [straight_tracklet(k, 1 + 10 * k, 5, (10 * k, 0), (1, 0)) for k in range(3)]
        tracks = stitch(ts, [(0, 1), (1, 2)])
        assert len(tracks) == 1 and tracks[0].t_s == 1 and tracks[0].t_e == 25

    def test_no_links(self):
        ts = [straight_tracklet(k, 1 + 10 * k, 5, (10 * k, 0), (1, 0)) for k in range(4)]
        assert len(stitch(ts, [])) == 4

    def test_forest_count(self, rng):
        ts = [straight_tracklet(k, 1 + 10 * k, 5, (0, 0), (1, 0)) for k in range(10)]
        links = [(k, k + 1) for k in range(9) if rng.random() < 0.5]
        assert len(stitch(ts, links)) == 10 - len(links)

    def test_branching_rejected(self):
        ts = [straight_tracklet(k, 1 + 10 * k, 5, (0, 0), (1, 0)) for k in range(3)]
        with pytest.raises(ContractViolation):
            stitch(ts, [(0, 1), (0, 2)])
        with pytest.raises(ContractViolation):
            stitch(ts, [(0, 2), (1, 2)])

    def test_cycle_rejected(self):
        ts = [straight_tracklet(k, 1 + 10 * k, 5, (0, 0), (1, 0)) for k in range(2)]
        with pytest.raises(ContractViolation):
            stitch(ts, [(0, 1), (1, 0)])


class TestInterpolate:
    def test_example(self):
        t = Track(1, (Detection.from_center(10, (0, 0), (10, 20)), Detection.from_center(13, (9, 3), (16, 26))))
        out = interpolate(t)
        assert out.frames == [10, 11, 12, 13]
        assert out.detections[1].center == pytest.approx((3, 1)) and out.detections[2].center == pytest.approx((6, 2))
        assert out.detections[1].size == pytest.approx((12, 22))
        assert out.interpolated == (False, True, True, False)

    def test_no_gap_unchanged(self):
        t = Track(1, tuple(Detection.from_center(f, (f, 0), (5, 5)) for f in (1, 2, 3)))
        assert interpolate(t).detections == t.detections


class TestCrf:
    def test_small_graph_equals_direct(self):
        scene = generate_scene(SceneConfig(n_targets=4, n_frames=60, crossings=1, seed=8))
        nodes = build_nodes(link_detections(scene.detections), 20, LogisticUnaryProvider())
        assert 0 < len(nodes) <= 200
        res = associate_crf(nodes, CrfParams(), LogisticPairProvider())
        g = build_graph(nodes, LogisticPairProvider())
        p = g.potentials(CrfParams())
        assert np.array_equal(res.labels, decode(infer(p, CrfParams()).final_q, p))

    def test_never_two_successors(self):
        scene = generate_scene(SceneConfig(n_targets=10, crossings=4, miss_rate=0.15, seed=12))
        nodes = build_nodes(link_detections(scene.detections), 20, LogisticUnaryProvider())
        res = associate_crf(nodes, CrfParams(window_size=60), LogisticPairProvider())
        check_one_to_one(res.links())

    def test_threaded_matches_serial(self):
        scene = generate_scene(SceneConfig(n_targets=8, crossings=3, seed=13))
        nodes = build_nodes(link_detections(scene.detections), 20, LogisticUnaryProvider())
        a = associate_crf(nodes, CrfParams(window_size=50), LogisticPairProvider(), jobs=1)
        b = associate_crf(nodes, CrfParams(window_size=50), LogisticPairProvider(), jobs=3)
        assert np.array_equal(a.labels, b.labels)

    def test_two_targets_crossing_no_switch(self):
        cfg = SceneConfig(n_targets=2, n_frames=100, crossings=1, miss_rate=0.1, fp_rate=0.0, position_noise=1.0, seed=21)
        scene = generate_scene(cfg)
        tracks, _ = two_round(link_detections(scene.detections), mode="crf")
        assert evaluate(scene.gt, tracks).IDS == 0


class TestTwoRound:
    def test_long_occlusion_linked_in_round_two(self):
        a = straight_tracklet(0, 1, 20, (100, 100), (2, 0))
        b = straight_tracklet(1, 20 + 36, 20, (100 + 2 * 55, 100), (2, 0))  # 35 missing frames
        table = TableUnaryProvider({}, default=(0.1, 0.9))
        tracks, rounds = two_round([a, b], unary_provider=table, mode="unary")
        assert rounds[0].result.links() == []
        assert len(rounds[1].result.links()) == 1
        assert len(tracks) == 1 and tracks[0].frames == list(range(1, 76))

    def test_single_tracklet_passes_through(self):
        a = straight_tracklet(0, 1, 10, (0, 0), (1, 0))
        tracks, _ = two_round([a])
        assert len(tracks) == 1 and [d.center for d in tracks[0].detections] == [d.center for d in a.detections]

    def test_modes_share_tracklets(self):
        scene = generate_scene(SceneConfig(n_targets=5, crossings=2, seed=30))
        ts = link_detections(scene.detections)
        _, ru = two_round(ts, mode="unary")
        _, rc = two_round(ts, mode="crf")
        assert ru[0].tracklets == rc[0].tracklets
        assert [v.key for v in ru[0].result.nodes] == [v.key for v in rc[0].result.nodes]


def test_output_partitions_detections():
    scene = generate_scene(SceneConfig(n_targets=8, crossings=3, miss_rate=0.1, seed=31))
    ts = link_detections(scene.detections)
    for mode in ("unary", "crf"):
        tracks, _ = two_round(ts, mode=mode)
        used = [d for t in tracks for d, f in zip(t.detections, t.interpolated) if not f]
        assert len(used) == sum(len(t) for t in ts)
        assert {id(d) for d in used} == {id(d) for t in ts for d in t.detections}
