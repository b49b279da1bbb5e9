import numpy as np
import pytest

from crftrack.core import Detection, Track
from crftrack.metrics import evaluate, frame_range, iou_matrix, restrict_frames
from crftrack.simulate import SceneConfig, generate_scene


def track(tid, frames, x0=0.0, y=0.0, step=5.0):
    return Track(tid, tuple(Detection.from_center(f, (x0 + step * f, y), (20, 40)) for f in frames))


def grid_gt():
    # ten targets, ten frames each, far apart vertically
    return [track(k + 1, range(1, 11), y=200.0 * k) for k in range(10)]


def test_identity_is_perfect():
    gt = grid_gt()
    r = evaluate(gt, gt)
    assert (r.MOTA, r.IDF1, r.IDS, r.FP, r.FN, r.FM, r.MT, r.ML) == (1.0, 1.0, 0, 0, 0, 0, 1.0, 0.0)
    assert r.MOTP == 1.0


def test_hand_fixture_mota():
    gt = grid_gt()
    res = [track(k + 1, range(1, 11), y=200.0 * k) for k in range(2, 9)]
    # targets 1 and 2 switch id halfway
    for k in range(2):
        res.append(track(k + 1, range(1, 6), y=200.0 * k))
        res.append(track(100 + k, range(6, 11), y=200.0 * k))
    # target 10 missed entirely, five clutter boxes
    res.append(track(999, range(1, 6), x0=5000.0, y=5000.0))
    r = evaluate(gt, res)
    assert (r.FP, r.FN, r.IDS, r.num_gt) == (5, 10, 2, 100)
    assert r.MOTA == pytest.approx(0.83, abs=1e-15)


def test_half_track_swap():
    gt = [track(1, range(1, 11))]
    res = [track(7, range(1, 6)), track(8, range(6, 11))]
    r = evaluate(gt, res)
    assert (r.IDS, r.FM, r.FP, r.FN) == (1, 0, 0, 0)
    assert r.IDF1 == 0.5


def test_fragment_counts_gap():
    gt = [track(1, range(1, 11))]
    res = [track(1, [1, 2, 3, 7, 8, 9, 10])]
    r = evaluate(gt, res)
    assert (r.FM, r.FN, r.IDS) == (1, 3, 0)


def test_scenes_self_perfect():
    for seed in range(3):
        gt = generate_scene(SceneConfig(n_targets=6, n_frames=60, crossings=2, seed=seed)).gt
        r = evaluate(gt, gt)
        assert r.MOTA == 1.0 and r.IDF1 == 1.0 and r.IDS == 0


def test_iou_matrix():
    a = np.array([[0, 0, 10, 10]], float)
    b = np.array([[5, 0, 10, 10], [20, 20, 1, 1]], float)
    assert np.allclose(iou_matrix(a, b), [[50 / 150, 0.0]])


def test_restrict_frames():
    gt = [track(1, range(1, 11)), track(2, range(8, 20))]
    assert frame_range(gt) == (1, 19)
    out = restrict_frames(gt, 5, 9)
    assert [t.frames for t in out] == [[5, 6, 7, 8, 9], [8, 9]]
    assert restrict_frames(gt, 30, 40) == []
