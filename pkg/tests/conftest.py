import numpy as np
import pytest

from crftrack.core import CrfNode, Detection
from crftrack.tracklets import make_tracklet


def straight_tracklet(tid, start, n, p0, v, size=(20.0, 50.0), appearance=None, window=5):
    """Noiseless constant-velocity tracklet starting at frame `start`."""
    p0, v = np.asarray(p0, float), np.asarray(v, float)
    dets = [Detection.from_center(start + k, p0 + k * v, size, appearance=appearance) for k in range(n)]
    return make_tracklet(tid, dets, window)


def node(index, a, b, z1=0.5):
    return CrfNode(index, a, b, (1.0 - z1, z1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
