"""Frame-to-frame linking of detections into short, reliable tracklets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import ContractViolation, Detection, Tracklet

HEAD = "head"
TAIL = "tail"


@dataclass(frozen=True)
class LinkThresholds:
    """Two-threshold linking: an affinity must clear `theta_high` and beat
    every conflicting affinity by `theta_margin`."""

    theta_high: float = 0.5
    theta_margin: float = 0.1
    sigma_size: float = 0.3
    sigma_position: Optional[float] = None  # None: mean box diagonal of the pair

    def __post_init__(self):
        if not 0.0 < self.theta_high < 1.0:
            raise ValueError("theta_high must lie in (0, 1)")
        if self.theta_margin < 0:
            raise ValueError("theta_margin must be non-negative")


def frame_affinity(a: Detection, b: Detection, thr: LinkThresholds = LinkThresholds()) -> float:
    """Affinity in [0, 1] between detections in adjacent frames."""
    if b.frame != a.frame + 1:
        raise ContractViolation(f"affinity needs adjacent frames, got {a.frame} and {b.frame}")
    sigma_p = thr.sigma_position or 0.5 * (a.diagonal + b.diagonal)
    dc = np.subtract(a.center, b.center)
    pos = np.exp(-float(dc @ dc) / (2.0 * sigma_p**2))
    ds = np.abs(np.subtract(a.size, b.size)).sum() / float(np.sum(a.size))
    size = np.exp(-(ds**2) / (2.0 * thr.sigma_size**2))
    app = 1.0
    if a.appearance is not None and b.appearance is not None:
        cos = float(a.appearance @ b.appearance)
        app = (1.0 + min(1.0, max(-1.0, cos))) / 2.0
    return float(pos * size * app)


def _affinity_matrix(prev: Sequence[Detection], cur: Sequence[Detection], thr: LinkThresholds) -> np.ndarray:
    out = np.empty((len(prev), len(cur)))
    for r, a in enumerate(prev):
        for c, b in enumerate(cur):
            out[r, c] = frame_affinity(a, b, thr)
    return out


def _frame_links(aff: np.ndarray, thr: LinkThresholds) -> list[tuple[int, int]]:
    n, m = aff.shape
    if n == 0 or m == 0:
        return []
    # best conflicting affinity for (r, c): max over row r without c and column c without r
    candidates = []
    for r, c in zip(*np.nonzero(aff >= thr.theta_high)):
        row = np.delete(aff[r], c)
        col = np.delete(aff[:, c], r)
        rival = max(row.max(initial=0.0), col.max(initial=0.0))
        if aff[r, c] >= thr.theta_margin + rival:
            candidates.append((aff[r, c], r, c))
    candidates.sort(key=lambda x: (-x[0], x[1], x[2]))
    used_r, used_c, links = set(), set(), []
    for _, r, c in candidates:
        if r in used_r or c in used_c:
            continue
        used_r.add(r)
        used_c.add(c)
        links.append((int(r), int(c)))
    return links


def link_detections(
    frames: Iterable[Sequence[Detection]],
    thr: LinkThresholds = LinkThresholds(),
    velocity_window: int = 5,
    first_id: int = 0,
) -> list[Tracklet]:
    """Link per-frame detection lists into maximal chains.

    `frames` may be any iterable of detection lists; they are regrouped by
    frame number so gaps between frames simply end all chains.
    """
    by_frame: dict[int, list[Detection]] = {}
    for group in frames:
        for d in group:
            by_frame.setdefault(d.frame, []).append(d)
    if not by_frame:
        return []

    chains: list[list[Detection]] = []
    open_chain: dict[int, int] = {}  # index in previous frame list -> chain index
    prev: list[Detection] = []
    prev_frame = None
    for f in sorted(by_frame):
        cur = by_frame[f]
        links = []
        if prev_frame is not None and f == prev_frame + 1:
            links = _frame_links(_affinity_matrix(prev, cur, thr), thr)
        next_open = {}
        for r, c in links:
            k = open_chain[r]
            chains[k].append(cur[c])
            next_open[c] = k
        for c, d in enumerate(cur):
            if c not in next_open:
                chains.append([d])
                next_open[c] = len(chains) - 1
        open_chain, prev, prev_frame = next_open, cur, f

    chains.sort(key=lambda ch: (ch[0].frame, ch[0].center, ch[-1].frame))
    return [make_tracklet(first_id + k, ch, velocity_window) for k, ch in enumerate(chains)]


def _ls_slope(dets: Sequence[Detection]) -> np.ndarray:
    t = np.array([d.frame for d in dets], dtype=np.float64)
    p = np.array([d.center for d in dets], dtype=np.float64)
    t = t - t.mean()
    return (t @ (p - p.mean(axis=0))) / (t @ t)


def estimate_velocity(t, end: str = TAIL, window: int = 5) -> np.ndarray:
    """Least-squares velocity (px/frame) over the first/last `window` detections.

    Accepts a Tracklet or a plain detection sequence.
    """
    dets = t.detections if isinstance(t, Tracklet) else tuple(t)
    if len(dets) < 2:
        return np.zeros(2)
    if window < 2:
        raise ContractViolation("velocity window must be >= 2")
    k = min(window, len(dets))
    sel = dets[:k] if end == HEAD else dets[-k:]
    return _ls_slope(sel)


def most_confident_detection(t) -> Detection:
    """Highest-confidence detection; earliest frame wins ties."""
    dets = t.detections if isinstance(t, Tracklet) else tuple(t)
    if not dets:
        raise ContractViolation("empty tracklet")
    best = dets[0]
    for d in dets[1:]:
        if d.confidence > best.confidence:
            best = d
    return best


def make_tracklet(
    tracklet_id: int,
    detections: Sequence[Detection],
    velocity_window: int = 5,
    interpolated: Sequence[bool] = (),
) -> Tracklet:
    dets = tuple(detections)
    flags = tuple(interpolated) or (False,) * len(dets)
    real = [d for d, f in zip(dets, flags) if not f]
    rep = most_confident_detection(real or dets)
    return Tracklet(
        id=tracklet_id,
        detections=dets,
        head_velocity=estimate_velocity(dets, HEAD, velocity_window),
        tail_velocity=estimate_velocity(dets, TAIL, velocity_window),
        appearance=rep.appearance,
        interpolated=flags,
    )
