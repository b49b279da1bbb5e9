"""Windowed CRF association, the Hungarian unary-only baseline, stitching and
gap interpolation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ContractViolation, CrfNode, CrfParams, Detection, Track, Tracklet
from .graph import DifficultPairConfig, build_graph, build_nodes
from .inference import InferenceTrace, decode, infer, repair
from .potentials import LogisticPairProvider, LogisticUnaryProvider
from .tracklets import make_tracklet

log = logging.getLogger(__name__)

UNASSIGNED = -1


@dataclass
class AssociationResult:
    nodes: list[CrfNode]
    labels: np.ndarray
    traces: list[InferenceTrace] = field(default_factory=list)

    def links(self) -> list[tuple[int, int]]:
        return [(v.first.id, v.second.id) for v, x in zip(self.nodes, self.labels) if x == 1]


def sliding_windows(n_nodes: int, window_size: int = 200, overlap: float = 0.5) -> list[range]:
    if n_nodes <= 0:
        return []
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    step = max(1, math.ceil(window_size * (1.0 - overlap)))
    out, start = [], 0
    while True:
        out.append(range(start, min(start + window_size, n_nodes)))
        if start + window_size >= n_nodes:
            return out
        start += step


def _run_window(nodes, pair_provider, pair_cfg, params):
    g = build_graph(nodes, pair_provider, pair_cfg)
    trace = infer(g, params)
    return g, trace


def associate_crf(
    nodes: Sequence[CrfNode],
    params: CrfParams = CrfParams(),
    pair_provider=None,
    pair_cfg: DifficultPairConfig = DifficultPairConfig(),
    overlap: float = 0.5,
    jobs: int = 1,
) -> AssociationResult:
    """Label nodes by windowed inference + decoding.

    A node's label comes from the window in which it is not inside the
    trailing overlap (the part the next window also covers). A final global
    repair restores one successor / one predecessor per tracklet.
    """
    nodes = list(nodes)
    pair_provider = pair_provider or LogisticPairProvider()
    windows = sliding_windows(len(nodes), params.window_size, overlap)
    chunks = [[nodes[k] for k in w] for w in windows]
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(lambda c: _run_window(c, pair_provider, pair_cfg, params), chunks))
    else:
        results = [_run_window(c, pair_provider, pair_cfg, params) for c in chunks]

    labels = np.zeros(len(nodes), dtype=np.int64)
    score = np.zeros(len(nodes))
    traces = []
    for w, (win, (g, trace)) in enumerate(zip(windows, results)):
        # the window owns [its start, next window's start); later nodes are provisional
        owned_until = windows[w + 1].start if w + 1 < len(windows) else win.stop
        local = decode(trace.final_q, g.potentials(params))
        for pos, k in enumerate(win):
            if k < owned_until:
                labels[k] = local[pos]
                score[k] = trace.final_q[pos, 1]
        traces.append(trace)
    first = np.array([v.first.id for v in nodes], dtype=np.int64)
    second = np.array([v.second.id for v in nodes], dtype=np.int64)
    labels = repair(labels, score, first, second)
    return AssociationResult(nodes, labels, traces)


def hungarian(cost, no_assign_cost: Optional[float] = None) -> list[int]:
    """Minimum-cost matching; returns the column of each row or -1.

    Infinite entries are forbidden pairs. With `no_assign_cost` each row and
    column may instead stay unmatched at that price.
    """
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    if n == 0 or m == 0:
        return [UNASSIGNED] * n
    big = 1e12
    if no_assign_cost is None:
        finite = np.where(np.isfinite(c), c, big)
        rows, cols = linear_sum_assignment(finite)
        out = [UNASSIGNED] * n
        for r, col in zip(rows, cols):
            if np.isfinite(c[r, col]):
                out[r] = int(col)
        return out
    aug = np.full((n + m, m + n), big)
    aug[:n, :m] = np.where(np.isfinite(c), c, big)
    # an unmatched row and an unmatched column together cost exactly c0
    aug[np.arange(n), m + np.arange(n)] = 0.5 * no_assign_cost
    aug[n + np.arange(m), np.arange(m)] = 0.5 * no_assign_cost
    aug[n:, m:] = 0.0
    rows, cols = linear_sum_assignment(aug)
    out = [UNASSIGNED] * n
    for r, col in zip(rows, cols):
        if r < n and col < m and np.isfinite(c[r, col]) and aug[r, col] < big:
            out[r] = int(col)
    return out


def associate_unary(nodes: Sequence[CrfNode], params: CrfParams = CrfParams()) -> AssociationResult:
    """Unary-only baseline: one bipartite matching of predecessors to successors
    with cost -ln(z1 + eps) and no-link cost -ln(0.5)."""
    nodes = list(nodes)
    labels = np.zeros(len(nodes), dtype=np.int64)
    if not nodes:
        return AssociationResult(nodes, labels)
    rows = sorted({v.first.id for v in nodes})
    cols = sorted({v.second.id for v in nodes})
    ri = {t: k for k, t in enumerate(rows)}
    ci = {t: k for k, t in enumerate(cols)}
    cost = np.full((len(rows), len(cols)), np.inf)
    where = {}
    for k, v in enumerate(nodes):
        r, c = ri[v.first.id], ci[v.second.id]
        cost[r, c] = -math.log(v.unary_prob[1] + params.epsilon)
        where[(r, c)] = k
    assign = hungarian(cost, -math.log(0.5))
    for r, c in enumerate(assign):
        if c != UNASSIGNED:
            labels[where[(r, c)]] = 1
    return AssociationResult(nodes, labels)


def check_one_to_one(links: Sequence[tuple[int, int]]) -> None:
    """Raise if a tracklet has two successors or two predecessors."""
    succ, pred = {}, {}
    for a, b in links:
        if a in succ:
            raise ContractViolation(f"tracklet {a} linked to two successors ({succ[a]}, {b})")
        if b in pred:
            raise ContractViolation(f"tracklet {b} linked from two predecessors ({pred[b]}, {a})")
        succ[a], pred[b] = b, a


def stitch(tracklets: Sequence[Tracklet], links: Sequence[tuple[int, int]]) -> list[Track]:
    """Join linked tracklets into tracks; ids follow earliest start frame."""
    check_one_to_one(links)
    by_id = {t.id: t for t in tracklets}
    succ = dict(links)
    has_pred = {b for _, b in links}
    chains, seen = [], set()
    for t in sorted(tracklets, key=lambda t: (t.t_s, t.id)):
        if t.id in has_pred:
            continue
        chain, cur = [], t.id
        while cur is not None:
            if cur in seen:
                raise ContractViolation(f"cyclic links through tracklet {cur}")
            seen.add(cur)
            chain.append(by_id[cur])
            cur = succ.get(cur)
        chains.append(chain)
    if len(seen) != len(by_id):
        raise ContractViolation("cyclic links")
    tracks = []
    for k, chain in enumerate(chains):
        dets, flags = [], []
        for piece in chain:
            if dets and piece.t_s <= dets[-1].frame:
                raise ContractViolation(f"linked tracklets overlap in time at {piece.id}")
            dets.extend(piece.detections)
            flags.extend(piece.interpolated)
        tracks.append(Track(k + 1, tuple(dets), tuple(flags)))
    return tracks


def interpolate(track: Track) -> Track:
    """Fill frame gaps with linearly interpolated boxes (confidence 0)."""
    dets, flags = [], []
    for k, d in enumerate(track.detections):
        if dets:
            prev = dets[-1]
            gap = d.frame - prev.frame
            for s in range(1, gap):
                a = s / gap
                c = (1 - a) * np.array(prev.center) + a * np.array(d.center)
                sz = (1 - a) * np.array(prev.size) + a * np.array(d.size)
                dets.append(Detection.from_center(prev.frame + s, c, sz, confidence=0.0))
                flags.append(True)
        dets.append(d)
        flags.append(track.interpolated[k])
    return Track(track.id, tuple(dets), tuple(flags))


def tracks_to_tracklets(tracks: Sequence[Track], velocity_window: int = 5) -> list[Tracklet]:
    out = []
    for k, t in enumerate(tracks):
        full = interpolate(t)
        out.append(make_tracklet(k, full.detections, velocity_window, full.interpolated))
    return out


@dataclass
class RoundOutput:
    tracklets: list[Tracklet]
    result: AssociationResult
    tracks: list[Track]


def associate_round(
    tracklets: Sequence[Tracklet],
    t_thr: int,
    mode: str,
    params: CrfParams,
    unary_provider,
    pair_provider,
    pair_cfg: DifficultPairConfig = DifficultPairConfig(),
    jobs: int = 1,
) -> RoundOutput:
    nodes = build_nodes(tracklets, t_thr, unary_provider)
    if mode == "unary":
        res = associate_unary(nodes, params)
    elif mode == "crf":
        res = associate_crf(nodes, params, pair_provider, pair_cfg, jobs=jobs)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return RoundOutput(list(tracklets), res, stitch(tracklets, res.links()))


def two_round(
    tracklets: Sequence[Tracklet],
    params: CrfParams = CrfParams(),
    unary_provider=None,
    pair_provider=None,
    mode: str = "crf",
    pair_cfg: DifficultPairConfig = DifficultPairConfig(),
    velocity_window: int = 5,
    jobs: int = 1,
) -> tuple[list[Track], list[RoundOutput]]:
    """Associate with T_thr_round1, re-associate the stitched output with
    T_thr_round2, and interpolate the final tracks."""
    unary_provider = unary_provider or LogisticUnaryProvider()
    pair_provider = pair_provider or LogisticPairProvider()
    r1 = associate_round(tracklets, params.T_thr_round1, mode, params, unary_provider, pair_provider, pair_cfg, jobs)
    mid = tracks_to_tracklets(r1.tracks, velocity_window)
    r2 = associate_round(mid, params.T_thr_round2, mode, params, unary_provider, pair_provider, pair_cfg, jobs)
    final = [interpolate(t) for t in r2.tracks]
    return final, [r1, r2]

