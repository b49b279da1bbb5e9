"""CRF graph construction: linkable tracklet pairs as nodes, difficult node
pairs as edges."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import CONSISTENCY, REPELLENCY, CrfEdge, CrfNode, CrfParams, Tracklet
from .inference import CrfPotentials
from .potentials import clamp_prob, joint_probability, unary_potential, unary_probability


@dataclass(frozen=True)
class DifficultPairConfig:
    """Endpoint proximity for consistency edges.

    `tau_close=None` uses `tau_scale` times the mean box width of the two
    tracklets being compared.
    """

    tau_close: Optional[float] = None
    delta_t: int = 10
    tau_scale: float = 2.0

    def __post_init__(self):
        if self.tau_close is not None and self.tau_close <= 0:
            raise ValueError("tau_close must be positive")
        if self.delta_t < 0:
            raise ValueError("delta_t must be non-negative")

    def radius(self, a: Tracklet, b: Tracklet) -> float:
        if self.tau_close is not None:
            return self.tau_close
        return self.tau_scale * 0.5 * (a.mean_width + b.mean_width)


def linkable(a: Tracklet, b: Tracklet, t_thr: int) -> bool:
    return 0 < b.t_s - a.t_e < t_thr


def build_nodes(tracklets: Sequence[Tracklet], t_thr: int, provider) -> list[CrfNode]:
    """One node per ordered linkable pair, in (second start, first end, ids) order."""
    by_start = sorted(tracklets, key=lambda t: (t.t_s, t.id))
    starts = np.array([t.t_s for t in by_start])
    pairs = []
    for a in tracklets:
        lo = np.searchsorted(starts, a.t_e + 1, side="left")
        hi = np.searchsorted(starts, a.t_e + t_thr, side="left")
        for b in by_start[lo:hi]:
            pairs.append((a, b))
    pairs.sort(key=lambda ab: (ab[1].t_s, ab[0].t_e, ab[0].id, ab[1].id))
    return [CrfNode(k, a, b, unary_probability((a, b), provider, t_thr)) for k, (a, b) in enumerate(pairs)]


def _tail_close(a: Tracklet, b: Tracklet, cfg: DifficultPairConfig) -> bool:
    if abs(a.t_e - b.t_e) > cfg.delta_t:
        return False
    f = min(a.t_e, b.t_e)
    return float(np.linalg.norm(a.center_at(f) - b.center_at(f))) <= cfg.radius(a, b)


def _head_close(a: Tracklet, b: Tracklet, cfg: DifficultPairConfig) -> bool:
    if abs(a.t_s - b.t_s) > cfg.delta_t:
        return False
    f = max(a.t_s, b.t_s)
    return float(np.linalg.norm(a.center_at(f) - b.center_at(f))) <= cfg.radius(a, b)


def find_difficult_pairs(nodes: Sequence[CrfNode], cfg: DifficultPairConfig = DifficultPairConfig()) -> list[CrfEdge]:
    """Repellency edges between nodes sharing a tracklet on the same side,
    consistency edges between nodes whose first tracklets are tail-close or
    whose second tracklets are head-close. Repellency wins when both apply;
    nodes chained through a shared tracklet (one's second is the other's
    first) get no edge."""
    by_first: dict[int, list[CrfNode]] = {}
    by_second: dict[int, list[CrfNode]] = {}
    for v in nodes:
        by_first.setdefault(v.first.id, []).append(v)
        by_second.setdefault(v.second.id, []).append(v)

    kinds: dict[tuple[int, int], str] = {}

    def put(u: CrfNode, v: CrfNode, kind: str):
        key = (min(u.index, v.index), max(u.index, v.index))
        if kinds.get(key) == REPELLENCY:
            return
        kinds[key] = kind

    for group in list(by_first.values()) + list(by_second.values()):
        for u, v in combinations(group, 2):
            put(u, v, REPELLENCY)

    def chained(u: CrfNode, v: CrfNode) -> bool:
        return u.second.id == v.first.id or u.first.id == v.second.id

    def consistency(groups: dict[int, list[CrfNode]], close) -> None:
        reps = sorted(groups, key=lambda k: k)
        tr = {k: groups[k][0].first if groups is by_first else groups[k][0].second for k in reps}
        for ka, kb in combinations(reps, 2):
            if not close(tr[ka], tr[kb], cfg):
                continue
            for u in groups[ka]:
                for v in groups[kb]:
                    if u.first.id == v.first.id or u.second.id == v.second.id or chained(u, v):
                        continue
                    put(u, v, CONSISTENCY)

    consistency(by_first, _tail_close)
    consistency(by_second, _head_close)
    return [CrfEdge(i, j, kinds[(i, j)]) for (i, j) in sorted(kinds)]


def attach_joint_probabilities(nodes: Sequence[CrfNode], edges: Sequence[CrfEdge], provider) -> list[CrfEdge]:
    pos = {v.index: v for v in nodes}
    if hasattr(provider, "probability_batch"):
        z = clamp_prob(provider.probability_batch([(pos[e.i], pos[e.j]) for e in edges]))
        return [CrfEdge(e.i, e.j, e.kind, (float(a), float(b))) for e, (a, b) in zip(edges, z)]
    out = []
    for e in edges:
        z = joint_probability(pos[e.i], pos[e.j], provider)
        out.append(CrfEdge(e.i, e.j, e.kind, z))
    return out


@dataclass
class CrfGraph:
    nodes: list[CrfNode]
    edges: list[CrfEdge]
    adjacency: list[list[int]] = field(init=False)

    def __post_init__(self):
        self._pos = {v.index: k for k, v in enumerate(self.nodes)}
        if len(self._pos) != len(self.nodes):
            raise ValueError("duplicate node indices")
        self.adjacency = [[] for _ in self.nodes]
        seen = set()
        for k, e in enumerate(self.edges):
            key = (min(e.i, e.j), max(e.i, e.j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            self.adjacency[self._pos[e.i]].append(k)
            self.adjacency[self._pos[e.j]].append(k)

    def position(self, node_index: int) -> int:
        return self._pos[node_index]

    def unary_probs(self) -> np.ndarray:
        return np.array([v.unary_prob for v in self.nodes], dtype=np.float64).reshape(-1, 2)

    def edge_array(self) -> np.ndarray:
        return np.array([(self._pos[e.i], self._pos[e.j]) for e in self.edges], dtype=np.int64).reshape(-1, 2)

    def joint_probs(self) -> np.ndarray:
        return np.array([e.joint_prob for e in self.edges], dtype=np.float64).reshape(-1, 2)

    def potentials(self, params: CrfParams = CrfParams()) -> CrfPotentials:
        z = self.unary_probs()
        z1 = clamp_prob(z[:, 1])
        zc = np.stack([1.0 - z1, z1], axis=1)
        jp = clamp_prob(self.joint_probs())
        zi = np.stack([1.0 - jp[:, 0], jp[:, 0]], axis=1)
        zj = np.stack([1.0 - jp[:, 1], jp[:, 1]], axis=1)
        pair = -params.w_d * np.log(zi[:, :, None] * zj[:, None, :] + params.epsilon)
        return CrfPotentials(
            unary=unary_potential(zc, params.w_u, params.epsilon),
            pairwise=pair,
            edges=self.edge_array(),
            q0=zc,
            first_ids=np.array([v.first.id for v in self.nodes], dtype=np.int64),
            second_ids=np.array([v.second.id for v in self.nodes], dtype=np.int64),
        )

    def dump_csv(self, directory) -> None:
        """Write nodes.csv and edges.csv for inspection."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "nodes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "first", "second", "gap", "z0", "z1"])
            for v in self.nodes:
                w.writerow([v.index, v.first.id, v.second.id, v.gap, repr(v.unary_prob[0]), repr(v.unary_prob[1])])
        with open(d / "edges.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "kind", "z_i1", "z_j1"])
            for e in self.edges:
                w.writerow([e.i, e.j, e.kind, repr(e.joint_prob[0]), repr(e.joint_prob[1])])


def build_graph(
    nodes: Sequence[CrfNode],
    pair_provider,
    cfg: DifficultPairConfig = DifficultPairConfig(),
) -> CrfGraph:
    edges = find_difficult_pairs(nodes, cfg)
    return CrfGraph(list(nodes), attach_joint_probabilities(nodes, edges, pair_provider))
