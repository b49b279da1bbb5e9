"""CRF energy, its continuous relaxation and unrolled gradient-descent inference.

Every function works on `CrfPotentials`: a unary table (n, 2), a pairwise
table (m, 2, 2) indexed [label_i, label_j], and the (m, 2) edge endpoints.
Each undirected edge is stored once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import CrfParams

MAX_BRUTE_FORCE_NODES = 25


class SizeLimitError(ValueError):
    pass


@dataclass
class CrfPotentials:
    unary: np.ndarray
    pairwise: np.ndarray
    edges: np.ndarray
    q0: Optional[np.ndarray] = None
    # tracklet ids per node, used by the one-successor/one-predecessor repair
    first_ids: Optional[np.ndarray] = None
    second_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64).reshape(-1, 2)
        self.pairwise = np.asarray(self.pairwise, dtype=np.float64).reshape(-1, 2, 2)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.pairwise.shape[0] != self.edges.shape[0]:
            raise ValueError("one pairwise table per edge required")

    @property
    def n_nodes(self) -> int:
        return self.unary.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def initial_labeling(self) -> np.ndarray:
        if self.q0 is not None:
            return np.array(self.q0, dtype=np.float64)
        return normalize(-self.unary)


@dataclass
class InferenceTrace:
    energies: list[float]
    final_q: np.ndarray
    history: list[np.ndarray] = field(default_factory=list, repr=False)


def as_potentials(g, params: Optional[CrfParams] = None) -> CrfPotentials:
    if isinstance(g, CrfPotentials):
        return g
    return g.potentials(params or CrfParams())


def normalize(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax."""
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def clip_renormalize(a: np.ndarray) -> np.ndarray:
    c = np.clip(a, 0.0, 1.0)
    s = c.sum(axis=1, keepdims=True)
    out = np.where(s > 0, c / np.where(s > 0, s, 1.0), 0.5)
    return out


def one_hot(x, n_labels: int = 2) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    q = np.zeros((x.size, n_labels))
    q[np.arange(x.size), x] = 1.0
    return q


def energy_integer(g, x) -> float:
    """Unary plus pairwise energy of a binary labeling."""
    p = as_potentials(g)
    x = np.asarray(x, dtype=np.int64)
    if x.size != p.n_nodes:
        raise ValueError(f"labeling has {x.size} entries for {p.n_nodes} nodes")
    node_terms = p.unary[np.arange(p.n_nodes), x]
    e = p.edges
    edge_terms = p.pairwise[np.arange(p.n_edges), x[e[:, 0]], x[e[:, 1]]]
    return float(np.sum(node_terms) + np.sum(edge_terms))


def energy_relaxed(g, q: np.ndarray) -> float:
    """Quadratic relaxation of the energy at per-node label distributions `q`.

    Per-node and per-edge terms are reduced first, in the same order as
    `energy_integer`, so both agree exactly at one-hot `q`.
    """
    p = as_potentials(g)
    q = np.asarray(q, dtype=np.float64)
    node_terms = (p.unary * q).sum(axis=1)
    e = p.edges
    qi, qj = q[e[:, 0]], q[e[:, 1]]
    edge_terms = (p.pairwise * qi[:, :, None] * qj[:, None, :]).sum(axis=(1, 2))
    return float(np.sum(node_terms) + np.sum(edge_terms))


def pairwise_messages(p: CrfPotentials, q: np.ndarray) -> np.ndarray:
    """Pairwise part of the gradient.

    Stage one weights every neighbour's label distribution by the table
    entries, giving per-(lambda, mu) contributions; stage two sums over mu.
    Each edge feeds both endpoints, the second through the transposed table.
    """
    n = p.n_nodes
    out = np.zeros((n, 2))
    if p.n_edges == 0:
        return out
    i, j = p.edges[:, 0], p.edges[:, 1]
    to_i = p.pairwise * q[j][:, None, :]  # [e, lambda, mu]
    to_j = np.transpose(p.pairwise, (0, 2, 1)) * q[i][:, None, :]  # [e, mu, lambda]
    np.add.at(out, i, to_i.sum(axis=2))
    np.add.at(out, j, to_j.sum(axis=2))
    return out


def gradient(g, q: np.ndarray) -> np.ndarray:
    p = as_potentials(g)
    return pairwise_messages(p, np.asarray(q, dtype=np.float64)) + p.unary


def iterate(g, q: np.ndarray, gamma: float, projection: str = "softmax") -> np.ndarray:
    """One gradient step followed by normalization back onto the simplex."""
    q = np.asarray(q, dtype=np.float64)
    stepped = q - gamma * gradient(g, q)
    if projection == "softmax":
        return normalize(stepped)
    if projection == "clip-renorm":
        return clip_renormalize(stepped)
    raise ValueError(f"unknown projection {projection!r}")


def infer(g, params: CrfParams = CrfParams(), q0: Optional[np.ndarray] = None, keep_history: bool = False) -> InferenceTrace:
    """Run `params.iterations` unrolled steps from the unary probabilities."""
    p = as_potentials(g, params)
    q = p.initial_labeling() if q0 is None else np.array(q0, dtype=np.float64)
    energies = [energy_relaxed(p, q)]
    history = [q] if keep_history else []
    for _ in range(params.iterations):
        q = iterate(p, q, params.gamma, params.projection)
        energies.append(energy_relaxed(p, q))
        if keep_history:
            history.append(q)
    return InferenceTrace(energies, q, history)


def repair(labels: np.ndarray, score: np.ndarray, first_ids, second_ids) -> np.ndarray:
    """Greedy one-successor/one-predecessor repair, most confident node first."""
    labels = np.array(labels, dtype=np.int64)
    if first_ids is None or second_ids is None:
        return labels
    taken_first, taken_second = set(), set()
    order = np.lexsort((np.arange(labels.size), -np.asarray(score)))
    for k in order:
        if labels[k] != 1:
            continue
        a, b = first_ids[k], second_ids[k]
        if a in taken_first or b in taken_second:
            labels[k] = 0
            continue
        taken_first.add(a)
        taken_second.add(b)
    return labels


def decode(q: np.ndarray, g=None) -> np.ndarray:
    """Argmax labels (ties -> 0), then the conflict repair when tracklet ids are known."""
    q = np.asarray(q, dtype=np.float64)
    labels = (q[:, 1] > q[:, 0]).astype(np.int64)
    if g is None:
        return labels
    p = as_potentials(g)
    return repair(labels, q[:, 1], p.first_ids, p.second_ids)


def enumerate_energies(g, chunk: int = 1 << 16) -> np.ndarray:
    """Energy of every labeling, in lexicographic order with node 0 most significant."""
    p = as_potentials(g)
    n = p.n_nodes
    if n > MAX_BRUTE_FORCE_NODES:
        raise SizeLimitError(f"brute force limited to {MAX_BRUTE_FORCE_NODES} nodes, got {n}")
    total = 1 << n
    out = np.empty(total)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    ei, ej = p.edges[:, 0], p.edges[:, 1]
    eidx = np.arange(p.n_edges)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        x = (codes[:, None] >> shifts[None, :]) & 1
        e = p.unary[np.arange(n)[None, :], x].sum(axis=1)
        if p.n_edges:
            e = e + p.pairwise[eidx[None, :], x[:, ei], x[:, ej]].sum(axis=1)
        out[start:start + codes.size] = e
    return out


def brute_force_minimize(g) -> tuple[np.ndarray, float]:
    """Exact minimizer by exhaustive enumeration; lexicographically smallest on ties."""
    p = as_potentials(g)
    n = p.n_nodes
    energies = enumerate_energies(p)
    best = int(np.argmin(energies))
    x = np.array([(best >> (n - 1 - k)) & 1 for k in range(n)], dtype=np.int64)
    return x, energy_integer(p, x)
