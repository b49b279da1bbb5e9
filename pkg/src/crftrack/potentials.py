"""Motion features, probability providers and the unary/pairwise potentials.

Providers stand in for the appearance and pair networks: anything mapping a
node (or a node pair with its feature vector) to probabilities in [0, 1].
Two kinds ship here: logistic models over the tracklet features, trainable by
`crftrack.learning`, and table providers that replay stored probabilities.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ContractViolation, CrfNode, MalformedInputError, Tracklet

PROB_FLOOR = 1e-6
SENTINEL = 1e4
MOTION_CAP = 10.0


@dataclass(frozen=True)
class MotionFeature:
    dp1: np.ndarray
    dp2: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.dp1, self.dp2])


def clamp_prob(p, floor: float = PROB_FLOOR):
    return np.clip(p, floor, 1.0 - floor)


def motion_feature_pair(tk: Tracklet, tm: Tracklet) -> MotionFeature:
    """Forward/backward constant-velocity prediction residuals across the gap."""
    g = tm.t_s - tk.t_e
    if g <= 0:
        raise ContractViolation(f"motion feature needs tm to start after tk ends (gap {g})")
    pk, pm = tk.tail, tm.head
    dp1 = pk + tk.tail_velocity * g - pm
    dp2 = pm - tm.head_velocity * g - pk
    return MotionFeature(dp1, dp2)


def motion_feature_nodepair(vi: CrfNode, vj: CrfNode) -> MotionFeature:
    """Relative-offset consistency of two nodes at t_x = min of first-tracklet ends.

    dp1 compares the second tracklets back-projected to t_x, dp2 the first
    tracklets' positions at t_x.
    """
    tx = min(vi.first.t_e, vj.first.t_e)
    i2, j2 = vi.second, vj.second
    back_i = i2.head - i2.head_velocity * (i2.t_s - tx)
    back_j = j2.head - j2.head_velocity * (j2.t_s - tx)
    dp1 = back_i - back_j
    dp2 = vi.first.center_at(tx) - vj.first.center_at(tx)
    return MotionFeature(dp1, dp2)


def _appearance_block(t: Tracklet, dim: int) -> np.ndarray:
    if t.appearance is None:
        return np.zeros(dim)
    if t.appearance.shape[0] != dim:
        raise ContractViolation(f"appearance dim {t.appearance.shape[0]} != {dim}")
    return np.asarray(t.appearance)


def _cross_motion(tk: Tracklet, tm: Tracklet, sentinel: float) -> np.ndarray:
    if tm.t_s - tk.t_e <= 0:
        return np.full(4, sentinel)
    return motion_feature_pair(tk, tm).vector()


def node_pair_feature(vi: CrfNode, vj: CrfNode, appearance_dim: int = 16, sentinel: float = SENTINEL) -> np.ndarray:
    """Concatenate four appearance descriptors and five motion features.

    Layout: f_a(i1), f_a(i2), f_a(j1), f_a(j2), f_m(i1,i2), f_m(i1,j2),
    f_m(j1,i2), f_m(j1,j2), f_m(vi,vj). Length 4*appearance_dim + 20.
    Cross pairings with no forward gap are filled with `sentinel`.
    """
    i1, i2, j1, j2 = vi.first, vi.second, vj.first, vj.second
    parts = [_appearance_block(t, appearance_dim) for t in (i1, i2, j1, j2)]
    parts += [
        _cross_motion(i1, i2, sentinel),
        _cross_motion(i1, j2, sentinel),
        _cross_motion(j1, i2, sentinel),
        _cross_motion(j1, j2, sentinel),
        motion_feature_nodepair(vi, vj).vector(),
    ]
    return np.concatenate(parts)


def feature_dimension(appearance_dim: int) -> int:
    return 4 * appearance_dim + 20


def swap_pair_feature(f: np.ndarray, appearance_dim: int) -> np.ndarray:
    """Feature of (vj, vi) from the feature of (vi, vj), without recomputing it."""
    d = appearance_dim
    a = [f[k * d:(k + 1) * d] for k in range(4)]
    m0 = 4 * d
    m = [f[m0 + 4 * k:m0 + 4 * (k + 1)] for k in range(5)]
    return np.concatenate([a[2], a[3], a[0], a[1], m[3], m[2], m[1], m[0], -m[4]])


# ----------------------------------------------------------------------------
# potentials


def unary_potential(z, w_u: float, eps: float):
    with np.errstate(divide="ignore"):  # z = 0 with eps = 0 is a legal +inf cost
        return -w_u * np.log(np.asarray(z, dtype=np.float64) + eps)


def pairwise_potential(z_i: float, z_j: float, w_d: float, eps: float) -> np.ndarray:
    """2x2 table indexed [label_i, label_j] from the two label-1 probabilities."""
    zi = np.array([1.0 - z_i, z_i])
    zj = np.array([1.0 - z_j, z_j])
    with np.errstate(divide="ignore"):
        return -w_d * np.log(np.outer(zi, zj) + eps)


# ----------------------------------------------------------------------------
# providers


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _cos(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> float:
    if a is None or b is None:
        return 0.0
    return float(np.clip(a @ b, -1.0, 1.0))


def unary_design(first: Tracklet, second: Tracklet, t_thr: float) -> np.ndarray:
    """[cos appearance, |dp1|/D, |dp2|/D, gap/T_thr] for one node."""
    mf = motion_feature_pair(first, second)
    diag = 0.5 * (first.mean_diagonal + second.mean_diagonal)
    gap = second.t_s - first.t_e
    return np.array([
        _cos(first.appearance, second.appearance),
        min(np.linalg.norm(mf.dp1) / diag, MOTION_CAP),
        min(np.linalg.norm(mf.dp2) / diag, MOTION_CAP),
        gap / float(t_thr),
    ])


UNARY_FEATURES = 4


@dataclass
class LogisticUnaryProvider:
    """s = sigmoid(weights . design + bias); returns (1 - s, s)."""

    # fitted on simulator scenes (see experiments.fit_providers)
    weights: np.ndarray = field(default_factory=lambda: np.array([2.055, -1.787, -1.919, -3.461]))
    bias: float = -0.377

    kind = "logistic-unary"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(UNARY_FEATURES)
        self.bias = float(self.bias)

    def design(self, first: Tracklet, second: Tracklet, t_thr: float) -> np.ndarray:
        return unary_design(first, second, t_thr)

    def prob_from_design(self, x: np.ndarray) -> np.ndarray:
        return clamp_prob(sigmoid(np.asarray(x) @ self.weights + self.bias))

    def probability(self, first: Tracklet, second: Tracklet, t_thr: float) -> tuple[float, float]:
        s = float(self.prob_from_design(self.design(first, second, t_thr)))
        return (1.0 - s, s)

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.bias]])

    def set_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        self.weights = theta[:-1].copy()
        self.bias = float(theta[-1])

    def copy(self) -> "LogisticUnaryProvider":
        return LogisticUnaryProvider(self.weights.copy(), self.bias)


def pair_design(vi: CrfNode, vj: CrfNode, feature: np.ndarray, appearance_dim: int) -> np.ndarray:
    """Node-i view of a pair feature: appearance cosines and scaled motion magnitudes.

    Order: cos(i1,i2), cos(i1,j2), cos(j1,i2), cos(j1,j2), |f_m(i1,i2)|,
    |f_m(i1,j2)|, |f_m(j1,i2)|, |f_m(j1,j2)|, |dp1 - dp2| of the node pair,
    and the relative gap (g_j - g_i) / (g_i + g_j). Magnitudes are in units
    of the mean box diagonal and capped.
    """
    d = appearance_dim
    a = [feature[k * d:(k + 1) * d] for k in range(4)]
    m0 = 4 * d
    m = [feature[m0 + 4 * k:m0 + 4 * (k + 1)] for k in range(5)]
    diag = np.mean([vi.first.mean_diagonal, vi.second.mean_diagonal, vj.first.mean_diagonal, vj.second.mean_diagonal])

    def cos(u, v):
        return float(np.clip(u @ v, -1.0, 1.0))

    def mag(v):
        return min(float(np.linalg.norm(v)) / diag, MOTION_CAP)

    return np.array([
        cos(a[0], a[1]), cos(a[0], a[3]), cos(a[2], a[1]), cos(a[2], a[3]),
        mag(m[0]), mag(m[1]), mag(m[2]), mag(m[3]),
        mag(m[4][:2] - m[4][2:]),
        (vj.gap - vi.gap) / float(vi.gap + vj.gap),
    ])


BASE_PAIR_FEATURES = 10
# base design split by edge kind (repellency block, consistency block) plus a repellency indicator
PAIR_FEATURES = 2 * BASE_PAIR_FEATURES + 1


def shares_tracklet(vi: CrfNode, vj: CrfNode) -> bool:
    return vi.first.id == vj.first.id or vi.second.id == vj.second.id


def expand_by_kind(x: np.ndarray, repellent) -> np.ndarray:
    """[x if repellent, x if not, repellent indicator] per row."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    r = np.asarray(repellent, dtype=np.float64).reshape(-1, 1)
    return np.hstack([x * r, x * (1.0 - r), r])


class _TrackletArrays:
    """Endpoint, velocity, size and appearance arrays for a set of tracklets."""

    def __init__(self, tracklets, appearance_dim: int):
        self.row = {}
        ts, te, head, tail, hv, tv, diag, app, centers, off = [], [], [], [], [], [], [], [], [], []
        n_centers = 0
        for t in tracklets:
            if t.id in self.row:
                continue
            self.row[t.id] = len(ts)
            ts.append(t.t_s)
            te.append(t.t_e)
            head.append(t.head)
            tail.append(t.tail)
            hv.append(t.head_velocity)
            tv.append(t.tail_velocity)
            diag.append(t.mean_diagonal)
            app.append(_appearance_block(t, appearance_dim))
            off.append(n_centers)
            centers.extend(d.center for d in t.detections)
            n_centers += len(t.detections)
        self.ts, self.te = np.array(ts), np.array(te)
        self.head, self.tail = np.array(head).reshape(-1, 2), np.array(tail).reshape(-1, 2)
        self.hv, self.tv = np.array(hv).reshape(-1, 2), np.array(tv).reshape(-1, 2)
        self.diag = np.array(diag)
        self.app = np.array(app).reshape(-1, appearance_dim)
        self.off = np.array(off, dtype=np.int64)
        self.centers = np.array(centers, dtype=np.float64).reshape(-1, 2)

    def rows(self, tracklets) -> np.ndarray:
        return np.array([self.row[t.id] for t in tracklets], dtype=np.int64)

    def center_at(self, r: np.ndarray, frame: np.ndarray) -> np.ndarray:
        ts, te = self.ts[r], self.te[r]
        inside = self.off[r] + np.clip(frame - ts, 0, te - ts)
        out = self.centers[inside].copy()
        before, after = frame < ts, frame > te
        out[before] = self.head[r][before] + self.hv[r][before] * (frame - ts)[before][:, None]
        out[after] = self.tail[r][after] + self.tv[r][after] * (frame - te)[after][:, None]
        return out

    def cross_motion_magnitude(self, k: np.ndarray, m: np.ndarray, diag: np.ndarray, sentinel: float) -> np.ndarray:
        g = self.ts[m] - self.te[k]
        dp1 = self.tail[k] + self.tv[k] * g[:, None] - self.head[m]
        dp2 = self.head[m] - self.hv[m] * g[:, None] - self.tail[k]
        norm = np.sqrt(np.sum(dp1 * dp1, axis=1) + np.sum(dp2 * dp2, axis=1))
        norm = np.where(g > 0, norm, 2.0 * sentinel)
        return np.minimum(norm / diag, MOTION_CAP)


def pair_designs_batch(pairs, appearance_dim: int = 16, sentinel: float = SENTINEL) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized `pair_design` plus kind expansion for many node pairs:
    returns the node-i and node-j views, shape (m, PAIR_FEATURES) each."""
    pairs = list(pairs)
    if not pairs:
        return np.zeros((0, PAIR_FEATURES)), np.zeros((0, PAIR_FEATURES))
    ts = [t for vi, vj in pairs for t in (vi.first, vi.second, vj.first, vj.second)]
    tab = _TrackletArrays(ts, appearance_dim)
    i1 = tab.rows([vi.first for vi, _ in pairs])
    i2 = tab.rows([vi.second for vi, _ in pairs])
    j1 = tab.rows([vj.first for _, vj in pairs])
    j2 = tab.rows([vj.second for _, vj in pairs])
    diag = (tab.diag[i1] + tab.diag[i2] + tab.diag[j1] + tab.diag[j2]) / 4.0

    def cos(a, b):
        return np.clip(np.sum(tab.app[a] * tab.app[b], axis=1), -1.0, 1.0)

    c_ii, c_ij, c_ji, c_jj = cos(i1, i2), cos(i1, j2), cos(j1, i2), cos(j1, j2)
    m_ii = tab.cross_motion_magnitude(i1, i2, diag, sentinel)
    m_ij = tab.cross_motion_magnitude(i1, j2, diag, sentinel)
    m_ji = tab.cross_motion_magnitude(j1, i2, diag, sentinel)
    m_jj = tab.cross_motion_magnitude(j1, j2, diag, sentinel)

    tx = np.minimum(tab.te[i1], tab.te[j1])
    back_i = tab.head[i2] - tab.hv[i2] * (tab.ts[i2] - tx)[:, None]
    back_j = tab.head[j2] - tab.hv[j2] * (tab.ts[j2] - tx)[:, None]
    dp1 = back_i - back_j
    dp2 = tab.center_at(i1, tx) - tab.center_at(j1, tx)
    rel = np.minimum(np.linalg.norm(dp1 - dp2, axis=1) / diag, MOTION_CAP)
    gi = (tab.ts[i2] - tab.te[i1]).astype(np.float64)
    gj = (tab.ts[j2] - tab.te[j1]).astype(np.float64)
    rg = (gj - gi) / (gi + gj)

    xi = np.stack([c_ii, c_ij, c_ji, c_jj, m_ii, m_ij, m_ji, m_jj, rel, rg], axis=1)
    xj = np.stack([c_jj, c_ji, c_ij, c_ii, m_jj, m_ji, m_ij, m_ii, rel, -rg], axis=1)
    r = (i1 == j1) | (i2 == j2)
    return expand_by_kind(xi, r), expand_by_kind(xj, r)


@dataclass
class LogisticPairProvider:
    """Joint-context probabilities for an edge.

    Both heads share one weight vector and read the pair from their own
    node's side, so the output does not depend on edge orientation.
    """

    # trained end to end on simulator scenes with the unary frozen
    weights: np.ndarray = field(default_factory=lambda: np.array([
        0.156, 0.117, 0.07, -0.181, -0.288, 0.002, -0.033, 0.004, 0.014, 0.551,
        0.19, -0.218, -0.211, -0.008, -0.19, 0.005, 0.002, -0.013, -0.013, 0.271,
        -0.068]))
    bias: float = -0.059
    appearance_dim: int = 16

    kind = "logistic-pair"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(PAIR_FEATURES)
        self.bias = float(self.bias)

    def designs(self, vi: CrfNode, vj: CrfNode) -> tuple[np.ndarray, np.ndarray]:
        f = node_pair_feature(vi, vj, self.appearance_dim)
        fs = swap_pair_feature(f, self.appearance_dim)
        r = shares_tracklet(vi, vj)
        return (expand_by_kind(pair_design(vi, vj, f, self.appearance_dim), r)[0],
                expand_by_kind(pair_design(vj, vi, fs, self.appearance_dim), r)[0])

    def prob_from_design(self, x: np.ndarray) -> np.ndarray:
        return clamp_prob(sigmoid(np.asarray(x) @ self.weights + self.bias))

    def designs_batch(self, pairs) -> tuple[np.ndarray, np.ndarray]:
        return pair_designs_batch(pairs, self.appearance_dim)

    def probability_batch(self, pairs) -> np.ndarray:
        """(m, 2) label-1 probabilities of both nodes for each pair."""
        xi, xj = self.designs_batch(pairs)
        return np.stack([self.prob_from_design(xi), self.prob_from_design(xj)], axis=1).reshape(-1, 2)

    def probability(self, vi: CrfNode, vj: CrfNode, feature: Optional[np.ndarray] = None) -> tuple[float, float]:
        if feature is None:
            xi, xj = self.designs(vi, vj)
        else:
            r = shares_tracklet(vi, vj)
            xi = expand_by_kind(pair_design(vi, vj, feature, self.appearance_dim), r)[0]
            xj = expand_by_kind(pair_design(vj, vi, swap_pair_feature(feature, self.appearance_dim), self.appearance_dim), r)[0]
        zi, zj = self.prob_from_design(np.stack([xi, xj]))
        return float(zi), float(zj)

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.bias]])

    def set_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        self.weights = theta[:-1].copy()
        self.bias = float(theta[-1])

    def copy(self) -> "LogisticPairProvider":
        return LogisticPairProvider(self.weights.copy(), self.bias, self.appearance_dim)


def zero_unary_provider() -> LogisticUnaryProvider:
    return LogisticUnaryProvider(np.zeros(UNARY_FEATURES), 0.0)


def zero_pair_provider(appearance_dim: int = 16) -> LogisticPairProvider:
    return LogisticPairProvider(np.zeros(PAIR_FEATURES), 0.0, appearance_dim)


class TableUnaryProvider:
    """Replays stored node probabilities keyed by "first_id->second_id"."""

    kind = "table-unary"

    def __init__(self, table: dict[str, tuple[float, float]], default: Optional[tuple[float, float]] = None):
        self.table = dict(table)
        self.default = default

    def probability(self, first: Tracklet, second: Tracklet, t_thr: float = 0) -> tuple[float, float]:
        key = f"{first.id}->{second.id}"
        if key in self.table:
            return self.table[key]
        if self.default is None:
            raise KeyError(f"no stored probability for node {key}")
        return self.default


class TablePairProvider:
    """Replays stored edge probabilities keyed by "a->b|c->d"; the row's z0, z1
    columns hold the label-1 probabilities of the first and second node."""

    kind = "table-pair"

    def __init__(self, table: dict[str, tuple[float, float]], default: Optional[tuple[float, float]] = None):
        self.table = dict(table)
        self.default = default

    def probability(self, vi: CrfNode, vj: CrfNode, feature=None) -> tuple[float, float]:
        key = f"{vi.key}|{vj.key}"
        if key in self.table:
            return self.table[key]
        rev = f"{vj.key}|{vi.key}"
        if rev in self.table:
            zj, zi = self.table[rev]
            return zi, zj
        if self.default is None:
            raise KeyError(f"no stored probability for edge {key}")
        return self.default


def read_probability_table(path) -> dict[str, tuple[float, float]]:
    table = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise MalformedInputError(f"{path}:{lineno}: expected key,z0,z1")
            try:
                table[row[0]] = (float(row[1]), float(row[2]))
            except ValueError as exc:
                raise MalformedInputError(f"{path}:{lineno}: {exc}") from None
    return table


def write_probability_table(path, table: dict[str, tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for key, (z0, z1) in table.items():
            w.writerow([key, repr(float(z0)), repr(float(z1))])


def save_provider(path, provider) -> None:
    """key=value header lines, then one line of whitespace-separated weights."""
    theta = provider.get_params()
    lines = [f"type={provider.kind}", f"dims={theta.size}"]
    if isinstance(provider, LogisticPairProvider):
        lines.append(f"d_a={provider.appearance_dim}")
    lines.append(" ".join(repr(float(v)) for v in theta))
    Path(path).write_text("\n".join(lines) + "\n")


def load_provider(path):
    header, weights = {}, None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
        else:
            try:
                weights = np.array([float(t) for t in line.split()])
            except ValueError:
                raise MalformedInputError(f"{path}:{lineno}: bad weight line") from None
    kind = header.get("type")
    if weights is None or "dims" not in header or int(header["dims"]) != weights.size:
        raise MalformedInputError(f"{path}: missing or inconsistent weights")
    if kind == LogisticUnaryProvider.kind:
        p = zero_unary_provider()
    elif kind == LogisticPairProvider.kind:
        p = zero_pair_provider(int(header.get("d_a", 16)))
    else:
        raise MalformedInputError(f"{path}: unknown provider type {kind!r}")
    if weights.size != p.get_params().size:
        raise MalformedInputError(f"{path}: expected {p.get_params().size} weights, got {weights.size}")
    p.set_params(weights)
    return p


def unary_probability(node_or_pair, provider, t_thr: float = 20) -> tuple[float, float]:
    """Provider output for a node, clamped into [1e-6, 1 - 1e-6]."""
    if isinstance(node_or_pair, CrfNode):
        first, second = node_or_pair.first, node_or_pair.second
    else:
        first, second = node_or_pair
    _, z1 = provider.probability(first, second, t_thr)
    z1 = float(clamp_prob(z1))
    return (1.0 - z1, z1)


def joint_probability(vi: CrfNode, vj: CrfNode, provider, feature: Optional[np.ndarray] = None) -> tuple[float, float]:
    zi, zj = provider.probability(vi, vj, feature)
    return float(clamp_prob(zi)), float(clamp_prob(zj))


def log_odds(z):
    z = np.asarray(z, dtype=np.float64)
    return np.log(z) - np.log1p(-z)

