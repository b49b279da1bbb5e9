"""End-to-end fitting of the inference parameters and the logistic providers.

The loss is the cross-entropy of the final relaxed labeling against ground
truth node labels. Gradients flow back through every unrolled iteration
(softmax, gradient step, pairwise messages), through the log potentials and
into the provider weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .association import sliding_windows
from .core import CrfNode, CrfParams, Tracklet
from .graph import CrfGraph, DifficultPairConfig, build_nodes, find_difficult_pairs
from .inference import CrfPotentials, decode, infer, normalize, pairwise_messages, repair
from .potentials import (
    PAIR_FEATURES,
    PROB_FLOOR,
    UNARY_FEATURES,
    LogisticPairProvider,
    LogisticUnaryProvider,
    sigmoid,
    unary_design,
)

log = logging.getLogger(__name__)

LOSS_FLOOR = 1e-9
N_CRF = 3  # w_u, w_d, gamma


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingWindow:
    """One window of nodes with cached provider inputs and node labels."""

    unary_design: np.ndarray  # (n, UNARY_FEATURES)
    pair_design_i: np.ndarray  # (m, PAIR_FEATURES), node-i view
    pair_design_j: np.ndarray  # (m, PAIR_FEATURES), node-j view
    edges: np.ndarray  # (m, 2) local node positions
    gt_labels: np.ndarray  # (n,)
    first_ids: Optional[np.ndarray] = None
    second_ids: Optional[np.ndarray] = None
    graph: Optional[CrfGraph] = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.unary_design.shape[0]


@dataclass
class CrfModel:
    """Everything the loss depends on: CRF parameters plus both providers."""

    params: CrfParams = field(default_factory=CrfParams)
    unary: LogisticUnaryProvider = field(default_factory=LogisticUnaryProvider)
    pair: LogisticPairProvider = field(default_factory=LogisticPairProvider)

    def vector(self) -> np.ndarray:
        p = self.params
        return np.concatenate([[p.w_u, p.w_d, p.gamma], self.unary.get_params(), self.pair.get_params()])

    def with_vector(self, theta) -> "CrfModel":
        theta = np.asarray(theta, dtype=np.float64)
        nu = UNARY_FEATURES + 1
        unary, pair = self.unary.copy(), self.pair.copy()
        unary.set_params(theta[N_CRF:N_CRF + nu])
        pair.set_params(theta[N_CRF + nu:])
        params = replace(self.params, w_u=float(theta[0]), w_d=float(theta[1]), gamma=float(theta[2]))
        return CrfModel(params, unary, pair)

    def potentials(self, w: TrainingWindow) -> CrfPotentials:
        return _forward(w, self, keep=False)[1]

    @staticmethod
    def size() -> int:
        return N_CRF + UNARY_FEATURES + 1 + PAIR_FEATURES + 1


def unary_frozen_mask() -> np.ndarray:
    """Trainable mask that keeps the unary provider fixed."""
    mask = np.ones(CrfModel.size(), dtype=bool)
    mask[N_CRF:N_CRF + UNARY_FEATURES + 1] = False
    return mask


def parameter_names() -> list[str]:
    names = ["w_u", "w_d", "gamma"]
    names += [f"unary.w{k}" for k in range(UNARY_FEATURES)] + ["unary.bias"]
    names += [f"pair.w{k}" for k in range(PAIR_FEATURES)] + ["pair.bias"]
    return names


# ----------------------------------------------------------------------------
# windows


def node_gt_labels(nodes: Sequence[CrfNode]) -> np.ndarray:
    """1 where the second tracklet is the next tracklet of the first's identity."""
    tracklets = {}
    for v in nodes:
        tracklets[v.first.id] = v.first
        tracklets[v.second.id] = v.second
    by_identity: dict[int, list[Tracklet]] = {}
    for t in tracklets.values():
        ident = t.identity()
        if ident is not None:
            by_identity.setdefault(ident, []).append(t)
    labels = np.zeros(len(nodes), dtype=np.int64)
    for k, v in enumerate(nodes):
        ident = v.first.identity()
        if ident is None or v.second.identity() != ident:
            continue
        later = [t.t_s for t in by_identity[ident] if t.t_s > v.first.t_e]
        if later and v.second.t_s == min(later):
            labels[k] = 1
    first = np.array([v.first.id for v in nodes], dtype=np.int64)
    second = np.array([v.second.id for v in nodes], dtype=np.int64)
    score = -np.array([v.gap for v in nodes], dtype=np.float64)
    return repair(labels, score, first, second)


def make_window(nodes: Sequence[CrfNode], gt_labels, t_thr: int, pair_provider: LogisticPairProvider,
                cfg: DifficultPairConfig = DifficultPairConfig()) -> TrainingWindow:
    nodes = list(nodes)
    pos = {v.index: k for k, v in enumerate(nodes)}
    edges = find_difficult_pairs(nodes, cfg)
    xu = np.array([unary_design(v.first, v.second, t_thr) for v in nodes]).reshape(-1, UNARY_FEATURES)
    xi, xj = pair_provider.designs_batch([(nodes[pos[e.i]], nodes[pos[e.j]]) for e in edges])
    return TrainingWindow(
        unary_design=xu,
        pair_design_i=xi,
        pair_design_j=xj,
        edges=np.array([(pos[e.i], pos[e.j]) for e in edges], dtype=np.int64).reshape(-1, 2),
        gt_labels=np.asarray(gt_labels, dtype=np.int64),
        first_ids=np.array([v.first.id for v in nodes], dtype=np.int64),
        second_ids=np.array([v.second.id for v in nodes], dtype=np.int64),
        graph=CrfGraph(nodes, edges),
    )


def windows_from_tracklets(
    tracklets: Sequence[Tracklet],
    t_thr: int = 20,
    window_size: int = 200,
    overlap: float = 0.5,
    pair_provider: Optional[LogisticPairProvider] = None,
    cfg: DifficultPairConfig = DifficultPairConfig(),
) -> list[TrainingWindow]:
    """Sliding training windows labelled from the tracklets' ground-truth identities."""
    pair_provider = pair_provider or LogisticPairProvider()
    nodes = build_nodes(tracklets, t_thr, LogisticUnaryProvider())
    labels = node_gt_labels(nodes)
    out = []
    for win in sliding_windows(len(nodes), window_size, overlap):
        out.append(make_window([nodes[k] for k in win], labels[list(win)], t_thr, pair_provider, cfg))
    return out


# ----------------------------------------------------------------------------
# forward / backward


def _probs(x: np.ndarray, theta: np.ndarray):
    s = sigmoid(x @ theta[:-1] + theta[-1]) if x.size else np.zeros(x.shape[0])
    z = np.clip(s, PROB_FLOOR, 1.0 - PROB_FLOOR)
    live = (s > PROB_FLOOR) & (s < 1.0 - PROB_FLOOR)
    return s, z, live


def _forward(w: TrainingWindow, model: CrfModel, keep: bool = True):
    p = model.params
    eps = p.epsilon
    su, zu, live_u = _probs(w.unary_design, model.unary.get_params())
    Z = np.stack([1.0 - zu, zu], axis=1)
    U = -p.w_u * np.log(Z + eps)
    theta_p = model.pair.get_params()
    si, zi, live_i = _probs(w.pair_design_i, theta_p)
    sj, zj, live_j = _probs(w.pair_design_j, theta_p)
    Zi = np.stack([1.0 - zi, zi], axis=1)
    Zj = np.stack([1.0 - zj, zj], axis=1)
    Pm = Zi[:, :, None] * Zj[:, None, :] + eps
    P = -p.w_d * np.log(Pm)
    pot = CrfPotentials(U, P, w.edges, q0=Z, first_ids=w.first_ids, second_ids=w.second_ids)
    cache = None
    if keep:
        if p.projection != "softmax":
            raise ValueError("training differentiates the softmax projection only")
        qs, Gs = [Z], []
        q = Z
        for _ in range(p.iterations):
            G = U + pairwise_messages(pot, q)
            q = normalize(q - p.gamma * G)
            Gs.append(G)
            qs.append(q)
        cache = dict(su=su, live_u=live_u, Z=Z, si=si, sj=sj, live_i=live_i, live_j=live_j,
                     Zi=Zi, Zj=Zj, Pm=Pm, P=P, qs=qs, Gs=Gs)
    return cache, pot


def cross_entropy(q_final: np.ndarray, gt) -> float:
    """Mean negative log-probability of the ground-truth labels, floored at 1e-9."""
    gt = np.asarray(gt, dtype=np.int64)
    if q_final.shape[0] != gt.size:
        raise ValueError("labeling and ground truth differ in length")
    if gt.size == 0:
        return 0.0
    picked = np.clip(q_final[np.arange(gt.size), gt], LOSS_FLOOR, 1.0)
    return float(-np.mean(np.log(picked)))


loss = cross_entropy


def window_loss(w: TrainingWindow, model: CrfModel) -> float:
    cache, _ = _forward(w, model)
    return cross_entropy(cache["qs"][-1], w.gt_labels)


def loss_floor_active(w: TrainingWindow, model: CrfModel) -> bool:
    cache, _ = _forward(w, model)
    q = cache["qs"][-1]
    return bool(np.any(q[np.arange(w.n_nodes), w.gt_labels] < LOSS_FLOOR))


def param_gradient(w: TrainingWindow, model: CrfModel) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. `model.vector()`, by reverse accumulation
    through the unrolled iterations."""
    cache, pot = _forward(w, model)
    p = model.params
    n = w.n_nodes
    grad = np.zeros(CrfModel.size())
    qs, Gs, P = cache["qs"], cache["Gs"], cache["P"]
    qT = qs[-1]
    L = cross_entropy(qT, w.gt_labels)
    if n == 0:
        return L, grad

    dq = np.zeros_like(qT)
    picked = qT[np.arange(n), w.gt_labels]
    ok = picked >= LOSS_FLOOR
    dq[np.arange(n)[ok], w.gt_labels[ok]] = -1.0 / (n * picked[ok])

    ei, ej = w.edges[:, 0], w.edges[:, 1]
    dU = np.zeros_like(qT)
    dP = np.zeros_like(P)
    dgamma = 0.0
    for t in range(p.iterations - 1, -1, -1):
        s, q, G = qs[t + 1], qs[t], Gs[t]
        dpre = s * (dq - np.sum(dq * s, axis=1, keepdims=True))
        dgamma -= float(np.sum(dpre * G))
        dG = -p.gamma * dpre
        dU += dG
        dq = dpre.copy()
        if len(ei):
            dGi, dGj = dG[ei], dG[ej]
            dP += dGi[:, :, None] * q[ej][:, None, :] + q[ei][:, :, None] * dGj[:, None, :]
            np.add.at(dq, ej, np.einsum("el,elm->em", dGi, P))
            np.add.at(dq, ei, np.einsum("em,elm->el", dGj, P))

    eps = p.epsilon
    Z = cache["Z"]
    grad[0] = float(np.sum(dU * -np.log(Z + eps)))
    dZ = dq + dU * (-p.w_u / (Z + eps))
    su = cache["su"]
    dlogit_u = (dZ[:, 1] - dZ[:, 0]) * cache["live_u"] * su * (1.0 - su)
    nu = UNARY_FEATURES + 1
    grad[N_CRF:N_CRF + UNARY_FEATURES] = w.unary_design.T @ dlogit_u
    grad[N_CRF + UNARY_FEATURES] = dlogit_u.sum()

    if len(ei):
        Pm, Zi, Zj = cache["Pm"], cache["Zi"], cache["Zj"]
        grad[1] = float(np.sum(dP * -np.log(Pm)))
        dPm = dP * (-p.w_d / Pm)
        dZi = np.einsum("elm,em->el", dPm, Zj)
        dZj = np.einsum("elm,el->em", dPm, Zi)
        si, sj = cache["si"], cache["sj"]
        dli = (dZi[:, 1] - dZi[:, 0]) * cache["live_i"] * si * (1.0 - si)
        dlj = (dZj[:, 1] - dZj[:, 0]) * cache["live_j"] * sj * (1.0 - sj)
        off = N_CRF + nu
        grad[off:off + PAIR_FEATURES] = w.pair_design_i.T @ dli + w.pair_design_j.T @ dlj
        grad[off + PAIR_FEATURES] = dli.sum() + dlj.sum()
    grad[2] = dgamma
    return L, grad


def finite_difference_gradient(w: TrainingWindow, model: CrfModel, rel_step: float = 1e-4) -> np.ndarray:
    theta = model.vector()
    out = np.zeros_like(theta)
    for k in range(theta.size):
        h = rel_step * max(1.0, abs(theta[k]))
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        out[k] = (window_loss(w, model.with_vector(up)) - window_loss(w, model.with_vector(dn))) / (2 * h)
    return out


def decoded_accuracy(windows: Sequence[TrainingWindow], model: CrfModel) -> float:
    hits = total = 0
    for w in windows:
        _, pot = _forward(w, model, keep=False)
        x = decode(infer(pot, model.params).final_q, pot)
        hits += int(np.sum(x == w.gt_labels))
        total += w.n_nodes
    return hits / total if total else 1.0


def mean_loss(windows: Sequence[TrainingWindow], model: CrfModel) -> float:
    if not windows:
        return float("nan")
    return float(np.mean([window_loss(w, model) for w in windows]))


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    epochs: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0

    def csv(self) -> str:
        return "epoch,train_loss,val_loss\n" + "".join(f"{e},{a!r},{b!r}\n" for e, a, b in self.epochs)


def _project(theta: np.ndarray) -> np.ndarray:
    theta[0] = max(theta[0], 0.0)
    theta[1] = max(theta[1], 0.0)
    theta[2] = max(theta[2], 1e-6)
    return theta


def train(
    windows: Sequence[TrainingWindow],
    init: CrfModel,
    lr: float = 0.001,
    epochs: int = 50,
    batch: int = 8,
    val_windows: Optional[Sequence[TrainingWindow]] = None,
    patience: int = 10,
    seed: int = 0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    adam_eps: float = 1e-8,
    trainable: Optional[Sequence[bool]] = None,
) -> tuple[CrfModel, TrainLog]:
    """Adam over mini-batches of windows; returns the best-validation model.

    `trainable` masks `CrfModel.vector()` entries; frozen entries keep their
    initial values exactly.
    """
    windows = list(windows)
    if not windows:
        raise ValueError("training needs at least one window")
    val = list(val_windows) if val_windows else windows
    rng = np.random.default_rng(seed)
    theta = init.vector().copy()
    mask = np.ones_like(theta, dtype=bool) if trainable is None else np.asarray(trainable, dtype=bool)
    if mask.shape != theta.shape:
        raise ValueError(f"trainable mask needs {theta.size} entries")
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step = 0

    def evaluate(th):
        model = init.with_vector(th)
        return mean_loss(windows, model), mean_loss(val, model)

    tr, va = evaluate(theta)
    logbook = TrainLog([(0, tr, va)], 0)
    best_theta, best_val, stale = theta.copy(), va, 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(windows))
        for b0 in range(0, len(order), batch):
            idx = order[b0:b0 + batch]
            model = init.with_vector(theta)
            g = np.mean([param_gradient(windows[k], model)[1] for k in idx], axis=0) * mask
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}")
            step += 1
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            mhat = m / (1 - beta1**step)
            vhat = v / (1 - beta2**step)
            theta = np.where(mask, _project(theta - lr * mhat / (np.sqrt(vhat) + adam_eps)), theta)
        tr, va = evaluate(theta)
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise TrainingDiverged(f"loss became non-finite at epoch {epoch} (train={tr}, val={va})")
        logbook.epochs.append((epoch, tr, va))
        log.info("epoch %d train %.6f val %.6f", epoch, tr, va)
        if va < best_val:
            best_theta, best_val, stale = theta.copy(), va, 0
            logbook.best_epoch = epoch
        else:
            stale += 1
            if stale >= patience:
                break
    return init.with_vector(best_theta), logbook


def save_params(path, params: CrfParams) -> None:
    from .motio import atomic_write_text

    text = "".join(f"{k}={v!r}\n" for k, v in (
        ("w_u", params.w_u), ("w_d", params.w_d), ("gamma", params.gamma), ("iterations", params.iterations)))
    atomic_write_text(path, text)


def load_params(path, base: CrfParams = CrfParams()) -> CrfParams:
    from pathlib import Path

    vals = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        vals[k.strip()] = v.strip()
    unknown = set(vals) - {"w_u", "w_d", "gamma", "iterations"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    return replace(
        base,
        w_u=float(vals.get("w_u", base.w_u)),
        w_d=float(vals.get("w_d", base.w_d)),
        gamma=float(vals.get("gamma", base.gamma)),
        iterations=int(vals.get("iterations", base.iterations)),
    )
