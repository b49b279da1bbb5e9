"""Reproducible experiment drivers shared by the command line and the tests:
random CRF instances, the oracle sweep, provider fitting, the planted-model
training run and the unary-vs-CRF ablation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize

from .association import associate_round, check_one_to_one, tracks_to_tracklets, two_round
from .core import CrfParams, Track, Tracklet
from .graph import DifficultPairConfig
from .inference import CrfPotentials, brute_force_minimize, decode, energy_integer, infer, normalize
from .learning import (
    CrfModel,
    TrainingWindow,
    decoded_accuracy,
    loss_floor_active,
    mean_loss,
    train,
    unary_frozen_mask,
    windows_from_tracklets,
    _forward,
)
from .metrics import MetricsReport, evaluate, iou_matrix
from .potentials import (
    LogisticPairProvider,
    LogisticUnaryProvider,
    zero_pair_provider,
    zero_unary_provider,
)
from .simulate import SceneConfig, generate_scene
from .tracklets import LinkThresholds, link_detections

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# random instances


def random_edges(rng, n: int, density: float) -> np.ndarray:
    """Each unordered node pair becomes an edge with probability `density`."""
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < density
    return np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)


def random_potentials(rng, n: int, density: float = 0.3, kind: str = "model", params: CrfParams = CrfParams()) -> CrfPotentials:
    """Random instance.

    kind="model" draws unary and joint probabilities uniformly and builds the
    potentials exactly as a graph would; kind="arbitrary" draws the tables
    directly from N(0, 1) (no structure), starting from a random simplex point.
    """
    edges = random_edges(rng, n, density)
    m = len(edges)
    if kind == "arbitrary":
        return CrfPotentials(rng.normal(size=(n, 2)), rng.normal(size=(m, 2, 2)), edges, q0=normalize(rng.normal(size=(n, 2))))
    if kind != "model":
        raise ValueError(f"unknown instance kind {kind!r}")
    eps = params.epsilon
    z1 = rng.uniform(0.02, 0.98, size=n)
    z = np.stack([1 - z1, z1], axis=1)
    pi, pj = rng.uniform(0.02, 0.98, size=m), rng.uniform(0.02, 0.98, size=m)
    zi = np.stack([1 - pi, pi], axis=1)
    zj = np.stack([1 - pj, pj], axis=1)
    pair = -params.w_d * np.log(zi[:, :, None] * zj[:, None, :] + eps)
    return CrfPotentials(-params.w_u * np.log(z + eps), pair, edges, q0=z)


@dataclass
class OracleRow:
    seed: int
    n_nodes: int
    n_edges: int
    oracle: float
    decoded: float

    @property
    def gap(self) -> float:
        return (self.decoded - self.oracle) / max(abs(self.oracle), 1.0)

    @property
    def agree(self) -> bool:
        return self.gap <= 1e-12


def oracle_check(sizes: Sequence[int], seeds: Sequence[int], density: float = 0.3,
                 params: CrfParams = CrfParams()) -> list[OracleRow]:
    """Decoded energy against exhaustive search, one row per (seed, size)."""
    rows = []
    for seed in seeds:
        for n in sizes:
            rng = np.random.default_rng([seed, n])
            p = random_potentials(rng, n, density, "model", params)
            _, best = brute_force_minimize(p)
            x = decode(infer(p, params).final_q)
            rows.append(OracleRow(seed, n, p.n_edges, best, energy_integer(p, x)))
    return rows


def oracle_csv(rows: Sequence[OracleRow]) -> str:
    out = ["seed,n_nodes,n_edges,oracle,decoded,gap,agree"]
    for r in rows:
        out.append(f"{r.seed},{r.n_nodes},{r.n_edges},{r.oracle!r},{r.decoded!r},{r.gap!r},{int(r.agree)}")
    if rows:
        out.append(f"# mean_gap={np.mean([r.gap for r in rows])!r} agreement={np.mean([r.agree for r in rows])!r}")
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------------------
# simulator scenes to tracklets


def scene_tracklets(cfg: SceneConfig, thr: LinkThresholds = LinkThresholds(), velocity_window: int = 5):
    scene = generate_scene(cfg)
    return scene, link_detections(scene.detections, thr, velocity_window)


def ablation_config(seed: int) -> SceneConfig:
    """Crowded scene with planted crossings, 10% misses and 2 px noise.

    Appearance noise 0.15 keeps identities separable for frame linking while
    leaving some long-gap links ambiguous for a unary-only decision.
    """
    return SceneConfig(n_targets=10, n_frames=150, crossings=3, miss_rate=0.1, position_noise=2.0,
                       appearance_noise=0.15, seed=seed)


# ----------------------------------------------------------------------------
# provider fitting


def _fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-5, balance: bool = True) -> np.ndarray:
    """Weighted L2-regularized logistic regression; returns [weights, bias]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y)
    if balance and 0 < y.sum() < y.size:
        w = np.where(y > 0, 0.5 / y.mean(), 0.5 / (1 - y.mean()))
    w = w / w.sum()
    xb = np.hstack([x, np.ones((len(x), 1))])

    def f(theta):
        s = xb @ theta
        nll = np.sum(w * (np.logaddexp(0.0, s) - y * s))
        r = 0.5 * l2 * theta[:-1] @ theta[:-1]
        p = 0.5 * (1 + np.tanh(0.5 * s))
        g = xb.T @ (w * (p - y))
        g[:-1] += l2 * theta[:-1]
        return nll + r, g

    res = minimize(f, np.zeros(xb.shape[1]), jac=True, method="L-BFGS-B")
    return res.x


def fit_providers(windows: Sequence[TrainingWindow], l2: float = 1e-5, balance: bool = False) -> tuple[LogisticUnaryProvider, LogisticPairProvider]:
    """Fit both providers directly to node labels (the pair heads to their own node's label)."""
    xu = np.vstack([w.unary_design for w in windows])
    yu = np.concatenate([w.gt_labels for w in windows])
    unary = LogisticUnaryProvider()
    unary.set_params(_fit_logistic(xu, yu, l2, balance))
    xs, ys = [], []
    for w in windows:
        if len(w.edges):
            xs += [w.pair_design_i, w.pair_design_j]
            ys += [w.gt_labels[w.edges[:, 0]], w.gt_labels[w.edges[:, 1]]]
    pair = LogisticPairProvider()
    if xs:
        pair.set_params(_fit_logistic(np.vstack(xs), np.concatenate(ys), l2, balance))
    return unary, pair


def training_windows(seeds: Sequence[int], config=ablation_config, t_thr: int = 20, window_size: int = 200,
                     overlap: float = 0.5) -> list[TrainingWindow]:
    out = []
    for s in seeds:
        _, tracklets = scene_tracklets(config(s))
        out += windows_from_tracklets(tracklets, t_thr, window_size, overlap)
    return out


# ----------------------------------------------------------------------------
# planted-model training


def planted_config(seed: int) -> SceneConfig:
    return SceneConfig(n_targets=6, n_frames=80, crossings=2, miss_rate=0.1, position_noise=2.0,
                       appearance_noise=0.3, seed=seed)


def planted_model() -> CrfModel:
    return CrfModel(CrfParams(w_u=1.5, w_d=0.7, gamma=0.4), LogisticUnaryProvider(), LogisticPairProvider())


def initial_model() -> CrfModel:
    """Training start: unit potential weights, the default step and uninformative providers."""
    return CrfModel(CrfParams(), zero_unary_provider(), zero_pair_provider())


def relabel_planted(windows: Sequence[TrainingWindow], model: CrfModel) -> list[TrainingWindow]:
    """Replace labels with the planted model's decoded output."""
    out = []
    for w in windows:
        _, pot = _forward(w, model, keep=False)
        x = decode(infer(pot, model.params).final_q, pot)
        out.append(replace(w, gt_labels=x))
    return out


@dataclass
class PlantedResult:
    seed: int
    initial_val: float
    final_val: float
    initial_acc: float
    final_acc: float
    clamped: bool
    model: CrfModel = field(repr=False)
    log: object = field(repr=False, default=None)

    @property
    def loss_ratio(self) -> float:
        return self.final_val / self.initial_val


def planted_experiment(seed: int, lr: float = 0.1, epochs: int = 12, batch: int = 8,
                       window_size: int = 60, patience: int = 10) -> PlantedResult:
    """Train from uninformative providers on labels produced by a planted model."""
    planted = planted_model()
    tr = training_windows([2 * seed, 2 * seed + 1], planted_config, window_size=window_size)
    va = training_windows([10_000 + seed], planted_config, window_size=window_size)
    tr, va = relabel_planted(tr, planted), relabel_planted(va, planted)
    init = initial_model()
    i_val, i_acc = mean_loss(va, init), decoded_accuracy(va, init)
    fitted, logbook = train(tr, init, lr=lr, epochs=epochs, batch=batch, val_windows=va, patience=patience, seed=seed)
    clamped = any(loss_floor_active(w, m) for w in tr + va for m in (init, fitted))
    return PlantedResult(seed, i_val, mean_loss(va, fitted), i_acc, decoded_accuracy(va, fitted), clamped, fitted, logbook)


# ----------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    seed: int
    unary: MetricsReport
    crf: MetricsReport


def links_of(rounds) -> list[list[tuple[int, int]]]:
    return [r.result.links() for r in rounds]


def run_modes(tracklets: Sequence[Tracklet], params: CrfParams, unary: LogisticUnaryProvider,
              pair: LogisticPairProvider, cfg: DifficultPairConfig = DifficultPairConfig(), jobs: int = 1):
    out = {}
    for mode in ("unary", "crf"):
        tracks, rounds = two_round(tracklets, params, unary, pair, mode, cfg, jobs=jobs)
        for links in links_of(rounds):
            check_one_to_one(links)
        out[mode] = tracks
    return out


def two_round_windows_for(tracklets: Sequence[Tracklet], unary: LogisticUnaryProvider, params: CrfParams = CrfParams(),
                          window_size: int = 200, velocity_window: int = 5) -> list[TrainingWindow]:
    """Windows from both association rounds: round 1 over the raw tracklets,
    round 2 over the tracks that unary-only association stitches from them."""
    out = windows_from_tracklets(tracklets, params.T_thr_round1, window_size)
    r1 = associate_round(tracklets, params.T_thr_round1, "unary", params, unary, zero_pair_provider())
    out += windows_from_tracklets(tracks_to_tracklets(r1.tracks, velocity_window), params.T_thr_round2, window_size)
    return out


def two_round_windows(seeds: Sequence[int], unary: LogisticUnaryProvider, params: CrfParams = CrfParams(),
                      config=ablation_config, window_size: int = 200) -> list[TrainingWindow]:
    out = []
    for s in seeds:
        _, tracklets = scene_tracklets(config(s))
        out += two_round_windows_for(tracklets, unary, params, window_size)
    return out


def attach_identities(frames: Sequence[Sequence], gt: Sequence[Track], iou_threshold: float = 0.5) -> list[list]:
    """Give each detection the id of the gt box it overlaps best (IoU matching per frame)."""
    gt_boxes: dict[int, list[tuple[int, tuple]]] = {}
    for t in gt:
        for d in t.detections:
            gt_boxes.setdefault(d.frame, []).append((t.id, d.box))
    out = []
    for group in frames:
        group = list(group)
        if not group:
            out.append([])
            continue
        cands = gt_boxes.get(group[0].frame, [])
        labelled = [d.replace(identity=None) for d in group]
        if cands:
            ious = iou_matrix(np.array([d.box for d in group]), np.array([b for _, b in cands]))
            rows, cols = linear_sum_assignment(-ious)
            for r, c in zip(rows, cols):
                if ious[r, c] >= iou_threshold:
                    labelled[r] = group[r].replace(identity=cands[c][0])
        out.append(labelled)
    return out


def fitted_ablation_model(train_seeds: Sequence[int] = (1000, 1001, 1002), val_seeds: Sequence[int] = (1003,),
                          lr: float = 0.02, epochs: int = 15, patience: int = 5,
                          unary_l2: float = 1e-3) -> CrfModel:
    """Fit the unary provider by logistic regression, then train the CRF
    weights and the pair provider end to end with the unary provider frozen,
    starting from an uninformative pair provider (so the untrained CRF
    coincides with unary-only inference).

    The unary fit is deliberately more regularized than the calibrated
    default: a less confident unary leaves the baseline ambiguous links
    for the pairwise terms to resolve.
    """
    unary, _ = fit_providers(training_windows(train_seeds), l2=unary_l2)
    tr = two_round_windows(train_seeds, unary)
    va = two_round_windows(val_seeds, unary)
    init = CrfModel(CrfParams(), unary, zero_pair_provider())
    model, _ = train(tr, init, lr=lr, epochs=epochs, val_windows=va, patience=patience, trainable=unary_frozen_mask())
    return model


def ablation(seeds: Sequence[int], model: Optional[CrfModel] = None, jobs: int = 1) -> list[AblationRow]:
    """Both modes on the same tracklets of each scene; unary mode uses the
    same unary provider as the CRF."""
    model = model or fitted_ablation_model()
    rows = []
    for s in seeds:
        scene, tracklets = scene_tracklets(ablation_config(s))
        res = run_modes(tracklets, model.params, model.unary, model.pair, jobs=jobs)
        rows.append(AblationRow(s, evaluate(scene.gt, res["unary"]), evaluate(scene.gt, res["crf"])))
    return rows


def strictly_better(row: AblationRow) -> bool:
    u, c = row.unary, row.crf
    return (c.MOTA, -c.IDS) > (u.MOTA, -u.IDS) and c.MOTA >= u.MOTA and c.IDS <= u.IDS


def ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'seed':>6} {'MOTA(U)':>9} {'MOTA(CRF)':>10} {'IDS(U)':>7} {'IDS(CRF)':>9} {'IDF1(U)':>8} {'IDF1(CRF)':>10}"]
    for r in rows:
        lines.append(f"{r.seed:>6} {r.unary.MOTA:>9.4f} {r.crf.MOTA:>10.4f} {r.unary.IDS:>7} {r.crf.IDS:>9} "
                     f"{r.unary.IDF1:>8.4f} {r.crf.IDF1:>10.4f}")
    if rows:
        mu = np.mean([r.unary.MOTA for r in rows]), np.mean([r.crf.MOTA for r in rows])
        iu = np.mean([r.unary.IDS for r in rows]), np.mean([r.crf.IDS for r in rows])
        fu = np.mean([r.unary.IDF1 for r in rows]), np.mean([r.crf.IDF1 for r in rows])
        lines.append(f"{'mean':>6} {mu[0]:>9.4f} {mu[1]:>10.4f} {iu[0]:>7.2f} {iu[1]:>9.2f} {fu[0]:>8.4f} {fu[1]:>10.4f}")
    return "\n".join(lines)
