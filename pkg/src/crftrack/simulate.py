"""Synthetic multi-target scenes with ground truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .core import Detection, Track


@dataclass(frozen=True)
class SceneConfig:
    n_targets: int = 8
    n_frames: int = 150
    arena_width: float = 1280.0
    arena_height: float = 720.0
    speed_min: float = 1.0
    speed_max: float = 4.0
    turn_prob: float = 0.02
    crossings: int = 0
    miss_rate: float = 0.05
    fp_rate: float = 0.2
    position_noise: float = 1.0
    appearance_noise: float = 0.1
    appearance_dim: int = 16
    occlusion_max: int = 5
    occlusion_rate: float = 0.01
    occlusion_iou: float = 0.3
    confidence_noise: float = 0.3
    box_width_min: float = 30.0
    box_width_max: float = 50.0
    aspect: float = 2.5
    seed: int = 0

    def __post_init__(self):
        for name in ("miss_rate", "fp_rate", "turn_prob", "occlusion_rate", "confidence_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.arena_width <= 0 or self.arena_height <= 0 or self.n_frames < 1:
            raise ValueError("arena and frame count must be positive")
        if self.n_targets < 0 or self.crossings < 0 or self.occlusion_max < 0:
            raise ValueError("counts must be non-negative")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("need 0 < speed_min <= speed_max")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Scene:
    config: SceneConfig
    gt: list[Track]
    detections: list[list[Detection]]  # index k holds frame k + 1


class CrossingPlanError(RuntimeError):
    pass


def _random_velocity(rng, cfg: SceneConfig) -> np.ndarray:
    ang = rng.uniform(0.0, 2 * np.pi)
    speed = rng.uniform(cfg.speed_min, cfg.speed_max)
    return speed * np.array([np.cos(ang), np.sin(ang)])


def _walk(rng, cfg: SceneConfig, start: np.ndarray, half: np.ndarray, steps: int, direction: int) -> np.ndarray:
    """Piecewise-constant-velocity walk reflecting at the arena borders."""
    lo, hi = half, np.array([cfg.arena_width, cfg.arena_height]) - half
    pos, vel = start.copy(), _random_velocity(rng, cfg)
    out = np.empty((steps, 2))
    for k in range(steps):
        if rng.random() < cfg.turn_prob:
            vel = _random_velocity(rng, cfg)
        pos = pos + direction * vel
        for ax in range(2):
            if pos[ax] < lo[ax]:
                pos[ax] = 2 * lo[ax] - pos[ax]
                vel[ax] = -vel[ax]
            elif pos[ax] > hi[ax]:
                pos[ax] = 2 * hi[ax] - pos[ax]
                vel[ax] = -vel[ax]
        pos = np.clip(pos, lo, hi)
        out[k] = pos
    return out


def _trajectory(rng, cfg: SceneConfig, anchor: np.ndarray, t_anchor: int, half: np.ndarray) -> np.ndarray:
    """Centers for frames 1..n_frames passing through `anchor` at frame `t_anchor`."""
    n = cfg.n_frames
    before = _walk(rng, cfg, anchor, half, t_anchor - 1, -1)[::-1]
    after = _walk(rng, cfg, anchor, half, n - t_anchor, +1)
    return np.vstack([before, anchor[None, :], after])


def iou(a, b) -> float:
    """IoU of two (left, top, width, height) boxes."""
    ax2, ay2 = a[0] + a[2], a[1] + a[3]
    bx2, by2 = b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax2, bx2) - max(a[0], b[0]))
    ih = max(0.0, min(ay2, by2) - max(a[1], b[1]))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _boxes(centers: np.ndarray, size: np.ndarray) -> np.ndarray:
    return np.hstack([centers - size / 2.0, np.broadcast_to(size, centers.shape)])


def count_crossings(centers: list[np.ndarray], sizes: list[np.ndarray]) -> int:
    """Number of maximal frame runs, summed over target pairs, with IoU > 0."""
    total = 0
    boxes = [_boxes(c, s) for c, s in zip(centers, sizes)]
    for a in range(len(boxes)):
        for b in range(a + 1, len(boxes)):
            inside = False
            for ba, bb in zip(boxes[a], boxes[b]):
                hit = iou(ba, bb) > 0
                if hit and not inside:
                    total += 1
                inside = hit
    return total


def _plan(rng, cfg: SceneConfig):
    n, k = cfg.n_targets, cfg.crossings
    if k and n < 2:
        raise CrossingPlanError("crossings need at least two targets")
    widths = rng.uniform(cfg.box_width_min, cfg.box_width_max, size=n)
    sizes = [np.array([w, cfg.aspect * w]) for w in widths]
    centers: list[np.ndarray] = []
    # target e + 1 is anchored onto an earlier target for crossing event e
    events = {}
    for e in range(min(k, n - 1)):
        t_c = int(round(cfg.n_frames * (e + 1) / (k + 1)))
        events[e + 1] = (int(rng.integers(0, e + 1)), max(1, min(cfg.n_frames, t_c)))
    for tid in range(n):
        half = sizes[tid] / 2.0
        if tid in events:
            partner, t_c = events[tid]
            offset = rng.uniform(-0.25, 0.25, size=2) * sizes[tid]
            anchor = centers[partner][t_c - 1] + offset
            lo = half
            hi = np.array([cfg.arena_width, cfg.arena_height]) - half
            anchor = np.clip(anchor, lo, hi)
        else:
            t_c = int(rng.integers(1, cfg.n_frames + 1))
            anchor = np.array([
                rng.uniform(half[0], cfg.arena_width - half[0]),
                rng.uniform(half[1], cfg.arena_height - half[1]),
            ])
        centers.append(_trajectory(rng, cfg, anchor, t_c, half))
    return centers, sizes


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def generate_scene(cfg: SceneConfig, max_attempts: int = 50) -> Scene:
    """Ground-truth tracks plus noisy detections, deterministic per seed.

    Crossing events are planted by anchoring targets onto each other at
    spread-out frames; the plan is redrawn until at least `cfg.crossings`
    overlapping intervals are verified.
    """
    rng = np.random.default_rng(cfg.seed)
    for _ in range(max_attempts):
        centers, sizes = _plan(rng, cfg)
        if count_crossings(centers, sizes) >= cfg.crossings:
            break
    else:
        raise CrossingPlanError(f"could not plant {cfg.crossings} crossings in {max_attempts} attempts")

    n, T = cfg.n_targets, cfg.n_frames
    base = [_unit(rng, cfg.appearance_dim) for _ in range(n)]
    gt_dets = [[] for _ in range(n)]
    for tid in range(n):
        for f in range(T):
            gt_dets[tid].append(Detection.from_center(f + 1, centers[tid][f], sizes[tid], confidence=1.0,
                                                      appearance=base[tid], identity=tid + 1))
    gt = [Track(tid + 1, tuple(gt_dets[tid])) for tid in range(n)]

    visible = np.ones((n, T), dtype=bool)
    for tid in range(n):
        f = 0
        while f < T:
            if cfg.occlusion_max and rng.random() < cfg.occlusion_rate:
                length = int(rng.integers(1, cfg.occlusion_max + 1))
                visible[tid, f:f + length] = False
                f += length
            else:
                f += 1
    if cfg.occlusion_max:
        # the target higher in the image (farther away) is hidden behind the nearer one
        boxes = [_boxes(c, s) for c, s in zip(centers, sizes)]
        run = np.zeros(n, dtype=int)
        for f in range(T):
            hidden = set()
            for a in range(n):
                for b in range(a + 1, n):
                    if iou(boxes[a][f], boxes[b][f]) > cfg.occlusion_iou:
                        far = a if boxes[a][f][1] + boxes[a][f][3] < boxes[b][f][1] + boxes[b][f][3] else b
                        hidden.add(far)
            for tid in range(n):
                if tid in hidden and run[tid] < cfg.occlusion_max:
                    visible[tid, f] = False
                    run[tid] += 1
                elif tid not in hidden:
                    run[tid] = 0

    frames: list[list[Detection]] = [[] for _ in range(T)]
    for f in range(T):
        for tid in range(n):
            if not visible[tid, f] or rng.random() < cfg.miss_rate:
                continue
            c = centers[tid][f] + rng.normal(0.0, cfg.position_noise, size=2) if cfg.position_noise else centers[tid][f]
            app = base[tid]
            if cfg.appearance_noise:
                app = base[tid] + rng.normal(0.0, cfg.appearance_noise, size=cfg.appearance_dim)
                app = app / np.linalg.norm(app)
            conf = 1.0 - cfg.confidence_noise * rng.random()
            frames[f].append(Detection.from_center(f + 1, c, sizes[tid], confidence=conf, appearance=app, identity=tid + 1))
        if rng.random() < cfg.fp_rate:
            w = rng.uniform(cfg.box_width_min, cfg.box_width_max)
            sz = np.array([w, cfg.aspect * w])
            c = np.array([rng.uniform(sz[0] / 2, cfg.arena_width - sz[0] / 2), rng.uniform(sz[1] / 2, cfg.arena_height - sz[1] / 2)])
            frames[f].append(Detection.from_center(f + 1, c, sz, confidence=0.5 * rng.random(),
                                                   appearance=_unit(rng, cfg.appearance_dim)))
    return Scene(cfg, gt, frames)


def scene_tracks_by_identity(dets: list[list[Detection]]) -> dict[Optional[int], list[Detection]]:
    out: dict[Optional[int], list[Detection]] = {}
    for group in dets:
        for d in group:
            out.setdefault(d.identity, []).append(d)
    return out
