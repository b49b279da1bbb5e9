"""CLEAR-MOT and IDF1 scores."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Track


@dataclass(frozen=True)
class MetricsReport:
    MOTA: float
    MOTP: float
    IDF1: float
    MT: float
    ML: float
    FP: int
    FN: int
    IDS: int
    FM: int
    num_gt: int = 0
    num_matches: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        d = self.as_dict()
        keys = list(d)
        cells = [_fmt(d[k]) for k in keys]
        widths = [max(len(k), len(c)) for k, c in zip(keys, cells)]
        head = "  ".join(k.rjust(w) for k, w in zip(keys, widths))
        row = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return head + "\n" + row

    def csv(self) -> str:
        d = self.as_dict()
        return ",".join(d) + "\n" + ",".join(_fmt(v) for v in d.values()) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (left, top, width, height) rows."""
    if a.size == 0 or b.size == 0:
        return np.zeros((len(a), len(b)))
    ax1, ay1, ax2, ay2 = a[:, 0], a[:, 1], a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1, bx2, by2 = b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2[:, None], bx2[None]) - np.maximum(ax1[:, None], bx1[None]), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None]) - np.maximum(ay1[:, None], by1[None]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def _by_frame(tracks: Sequence[Track]) -> dict[int, tuple[list[int], np.ndarray]]:
    rows: dict[int, list[tuple[int, tuple]]] = {}
    for t in tracks:
        for d in t.detections:
            rows.setdefault(d.frame, []).append((t.id, d.box))
    out = {}
    for f, items in rows.items():
        items.sort(key=lambda x: x[0])
        ids = [i for i, _ in items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate track id in frame {f}")
        out[f] = (ids, np.array([b for _, b in items], dtype=np.float64).reshape(-1, 4))
    return out


def evaluate(gt: Sequence[Track], result: Sequence[Track], iou_threshold: float = 0.5) -> MetricsReport:
    gt_f, res_f = _by_frame(gt), _by_frame(result)
    frames = sorted(set(gt_f) | set(res_f))
    empty = ([], np.zeros((0, 4)))

    last_match: dict[int, int] = {}  # gt id -> result id of its latest match
    prev: dict[int, int] = {}  # matches of the previous frame
    tp_pairs: dict[tuple[int, int], int] = {}
    matched_frames: dict[int, int] = {}
    gt_len: dict[int, int] = {}
    status: dict[int, list[bool]] = {}
    fp = fn = ids = 0
    iou_sum, n_match, n_gt, n_res = 0.0, 0, 0, 0

    for f in frames:
        g_ids, g_box = gt_f.get(f, empty)
        r_ids, r_box = res_f.get(f, empty)
        n_gt += len(g_ids)
        n_res += len(r_ids)
        ious = iou_matrix(g_box, r_box)
        for a, g in enumerate(g_ids):
            gt_len[g] = gt_len.get(g, 0) + 1
            for b, r in enumerate(r_ids):
                if ious[a, b] >= iou_threshold:
                    tp_pairs[(g, r)] = tp_pairs.get((g, r), 0) + 1

        g_pos = {g: a for a, g in enumerate(g_ids)}
        r_pos = {r: b for b, r in enumerate(r_ids)}
        matches: dict[int, int] = {}
        for g, r in prev.items():
            if g in g_pos and r in r_pos and ious[g_pos[g], r_pos[r]] >= iou_threshold:
                matches[g] = r
        free_g = [a for a, g in enumerate(g_ids) if g not in matches]
        used_r = set(matches.values())
        free_r = [b for b, r in enumerate(r_ids) if r not in used_r]
        if free_g and free_r:
            sub = ious[np.ix_(free_g, free_r)]
            cost = np.where(sub >= iou_threshold, 1.0 - sub, 1e6)
            rows, cols = linear_sum_assignment(cost)
            for a, b in zip(rows, cols):
                if sub[a, b] >= iou_threshold:
                    matches[g_ids[free_g[a]]] = r_ids[free_r[b]]

        for g, r in matches.items():
            if g in last_match and last_match[g] != r:
                ids += 1
            last_match[g] = r
            iou_sum += ious[g_pos[g], r_pos[r]]
            matched_frames[g] = matched_frames.get(g, 0) + 1
        for g in g_ids:
            status.setdefault(g, []).append(g in matches)
        n_match += len(matches)
        fn += len(g_ids) - len(matches)
        fp += len(r_ids) - len(matches)
        prev = matches

    fm = 0
    for seq in status.values():
        seen_match, gap = False, False
        for s in seq:
            if s:
                if seen_match and gap:
                    fm += 1
                seen_match, gap = True, False
            elif seen_match:
                gap = True

    if n_gt:
        mota = 1.0 - (fp + fn + ids) / n_gt
    else:
        mota = 1.0 if fp == 0 else -math.inf
    motp = iou_sum / n_match if n_match else 0.0

    g_list = sorted(gt_len)
    r_list = sorted({r for ids_, _ in res_f.values() for r in ids_})
    idtp = 0
    if g_list and r_list:
        w = np.zeros((len(g_list), len(r_list)))
        gi = {g: k for k, g in enumerate(g_list)}
        ri = {r: k for k, r in enumerate(r_list)}
        for (g, r), c in tp_pairs.items():
            w[gi[g], ri[r]] = c
        rows, cols = linear_sum_assignment(-w)
        idtp = int(w[rows, cols].sum())
    idf1 = 2.0 * idtp / (n_gt + n_res) if (n_gt + n_res) else 1.0

    cover = [matched_frames.get(g, 0) / gt_len[g] for g in g_list]
    mt = float(np.mean([c >= 0.8 for c in cover])) if cover else 0.0
    ml = float(np.mean([c <= 0.2 for c in cover])) if cover else 0.0
    return MetricsReport(mota, motp, idf1, mt, ml, fp, fn, ids, fm, n_gt, n_match)


def frame_range(tracks: Sequence[Track]) -> Optional[tuple[int, int]]:
    frames = [d.frame for t in tracks for d in t.detections]
    return (min(frames), max(frames)) if frames else None


def restrict_frames(tracks: Sequence[Track], lo: int, hi: int) -> list[Track]:
    """Keep detections with lo <= frame <= hi; tracks left empty are dropped."""
    out = []
    for t in tracks:
        keep = [(d, f) for d, f in zip(t.detections, t.interpolated) if lo <= d.frame <= hi]
        if keep:
            out.append(Track(t.id, tuple(d for d, _ in keep), tuple(f for _, f in keep)))
    return out
