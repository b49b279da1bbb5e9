"""MOTChallenge text files.

Rows are `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z`. Detection
files use id = -1; ground-truth files carry flag, class and visibility in
columns 7-9. Detection rows may carry an appearance descriptor as extra
trailing columns.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Detection, MalformedInputError, Track, box_to_center


@dataclass(frozen=True)
class MotRecord:
    frame: int
    id: int
    left: float
    top: float
    width: float
    height: float
    conf: float = -1.0
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0
    extra: tuple[float, ...] = ()


def format_number(v: float) -> str:
    """Integers without a decimal point, everything else in shortest round-trip form."""
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def parse_mot(lines: Iterable[str], source: str = "<input>") -> list[MotRecord]:
    out = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        cols = [c.strip() for c in line.split(",")]
        if len(cols) < 10:
            raise MalformedInputError(f"{source}:{lineno}: expected at least 10 fields, got {len(cols)}")
        try:
            frame_f, id_f = float(cols[0]), float(cols[1])
            vals = [float(c) for c in cols[2:]]
        except ValueError as exc:
            raise MalformedInputError(f"{source}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in (frame_f, id_f, *vals[:4])):
            raise MalformedInputError(f"{source}:{lineno}: non-finite frame, id or box value")
        if not frame_f.is_integer() or not id_f.is_integer():
            raise MalformedInputError(f"{source}:{lineno}: frame and id must be integers")
        if frame_f < 1:
            raise MalformedInputError(f"{source}:{lineno}: frames are 1-based")
        if vals[2] <= 0 or vals[3] <= 0:
            raise MalformedInputError(f"{source}:{lineno}: box width/height must be positive")
        out.append(MotRecord(int(frame_f), int(id_f), *vals[:8], extra=tuple(vals[8:])))
    # stable: rows within a frame keep file order
    out.sort(key=lambda r: r.frame)
    return out


def read_mot(path) -> list[MotRecord]:
    with open(path) as fh:
        return parse_mot(fh, str(path))


def format_mot(records: Sequence[MotRecord]) -> str:
    lines = []
    for r in records:
        vals = [r.frame, r.id, r.left, r.top, r.width, r.height, r.conf, r.x, r.y, r.z, *r.extra]
        lines.append(",".join(format_number(v) for v in vals))
    return "".join(line + "\n" for line in lines)


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_mot(path, records: Sequence[MotRecord]) -> None:
    atomic_write_text(path, format_mot(records))


# ----------------------------------------------------------------------------
# conversions


def detections_to_records(frames: Iterable[Sequence[Detection]], with_appearance: bool = True) -> list[MotRecord]:
    out = []
    for group in frames:
        for d in group:
            extra = tuple(float(v) for v in d.appearance) if with_appearance and d.appearance is not None else ()
            out.append(MotRecord(d.frame, -1, *d.box, d.confidence, -1.0, -1.0, -1.0, extra))
    out.sort(key=lambda r: r.frame)
    return out


def records_to_detections(records: Sequence[MotRecord]) -> list[list[Detection]]:
    """Group detection rows by frame; index k holds frame k + 1."""
    if not records:
        return []
    last = max(r.frame for r in records)
    frames: list[list[Detection]] = [[] for _ in range(last)]
    for r in records:
        app = None
        if r.extra:
            v = np.array(r.extra)
            norm = np.linalg.norm(v)
            # stored descriptors are already unit-norm; rescaling would break round trips
            app = v if abs(norm - 1.0) <= 1e-9 else v / norm
        conf = min(1.0, max(0.0, r.conf))
        frames[r.frame - 1].append(box_to_center(r.frame, r.left, r.top, r.width, r.height, conf, appearance=app))
    return frames


def tracks_to_records(tracks: Sequence[Track], role: str = "results") -> list[MotRecord]:
    out = []
    for t in tracks:
        for d in t.detections:
            if role == "gt":
                out.append(MotRecord(d.frame, t.id, *d.box, 1.0, 1.0, 1.0))
            else:
                out.append(MotRecord(d.frame, t.id, *d.box, d.confidence, -1.0, -1.0, -1.0))
    out.sort(key=lambda r: (r.frame, r.id))
    return out


def records_to_tracks(records: Sequence[MotRecord], role: str = "results", min_visibility: Optional[float] = None) -> list[Track]:
    """Group rows by id. For gt, rows with flag 0 are ignored and an optional
    visibility floor applies."""
    by_id: dict[int, list[Detection]] = {}
    for r in records:
        if role == "gt":
            if r.conf == 0:
                continue
            if min_visibility is not None and r.z >= 0 and r.z <= min_visibility:
                continue
        conf = min(1.0, max(0.0, r.conf)) if role != "gt" else 1.0
        by_id.setdefault(r.id, []).append(
            box_to_center(r.frame, r.left, r.top, r.width, r.height, conf, identity=r.id if role == "gt" else None)
        )
    tracks = []
    for tid in sorted(by_id):
        dets = sorted(by_id[tid], key=lambda d: d.frame)
        frames = [d.frame for d in dets]
        if len(set(frames)) != len(frames):
            raise MalformedInputError(f"id {tid} has two boxes in one frame")
        tracks.append(Track(tid, tuple(dets)))
    return tracks


def read_detections(path) -> list[list[Detection]]:
    return records_to_detections(read_mot(path))


def write_detections(path, frames: Iterable[Sequence[Detection]], with_appearance: bool = True) -> None:
    write_mot(path, detections_to_records(frames, with_appearance))


def read_tracks(path, role: str = "results", min_visibility: Optional[float] = None) -> list[Track]:
    return records_to_tracks(read_mot(path), role, min_visibility)


def write_tracks(path, tracks: Sequence[Track], role: str = "results") -> None:
    write_mot(path, tracks_to_records(tracks, role))


def format_xy_csv(header: tuple[str, str], rows) -> str:
    """Two-column CSV for plotting (energy traces, metric curves)."""
    out = [f"{header[0]},{header[1]}"]
    out += [f"{format_number(x)},{format_number(y)}" for x, y in rows]
    return "\n".join(out) + "\n"


def parse_xy_csv(text: str) -> list[tuple[float, float]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    return [tuple(float(v) for v in ln.split(",")) for ln in lines[1:]]
