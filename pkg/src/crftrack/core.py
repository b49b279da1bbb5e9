"""Domain types shared across the tracker.

Positions are bounding-box centers in pixels and frames are 1-based, matching
the MOTChallenge text format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np


class MalformedInputError(ValueError):
    """Raised when raw input (boxes, rows, config) violates its format."""


class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented precondition."""


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Detection:
    """One box observation.

    `center` and `size` are the canonical geometry. The top-left corner is kept
    alongside so that box -> center -> box round trips are exact.
    """

    frame: int
    center: tuple[float, float]
    size: tuple[float, float]
    confidence: float = 1.0
    appearance: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    identity: Optional[int] = None
    corner: tuple[float, float] = field(default=None, compare=False, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise MalformedInputError(f"box size must be positive, got {self.size}")
        if self.frame < 1:
            raise MalformedInputError(f"frames are 1-based, got {self.frame}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "size", (float(self.size[0]), float(self.size[1])))
        if self.corner is None:
            corner = (self.center[0] - self.size[0] / 2.0, self.center[1] - self.size[1] / 2.0)
            object.__setattr__(self, "corner", corner)
        if self.appearance is not None:
            app = _readonly(self.appearance)
            norm = float(np.linalg.norm(app))
            if abs(norm - 1.0) > 1e-6:
                raise MalformedInputError(f"appearance must be unit-norm, got norm {norm}")
            object.__setattr__(self, "appearance", app)

    @classmethod
    def from_center(cls, frame, center, size, **kw) -> "Detection":
        c = (float(center[0]), float(center[1]))
        s = (float(size[0]), float(size[1]))
        return cls(frame=int(frame), center=c, size=s, **kw)

    @property
    def box(self) -> tuple[float, float, float, float]:
        """(left, top, width, height)."""
        return (self.corner[0], self.corner[1], self.size[0], self.size[1])

    @property
    def diagonal(self) -> float:
        return float(np.hypot(*self.size))

    def replace(self, **changes) -> "Detection":
        fields = dict(
            frame=self.frame,
            center=self.center,
            size=self.size,
            confidence=self.confidence,
            appearance=self.appearance,
            identity=self.identity,
        )
        if "center" not in changes and "size" not in changes:
            fields["corner"] = self.corner
        fields.update(changes)
        return Detection(**fields)


def box_to_center(frame, left, top, width, height, confidence=1.0, **kw) -> Detection:
    """Build a detection from a MOT-style (left, top, width, height) box."""
    if not (width > 0 and height > 0):
        raise MalformedInputError(f"width and height must be positive, got {width}x{height}")
    center = (left + width / 2.0, top + height / 2.0)
    return Detection(
        frame=int(frame),
        center=center,
        size=(width, height),
        confidence=float(confidence),
        corner=(float(left), float(top)),
        **kw,
    )


@dataclass(frozen=True, eq=False)
class Tracklet:
    """Detections of one target in consecutive frames.

    Build with `tracklets.make_tracklet`, which fills velocities and the
    representative appearance. Identity is by `id`.
    """

    id: int
    detections: tuple[Detection, ...]
    head_velocity: np.ndarray
    tail_velocity: np.ndarray
    appearance: Optional[np.ndarray] = None
    interpolated: tuple[bool, ...] = ()

    def __post_init__(self):
        dets = tuple(self.detections)
        if not dets:
            raise ContractViolation("a tracklet needs at least one detection")
        frames = [d.frame for d in dets]
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise ContractViolation(f"tracklet {self.id} frames are not consecutive: {frames}")
        object.__setattr__(self, "detections", dets)
        object.__setattr__(self, "head_velocity", _readonly(self.head_velocity))
        object.__setattr__(self, "tail_velocity", _readonly(self.tail_velocity))
        if self.appearance is not None:
            object.__setattr__(self, "appearance", _readonly(self.appearance))
        flags = tuple(bool(f) for f in self.interpolated) or (False,) * len(dets)
        if len(flags) != len(dets):
            raise ContractViolation("interpolated flags must match detections")
        object.__setattr__(self, "interpolated", flags)

    def __repr__(self):
        return f"Tracklet(id={self.id}, frames={self.t_s}..{self.t_e})"

    def __len__(self):
        return len(self.detections)

    @property
    def t_s(self) -> int:
        return self.detections[0].frame

    @property
    def t_e(self) -> int:
        return self.detections[-1].frame

    @property
    def head(self) -> np.ndarray:
        return np.array(self.detections[0].center)

    @property
    def tail(self) -> np.ndarray:
        return np.array(self.detections[-1].center)

    @cached_property
    def mean_diagonal(self) -> float:
        return float(np.mean([d.diagonal for d in self.detections]))

    @cached_property
    def mean_width(self) -> float:
        return float(np.mean([d.size[0] for d in self.detections]))

    def center_at(self, frame: int) -> np.ndarray:
        """Observed center inside the span, constant-velocity extrapolation outside."""
        if frame < self.t_s:
            return self.head + self.head_velocity * (frame - self.t_s)
        if frame > self.t_e:
            return self.tail + self.tail_velocity * (frame - self.t_e)
        return np.array(self.detections[frame - self.t_s].center)

    def identity(self) -> Optional[int]:
        """Majority ground-truth identity of the real detections, if any."""
        ids = [d.identity for d, f in zip(self.detections, self.interpolated) if not f and d.identity is not None]
        if not ids:
            return None
        values, counts = np.unique(ids, return_counts=True)
        return int(values[np.argmax(counts)])


@dataclass(frozen=True)
class CrfNode:
    """A linkable ordered tracklet pair first -> second."""

    index: int
    first: Tracklet
    second: Tracklet
    unary_prob: tuple[float, float]

    def __post_init__(self):
        gap = self.second.t_s - self.first.t_e
        if gap <= 0:
            raise ContractViolation(f"node {self.index}: second tracklet must start after first ends (gap {gap})")
        z0, z1 = self.unary_prob
        if not (0.0 <= z0 <= 1.0 and 0.0 <= z1 <= 1.0) or abs(z0 + z1 - 1.0) > 1e-9:
            raise ContractViolation(f"node {self.index}: invalid unary probabilities {self.unary_prob}")

    @property
    def gap(self) -> int:
        return self.second.t_s - self.first.t_e

    @property
    def key(self) -> str:
        return f"{self.first.id}->{self.second.id}"


CONSISTENCY = "consistency"
REPELLENCY = "repellency"


@dataclass(frozen=True)
class CrfEdge:
    """A difficult node pair. `joint_prob` holds the label-1 probabilities of
    node i and node j given the pair context."""

    i: int
    j: int
    kind: str
    joint_prob: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if self.i == self.j:
            raise ContractViolation("self-loop edge")
        if self.kind not in (CONSISTENCY, REPELLENCY):
            raise ContractViolation(f"unknown edge kind {self.kind!r}")

    def potential(self, w_d: float, eps: float) -> np.ndarray:
        from .potentials import pairwise_potential

        return pairwise_potential(self.joint_prob[0], self.joint_prob[1], w_d, eps)


@dataclass(frozen=True)
class CrfParams:
    w_u: float = 1.0
    w_d: float = 1.0
    gamma: float = 0.5
    epsilon: float = 1e-6
    iterations: int = 5
    T_thr_round1: int = 20
    T_thr_round2: int = 50
    window_size: int = 200
    projection: str = "softmax"

    def __post_init__(self):
        if self.w_u < 0 or self.w_d < 0:
            raise MalformedInputError("w_u and w_d must be non-negative")
        if self.gamma <= 0 or self.epsilon <= 0:
            raise MalformedInputError("gamma and epsilon must be positive")
        if self.iterations < 0 or self.window_size < 1:
            raise MalformedInputError("iterations must be >= 0 and window_size >= 1")
        if self.projection not in ("softmax", "clip-renorm"):
            raise MalformedInputError(f"unknown projection {self.projection!r}")


@dataclass(frozen=True, eq=False)
class Track:
    """A stitched trajectory; `interpolated[k]` marks filled-in boxes."""

    id: int
    detections: tuple[Detection, ...]
    interpolated: tuple[bool, ...] = ()

    def __post_init__(self):
        dets = tuple(self.detections)
        object.__setattr__(self, "detections", dets)
        flags = tuple(bool(f) for f in self.interpolated) or (False,) * len(dets)
        if len(flags) != len(dets):
            raise ContractViolation("interpolated flags must match detections")
        object.__setattr__(self, "interpolated", flags)
        frames = [d.frame for d in dets]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ContractViolation(f"track {self.id} frames must be strictly increasing")

    def __len__(self):
        return len(self.detections)

    @property
    def frames(self) -> list[int]:
        return [d.frame for d in self.detections]

    @property
    def t_s(self) -> int:
        return self.detections[0].frame

    @property
    def t_e(self) -> int:
        return self.detections[-1].frame

    def is_contiguous(self) -> bool:
        return self.t_e - self.t_s + 1 == len(self.detections)


def unit(v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise MalformedInputError("cannot normalize a zero vector")
    return v / n
