"""Core MOT data model: boxes, detections, tracks and annotated sequences.

All types are immutable after construction so they can be shared freely
between workers. Boxes follow the MOTChallenge convention: (left, top,
width, height) in continuous pixel units, frame indices are 1-based.
"""

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping


class DegenerateBoxError(ValueError):
    """Raised when a box with non-positive width or height is constructed."""


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateBoxError(
                f"box must have positive extent, got w={self.w}, h={self.h}"
            )

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h


@dataclass(frozen=True)
class Detection:
    frame: int
    box: BoundingBox
    confidence: float = 1.0
    class_id: int = 1

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


class Track:
    """A single identity: an ordered map frame -> BoundingBox.

    Frame indices are strictly increasing; at most one box per frame.
    """

    def __init__(self, track_id: int, entries: Mapping[int, BoundingBox] | None = None):
        if track_id <= 0:
            raise ValueError(f"track id must be positive, got {track_id}")
        self.id = track_id
        boxes = {}
        if entries:
            for frame in sorted(entries):
                if frame in boxes:
                    raise ValueError(f"duplicate frame {frame} in track {track_id}")
                boxes[frame] = entries[frame]
        self._boxes = MappingProxyType(boxes)

    @property
    def entries(self) -> Mapping[int, BoundingBox]:
        return self._boxes

    @property
    def frames(self) -> list:
        return list(self._boxes)

    def __len__(self):
        return len(self._boxes)

    def __eq__(self, other):
        if not isinstance(other, Track):
            return NotImplemented
        return self.id == other.id and dict(self._boxes) == dict(other._boxes)

    def __hash__(self):
        return hash((self.id, tuple(self._boxes)))

    def __repr__(self):
        return f"Track(id={self.id}, frames={len(self)})"


class AnnotatedSequence:
    """A named sequence of frames with a set of annotated tracks."""

    def __init__(self, name: str, frame_count: int, tracks, domain: str = "source"):
        if frame_count <= 0:
            raise ValueError(f"frame_count must be positive, got {frame_count}")
        if domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
        tracks = list(tracks)
        ids = [t.id for t in tracks]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate track ids in sequence {name!r}")
        for t in tracks:
            for frame in t.entries:
                if not (1 <= frame <= frame_count):
                    raise ValueError(
                        f"track {t.id} has frame {frame} outside [1, {frame_count}]"
                    )
        self.name = name
        self.frame_count = frame_count
        self.tracks = tuple(sorted(tracks, key=lambda t: t.id))
        self.domain = domain

    def boxes_at(self, frame: int) -> list:
        """All (track_id, box) pairs present at a frame."""
        return [(t.id, t.entries[frame]) for t in self.tracks if frame in t.entries]

    def __eq__(self, other):
        if not isinstance(other, AnnotatedSequence):
            return NotImplemented
        return (
            self.name == other.name
            and self.frame_count == other.frame_count
            and self.tracks == other.tracks
            and self.domain == other.domain
        )

    def __repr__(self):
        return (
            f"AnnotatedSequence(name={self.name!r}, frames={self.frame_count}, "
            f"tracks={len(self.tracks)}, domain={self.domain})"
        )


@dataclass(frozen=True)
class SequenceStats:
    track_count: int
    detection_count: int
    avg_track_length: float
    avg_detections_per_frame: float
    degenerate: bool = field(default=False)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes. Symmetric, 0 when disjoint."""
    ix = min(a.right, b.right) - max(a.x, b.x)
    iy = min(a.bottom, b.bottom) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def centroid_distance(a: BoundingBox, b: BoundingBox) -> float:
    """Euclidean distance between box centers."""
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def sequence_stats(seq: AnnotatedSequence) -> SequenceStats:
    n_tracks = len(seq.tracks)
    n_det = sum(len(t) for t in seq.tracks)
    if n_tracks == 0:
        return SequenceStats(0, 0, 0.0, 0.0, degenerate=True)
    return SequenceStats(
        track_count=n_tracks,
        detection_count=n_det,
        avg_track_length=n_det / n_tracks,
        avg_detections_per_frame=n_det / seq.frame_count,
    )
