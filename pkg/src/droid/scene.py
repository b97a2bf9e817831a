"""Driving-clip domain model: tracklets, Thing/Stuff objects, masks, camera geometry."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from droid.errors import DroidError


class Intention(enum.IntEnum):
    BG = 0   # background
    IP = 1   # intersection passing
    LT = 2   # left turn
    RT = 3   # right turn
    LLC = 4  # left lane change
    RLC = 5  # right lane change
    LLB = 6  # left lane branch
    RLB = 7  # right lane branch
    CP = 8   # crosswalk passing
    RP = 9   # railroad passing
    MG = 10  # merge
    UT = 11  # u-turn


class Response(enum.IntEnum):
    GO = 0
    STOP = 1


class Stimulus(str, enum.Enum):
    STOP = "stop"
    DEVIATE = "deviate"


THING_CATEGORIES = ("car", "person", "bicycle", "motorcycle", "bus", "train", "truck")
STUFF_CATEGORIES = (
    "crosswalk", "lane_markings", "lane_separator", "road",
    "service_lane", "traffic_island", "traffic_light", "traffic_sign",
)
LIGHT_STATES = {"red": 1.0, "green": -1.0}


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DroidError("invalid_intrinsics", f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, point: Sequence[float]) -> tuple[float, float]:
        x, y, z = point
        return self.fx * x / z + self.cx, self.fy * y / z + self.cy


@dataclass(frozen=True)
class BoundingBox:
    """Pixel box with half-open extent ``[x1, x2) x [y1, y2)``."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise DroidError("invalid_box", f"box corners out of order: {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def intersect(self, other: BoundingBox) -> BoundingBox | None:
        x1, y1 = max(self.x1, other.x1), max(self.y1, other.y1)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x2 <= x1 or y2 <= y1:
            return None
        return BoundingBox(x1, y1, x2, y2)

    def contains(self, u: float, v: float) -> bool:
        return self.x1 <= u < self.x2 and self.y1 <= v < self.y2

    def within(self, height: int, width: int) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


@dataclass
class Tracklet:
    id: int
    category: str
    boxes: list[BoundingBox | None]

    def __post_init__(self):
        if self.category not in THING_CATEGORIES:
            raise DroidError("invalid_category", f"unknown Thing category {self.category!r}")
        if all(b is None for b in self.boxes):
            raise DroidError("empty_tracklet", f"tracklet {self.id} has no boxes")

    def box(self, t: int) -> BoundingBox | None:
        return self.boxes[t]

    @property
    def last_box(self) -> BoundingBox | None:
        return self.boxes[-1]


@dataclass
class StuffRegion:
    """A Stuff object drawn as one rectangle per frame (``None`` = absent).

    ``states`` carries the optional scalar state channel, e.g. the colour of
    a traffic light.
    """

    category: str
    rects: list[BoundingBox | None]
    states: list[str | None] | None = None

    def __post_init__(self):
        if self.category not in STUFF_CATEGORIES:
            raise DroidError("invalid_category", f"unknown Stuff category {self.category!r}")
        if self.states is None:
            self.states = [None] * len(self.rects)

    def state_value(self, t: int) -> float:
        state = self.states[t]
        return LIGHT_STATES.get(state, 0.0) if state else 0.0

    def mask(self, t: int, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=np.uint8)
        r = self.rects[t]
        if r is not None:
            out[int(r.y1):int(r.y2), int(r.x1):int(r.x2)] = 1
        return out


@dataclass
class DepthMap:
    """Per-frame relative depth: a flat ground plane plus fronto-parallel object plates.

    Pixels below the horizon see the ground at ``fy * camera_height / (v - cy)``;
    pixels above it see ``far``. A pixel inside one or more plates takes the
    nearest plate's depth.
    """

    intrinsics: CameraIntrinsics
    camera_height: float
    far: float
    plates: list[tuple[BoundingBox, float]] = field(default_factory=list)

    def at(self, u: float, v: float) -> float:
        best = math.inf
        for box, z in self.plates:
            if box.contains(u, v) and z < best:
                best = z
        if best < math.inf:
            return best
        return self.ground(v)

    def ground(self, v: float) -> float:
        dv = v - self.intrinsics.cy
        if dv <= 0:
            return self.far
        return min(self.far, self.intrinsics.fy * self.camera_height / dv)

    def array(self, height: int, width: int) -> np.ndarray:
        v = np.arange(height) + 0.5
        dv = v - self.intrinsics.cy
        with np.errstate(divide="ignore"):
            g = np.where(dv > 0, self.intrinsics.fy * self.camera_height / np.where(dv > 0, dv, 1.0), self.far)
        out = np.repeat(np.minimum(g, self.far)[:, None], width, axis=1)
        for box, z in sorted(self.plates, key=lambda p: -p[1]):
            out[int(box.y1):int(box.y2), int(box.x1):int(box.x2)] = z
        return out


@dataclass
class Clip:
    frames: int
    height: int
    width: int
    intrinsics: CameraIntrinsics
    depth: list[DepthMap]
    tracklets: list[Tracklet]
    stuff: list[StuffRegion]
    ego_motion: np.ndarray  # (frames, 3): speed, yaw rate, lateral drift

    def __post_init__(self):
        self.ego_motion = np.asarray(self.ego_motion, dtype=np.float64)
        if len(self.depth) != self.frames or self.ego_motion.shape[0] != self.frames:
            raise DroidError("invalid_clip", "per-frame structures must share the frame count")
        for tr in self.tracklets:
            if len(tr.boxes) != self.frames:
                raise DroidError("invalid_clip", f"tracklet {tr.id} covers {len(tr.boxes)} frames, expected {self.frames}")
        for s in self.stuff:
            if len(s.rects) != self.frames:
                raise DroidError("invalid_clip", f"stuff region {s.category} has wrong frame count")
        ids = [tr.id for tr in self.tracklets]
        if len(set(ids)) != len(ids):
            raise DroidError("invalid_clip", "tracklet ids must be unique")

    def tracklet(self, tid: int) -> Tracklet:
        for tr in self.tracklets:
            if tr.id == tid:
                return tr
        raise DroidError("unknown_tracklet", f"no tracklet with id {tid}", tracklet_id=tid)

    def ego_anchor(self, t: int) -> np.ndarray:
        """Unprojected middle-bottom pixel (horizontal midpoint, bottom row centre)."""
        u, v = self.width / 2.0, self.height - 0.5
        return unproject(u, v, self.depth[t].at(u, v), self.intrinsics)

    def object_position(self, tid: int, t: int) -> np.ndarray | None:
        box = self.tracklet(tid).box(t)
        if box is None:
            return None
        u, v = box.center
        return unproject(u, v, self.depth[t].at(u, v), self.intrinsics)


@dataclass
class LabelLayers:
    goal: list[Intention]
    stimulus: list[Stimulus | None]


def unproject(u: float, v: float, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point ``depth * K^-1 [u, v, 1]``."""
    if depth < 0:
        raise DroidError("invalid_depth", f"depth must be non-negative, got {depth}")
    return np.array([
        depth * (u - intrinsics.cx) / intrinsics.fx,
        depth * (v - intrinsics.cy) / intrinsics.fy,
        float(depth),
    ])


def distance(p: Sequence[float], q: Sequence[float]) -> float:
    return float(np.linalg.norm(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)))


def derive_clip_labels(layers: LabelLayers, n: int | None = None) -> tuple[Intention, Response]:
    """Clip labels from the last of the first ``n`` annotated frames.

    Stop and Deviate stimuli both map to Stop; every other frame is Go.
    """
    if not layers.goal or not layers.stimulus:
        raise DroidError("empty_layers", "label layers are empty")
    n = len(layers.goal) if n is None else n
    if n < 1 or len(layers.goal) < n or len(layers.stimulus) < n:
        raise DroidError("empty_layers", f"label layers cover fewer than {n} frames")
    intention = Intention(layers.goal[n - 1])
    stim = layers.stimulus[n - 1]
    response = Response.STOP if stim in (Stimulus.STOP, Stimulus.DEVIATE) else Response.GO
    return intention, response


def mask_generate(height: int, width: int, box: BoundingBox | None) -> np.ndarray:
    """Binary mask with zeros over the box's pixels and ones elsewhere."""
    mask = np.ones((height, width), dtype=np.uint8)
    if box is not None:
        mask[int(box.y1):int(box.y2), int(box.x1):int(box.x2)] = 0
    return mask


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersect(b)
    if inter is None:
        return 0.0
    union = a.area + b.area - inter.area
    return inter.area / union if union > 0 else 0.0
