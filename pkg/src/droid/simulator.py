"""Deterministic synthetic driving scenarios with a known causal structure.

World model (camera frame, metres): x right, y down, z forward; the ground
is the plane ``y = camera_height``. Every object is a box standing on the
ground; its latent state is the 3-D centre of that box. Object motion is
relative to the ego camera (constant velocity), so parked objects drift
towards the camera at the ego speed.

Generative rule: the driver stops iff some Thing object is inside the
ego's intended-path corridor at the last frame or within ``horizon``
frames after it, or a red light is showing. The cause is the nearest
corridor-entering object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from droid.errors import DroidError
from droid.scene import (
    BoundingBox,
    CameraIntrinsics,
    Clip,
    DepthMap,
    Intention,
    LabelLayers,
    Response,
    Stimulus,
    StuffRegion,
    Tracklet,
    derive_clip_labels,
    distance,
)

SCHEMA_VERSION = 1

# width, height in metres
OBJECT_SIZE = {
    "car": (1.8, 1.5),
    "person": (0.5, 1.7),
    "bicycle": (0.6, 1.6),
    "motorcycle": (0.8, 1.5),
    "bus": (2.5, 3.0),
    "train": (3.0, 3.5),
    "truck": (2.4, 2.8),
}

# corridor centre-line curvature per intention (negative bends left)
CORRIDOR_BEND = {
    Intention.BG: 0.0, Intention.IP: 0.0, Intention.CP: 0.0, Intention.RP: 0.0,
    Intention.LT: -0.2, Intention.UT: -0.2, Intention.LLC: -0.1, Intention.LLB: -0.1,
    Intention.RT: 0.2, Intention.RLC: 0.1, Intention.RLB: 0.1, Intention.MG: 0.1,
}

# ego speed (m/frame), yaw rate, lateral drift once the manoeuvre starts
MOTION_PROFILE = {
    Intention.BG: (0.12, 0.0, 0.0),
    Intention.IP: (0.10, 0.0, 0.0),
    Intention.LT: (0.07, -0.06, 0.0),
    Intention.RT: (0.07, 0.06, 0.0),
    Intention.LLC: (0.11, -0.01, -0.05),
    Intention.RLC: (0.11, 0.01, 0.05),
    Intention.LLB: (0.10, -0.025, -0.02),
    Intention.RLB: (0.10, 0.025, 0.02),
    Intention.CP: (0.06, 0.0, 0.0),
    Intention.RP: (0.05, 0.0, 0.0),
    Intention.MG: (0.10, 0.01, 0.03),
    Intention.UT: (0.04, -0.12, 0.0),
}

DEFAULT_INTENTION_PROBS = (0.26, 0.14, 0.12, 0.12, 0.05, 0.05, 0.04, 0.04, 0.06, 0.03, 0.04, 0.05)

STOP_CLASSES = ("crossing_vehicle", "crossing_pedestrian", "parked_vehicle", "congestion")
# feature-grid cell size in pixels (224 px frame, 28 cells); used to keep
# an isolated bystander from sharing any cell with another box
ISOLATION_CELL_PX = 8.0


@dataclass(frozen=True)
class SimConfig:
    frames: int = 20
    height: int = 224
    width: int = 224
    focal: float = 100.0
    camera_height: float = 1.2
    far_depth: float = 50.0
    k_max: int = 20
    go_weight: float = 4.0
    stop_weight: float = 1.0
    intention_probs: tuple[float, ...] = DEFAULT_INTENTION_PROBS
    corridor_half_width: float = 0.8
    corridor_length: float = 2.4
    horizon: int = 3
    confound_prob: float = 0.15
    multi_cause_prob: float = 0.1
    max_distractors: int = 4
    isolated_bystander: bool = False

    def __post_init__(self):
        if self.go_weight <= 0 or self.stop_weight <= 0:
            raise DroidError("invalid_config", "Go/Stop ratio weights must be positive")
        if not 1 <= self.k_max <= 20:
            raise DroidError("invalid_config", "k_max must lie in [1, 20]")
        if len(self.intention_probs) != len(Intention) or min(self.intention_probs) < 0:
            raise DroidError("invalid_config", "intention_probs needs 12 non-negative weights")

    @property
    def p_go(self) -> float:
        return self.go_weight / (self.go_weight + self.stop_weight)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0)

    @property
    def ego_z(self) -> float:
        """Ground depth under the middle-bottom pixel."""
        return self.focal * self.camera_height / (self.height - 0.5 - self.height / 2.0)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["intention_probs"] = list(self.intention_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        d = dict(d)
        if "intention_probs" in d:
            d["intention_probs"] = tuple(d["intention_probs"])
        return cls(**d)


@dataclass
class AgentState:
    position: np.ndarray  # box centre at the last frame
    velocity: np.ndarray  # per frame, relative to the ego camera
    category: str


@dataclass
class ScenarioTruth:
    response: Response
    intention: Intention
    cause_id: int | None
    confound: bool
    scenario_class: str
    cause_ids: tuple[int, ...] = ()


@dataclass
class Scenario:
    seed: int
    clip: Clip
    truth: ScenarioTruth
    layers: LabelLayers
    trajectories: dict[int, np.ndarray]  # id -> (frames + horizon, 3)
    corridor: dict = field(default_factory=dict)

    @property
    def labels(self) -> tuple[Intention, Response]:
        return derive_clip_labels(self.layers)

    def without(self, tid: int) -> Scenario:
        """Copy with one tracklet (and its latent trajectory) deleted from the scene."""
        self.clip.tracklet(tid)
        clip = replace(self.clip, tracklets=[t for t in self.clip.tracklets if t.id != tid])
        traj = {k: v for k, v in self.trajectories.items() if k != tid}
        return replace(self, clip=clip, trajectories=traj)


# ----------------------------------------------------------------- the rule


def in_corridor(point, intention: Intention, config: SimConfig) -> bool:
    x, z = float(point[0]), float(point[2])
    dz = z - config.ego_z
    if dz < 0 or dz > config.corridor_length:
        return False
    centre = CORRIDOR_BEND[Intention(intention)] * dz * dz
    return abs(x - centre) <= config.corridor_half_width


def entering_objects(trajectories: dict[int, np.ndarray], intention: Intention, config: SimConfig) -> list[int]:
    last = config.frames - 1
    hits = []
    for tid in sorted(trajectories):
        traj = trajectories[tid]
        if any(in_corridor(traj[last + tau], intention, config) for tau in range(config.horizon + 1)):
            hits.append(tid)
    return hits


def apply_rule(trajectories: dict[int, np.ndarray], intention: Intention, confound: bool,
               config: SimConfig) -> tuple[Response, int | None, tuple[int, ...]]:
    hits = entering_objects(trajectories, intention, config)
    response = Response.STOP if hits or confound else Response.GO
    cause = None
    if hits:
        anchor = np.array([0.0, config.camera_height, config.ego_z])
        last = config.frames - 1
        cause = min(hits, key=lambda k: (distance(trajectories[k][last], anchor), k))
    return response, cause, tuple(hits)



# ----------------------------------------------------------------- rendering


def _box_for(pos: np.ndarray, category: str, config: SimConfig) -> BoundingBox | None:
    w, h = OBJECT_SIZE[category]
    x, _, z = pos
    if z < 1.3:
        return None
    f, cx, cy = config.focal, config.width / 2.0, config.height / 2.0
    ground = config.camera_height
    x1 = round(cx + f * (x - w / 2) / z)
    x2 = max(x1 + 1, round(cx + f * (x + w / 2) / z))
    y1 = round(cy + f * (ground - h) / z)
    y2 = max(y1 + 1, round(cy + f * ground / z))
    box = BoundingBox(float(x1), float(y1), float(x2), float(y2))
    return box if box.within(config.height, config.width) else None


def _snap(box: BoundingBox, z: float, config: SimConfig) -> np.ndarray:
    u, v = box.center
    k = config.intrinsics
    return np.array([z * (u - k.cx) / k.fx, z * (v - k.cy) / k.fy, z])


def _render(agents: dict[int, AgentState], config: SimConfig):
    """Boxes per frame with occlusion; returns (boxes, trajectories)."""
    T, H = config.frames, config.horizon
    last = T - 1
    traj = {}
    for tid, a in agents.items():
        steps = np.arange(T + H, dtype=np.float64) - last
        traj[tid] = a.position[None, :] + steps[:, None] * a.velocity[None, :]
    boxes = {tid: [None] * T for tid in agents}
    for t in range(T):
        order = sorted(agents, key=lambda k: (traj[k][t][2], k))
        placed: list[BoundingBox] = []
        for tid in order:
            box = _box_for(traj[tid][t], agents[tid].category, config)
            if box is None:
                continue
            u, v = box.center
            if any(b.contains(u, v) for b in placed):
                continue
            placed.append(box)
            boxes[tid][t] = box
            traj[tid][t] = _snap(box, traj[tid][t][2], config)
    return boxes, traj


def _stuff_layout(rng: np.random.Generator, intention: Intention, light: str | None, config: SimConfig) -> list[StuffRegion]:
    T, W, Hh = config.frames, config.width, config.height
    sx, sy = W / 224.0, Hh / 224.0

    def rect(x1, y1, x2, y2):
        return BoundingBox(float(round(x1 * sx)), float(round(y1 * sy)), float(round(x2 * sx)), float(round(y2 * sy)))

    regions = [StuffRegion("road", [rect(0, 132, 224, 224)] * T)]
    if rng.random() < 0.8:
        off = int(rng.integers(-8, 9))
        regions.append(StuffRegion("lane_markings", [rect(44 + off, 140, 48 + off, 224)] * T))
    if rng.random() < 0.5:
        off = int(rng.integers(-8, 9))
        regions.append(StuffRegion("lane_separator", [rect(176 + off, 136, 182 + off, 224)] * T))
    if intention == Intention.CP or rng.random() < 0.2:
        y = int(rng.integers(146, 166))
        regions.append(StuffRegion("crosswalk", [rect(0, y, 224, y + 10)] * T))
    if light is not None:
        regions.append(StuffRegion("traffic_light", [rect(152, 40, 184, 72)] * T, [light] * T))
    if rng.random() < 0.3:
        regions.append(StuffRegion("traffic_sign", [rect(24, 56, 40, 76)] * T))
    if rng.random() < 0.15:
        regions.append(StuffRegion("service_lane", [rect(196, 140, 224, 224)] * T))
    if rng.random() < 0.1:
        regions.append(StuffRegion("traffic_island", [rect(96, 136, 128, 146)] * T))
    return regions


def _ego_motion(rng: np.random.Generator, intention: Intention, start: int, config: SimConfig) -> np.ndarray:
    base = np.array(MOTION_PROFILE[Intention.BG])
    prof = np.array(MOTION_PROFILE[intention])
    out = np.empty((config.frames, 3))
    for t in range(config.frames):
        mean = prof if t >= start else base
        if intention == Intention.RP and t >= start:
            mean = mean + np.array([0.0, 0.0, 0.01 * (-1) ** t])
        out[t] = mean + rng.normal(0.0, 0.01, size=3)
    return out


# ------------------------------------------------------------------ sampling


def _sample_cause(rng, kind: str, intention: Intention, ego_speed: float, config: SimConfig) -> AgentState:
    z0, L, hw = config.ego_z, config.corridor_length, config.corridor_half_width
    bend = CORRIDOR_BEND[intention]
    if kind == "crossing_pedestrian":
        cat = "person"
        dz = rng.uniform(0.6, L - 0.2)
        side = rng.choice([-1.0, 1.0])
        x = bend * dz * dz + side * rng.uniform(hw - 0.5, hw + 0.3)
        vel = np.array([-side * rng.uniform(0.04, 0.1), 0.0, -ego_speed])
    elif kind == "crossing_vehicle":
        cat = str(rng.choice(["car", "car", "motorcycle", "bicycle"]))
        dz = rng.uniform(1.0, L - 0.1)
        side = rng.choice([-1.0, 1.0])
        x = bend * dz * dz + side * rng.uniform(hw - 0.4, hw + 0.5)
        vel = np.array([-side * rng.uniform(0.08, 0.2), 0.0, -ego_speed])
    elif kind == "parked_vehicle":
        cat = "car"
        dz = rng.uniform(1.0, L - 0.1)
        side = rng.choice([-1.0, 1.0])
        x = bend * dz * dz + side * rng.uniform(0.2, hw - 0.05)
        vel = np.array([0.0, 0.0, -ego_speed])
    else:  # congestion
        cat = "car"
        dz = rng.uniform(1.1, L - 0.1)
        x = bend * dz * dz + rng.uniform(-0.3, 0.3)
        vel = np.array([0.0, 0.0, rng.uniform(0.0, 1.0) * ego_speed - ego_speed])
    _, h = OBJECT_SIZE[cat]
    pos = np.array([x, config.camera_height - h / 2.0, z0 + dz])
    return AgentState(pos, vel, cat)


def _sample_distractor(rng, intention: Intention, ego_speed: float, config: SimConfig) -> AgentState:
    z0, hw = config.ego_z, config.corridor_half_width
    kind = rng.choice(["sidewalk", "parked_side", "oncoming", "other_path", "far", "other_path"])
    if kind == "sidewalk":
        cat = str(rng.choice(["person", "person", "bicycle"]))
        x = rng.choice([-1.0, 1.0]) * rng.uniform(1.4, 2.6)
        z = z0 + rng.uniform(0.4, 3.5)
        vel = np.array([0.0, 0.0, rng.choice([-1.0, 1.0]) * rng.uniform(0.02, 0.06) - ego_speed])
    elif kind == "parked_side":
        cat = str(rng.choice(["car", "car", "truck"]))
        x = rng.choice([-1.0, 1.0]) * rng.uniform(2.0, 2.8)
        z = z0 + rng.uniform(1.0, 4.0)
        vel = np.array([0.0, 0.0, -ego_speed])
    elif kind == "oncoming":
        cat = str(rng.choice(["car", "bus", "motorcycle"]))
        x = -rng.uniform(1.9, 2.6)
        z = z0 + rng.uniform(1.5, 5.0)
        vel = np.array([0.0, 0.0, -rng.uniform(0.05, 0.2) - ego_speed])
    elif kind == "other_path":
        # inside some other manoeuvre's corridor, so it only matters for that intention
        cat = str(rng.choice(["person", "car", "person", "bicycle"]))
        other = Intention(int(rng.choice([Intention.LT, Intention.RT, Intention.BG])))
        dz = rng.uniform(0.5, config.corridor_length)
        x = CORRIDOR_BEND[other] * dz * dz + rng.uniform(-hw, hw)
        z = z0 + dz
        vel = np.array([rng.uniform(-0.03, 0.03), 0.0, -ego_speed * rng.uniform(0.0, 1.0)])
    else:
        cat = str(rng.choice(["car", "truck", "bus", "person"]))
        z = z0 + rng.uniform(5.0, 10.0)
        x = rng.uniform(-0.8, 0.8) * z
        vel = np.array([rng.uniform(-0.05, 0.05), 0.0, -ego_speed])
    _, h = OBJECT_SIZE[cat]
    return AgentState(np.array([x, config.camera_height - h / 2.0, z]), vel, cat)


def _sample_bystander(rng, ego_speed: float, config: SimConfig) -> AgentState:
    cat = str(rng.choice(["car", "truck"]))
    z = rng.uniform(8.0 + ego_speed * config.frames, 11.0 + ego_speed * config.frames)
    x = rng.uniform(-0.7, 0.7) * z
    _, h = OBJECT_SIZE[cat]
    return AgentState(np.array([x, config.camera_height - h / 2.0, z]), np.array([0.0, 0.0, -ego_speed]), cat)


def _cell_span(box: BoundingBox, cell: float) -> tuple[int, int, int, int]:
    return (int(box.x1 // cell), int(box.y1 // cell), int(-(-box.x2 // cell)), int(-(-box.y2 // cell)))


def _isolated(tid: int, traj: dict[int, np.ndarray], boxes: dict[int, list], config: SimConfig,
              mu: float = 3.0) -> bool:
    """Gated off from Ego and every object in 3D, and sharing no feature cell with another box."""
    anchor = np.array([0.0, config.camera_height, config.ego_z])
    for t in range(config.frames):
        p = traj[tid][t]
        if distance(p, anchor) <= mu:
            return False
        for other, q in traj.items():
            if other != tid and distance(p, q[t]) <= mu:
                return False
        mine = boxes[tid][t]
        if mine is None:
            continue
        a = _cell_span(mine, ISOLATION_CELL_PX)
        for other, bs in boxes.items():
            b = None if other == tid or bs[t] is None else _cell_span(bs[t], ISOLATION_CELL_PX)
            if b is not None and a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]:
                return False
    return True


def _target(rng, config: SimConfig, kind: str) -> tuple[Response, str, bool]:
    if kind == "test2":
        return Response.STOP, str(rng.choice(STOP_CLASSES)), False
    if kind == "go":
        return Response.GO, "go", False
    if rng.random() < config.p_go:
        return Response.GO, "go", False
    if rng.random() < config.confound_prob:
        return Response.STOP, "red_light", True
    return Response.STOP, str(rng.choice(STOP_CLASSES)), False


def generate_scenario(seed: int, config: SimConfig | None = None, kind: str = "mixed",
                      n_objects: int | None = None) -> Scenario:
    """One scenario, a pure function of ``(seed, config, kind)``.

    ``kind`` is ``"mixed"`` (Go/Stop at the configured ratio), ``"test2"``
    (single Thing cause, no confound) or ``"go"``. ``n_objects`` fixes the
    number of distractors (0 with a Go target gives an empty scene).
    """
    config = config or SimConfig()
    rng = np.random.default_rng(seed)
    intention = Intention(int(rng.choice(len(Intention), p=np.asarray(config.intention_probs) / sum(config.intention_probs))))
    response, scenario_class, confound = _target(rng, config, kind)
    start = int(rng.integers(4, config.frames - 3)) if intention != Intention.BG else 0
    motion = _ego_motion(rng, intention, start, config)
    ego_speed = float(np.clip(motion[-1, 0], 0.02, 0.2))

    for _ in range(500):
        agents: dict[int, AgentState] = {}
        next_id = 1
        causes: list[int] = []
        if scenario_class in STOP_CLASSES:
            n_causes = 2 if (kind == "mixed" and rng.random() < config.multi_cause_prob) else 1
            for _c in range(n_causes):
                agents[next_id] = _sample_cause(rng, scenario_class, intention, ego_speed, config)
                causes.append(next_id)
                next_id += 1
        elif scenario_class == "red_light" and rng.random() < 0.6:
            agents[next_id] = _sample_cause(rng, "congestion", intention, ego_speed, config)
            causes.append(next_id)
            next_id += 1
        n_dis = int(rng.integers(1, config.max_distractors + 1)) if n_objects is None else n_objects
        n_dis = min(n_dis, config.k_max - len(agents) - int(config.isolated_bystander))
        for _d in range(n_dis):
            agents[next_id] = _sample_distractor(rng, intention, ego_speed, config)
            next_id += 1
        bystander = None
        if config.isolated_bystander:
            bystander = next_id
            agents[next_id] = _sample_bystander(rng, ego_speed, config)
            next_id += 1

        boxes, traj = _render(agents, config)
        visible = [k for k in agents if any(b is not None for b in boxes[k])]
        if len(visible) != len(agents):
            agents = {k: agents[k] for k in visible}
            boxes, traj = _render(agents, config)
            if any(all(b is None for b in boxes[k]) for k in agents):
                continue
        if any(boxes[c][-1] is None for c in causes if c in agents):
            continue
        if any(c not in agents for c in causes):
            continue
        resp, cause, hits = apply_rule(traj, intention, confound, config)
        if resp != response:
            continue
        if set(hits) != set(causes):
            continue
        if kind == "test2" and len(hits) != 1:
            continue
        if bystander is not None and (bystander not in agents or not _isolated(bystander, traj, boxes, config)):
            continue
        break
    else:
        raise DroidError("generation_failed", f"could not realise a scenario for seed {seed}")

    # dense ids in order of appearance
    remap = {old: new for new, old in enumerate(sorted(agents), start=1)}
    tracklets = [Tracklet(remap[k], agents[k].category, boxes[k]) for k in sorted(agents)]
    traj = {remap[k]: traj[k] for k in sorted(agents)}
    cause = remap[cause] if cause is not None else None
    hits = tuple(sorted(remap[h] for h in hits))

    light = None
    if confound:
        light = "red"
    elif intention in (Intention.IP, Intention.LT, Intention.RT, Intention.CP, Intention.UT) or rng.random() < 0.3:
        light = "green" if rng.random() < 0.8 else None
    stuff = _stuff_layout(rng, intention, light, config)

    depth = []
    for t in range(config.frames):
        plates = [(tr.boxes[t], float(traj[tr.id][t][2])) for tr in tracklets if tr.boxes[t] is not None]
        depth.append(DepthMap(config.intrinsics, config.camera_height, config.far_depth, plates))
    clip = Clip(config.frames, config.height, config.width, config.intrinsics, depth, tracklets, stuff, motion)

    goal = [Intention.BG if t < start else intention for t in range(config.frames)]
    stimulus: list[Stimulus | None] = [None] * config.frames
    if response == Response.STOP:
        stimulus[-1] = Stimulus.DEVIATE if (scenario_class == "parked_vehicle" and rng.random() < 0.5) else Stimulus.STOP
    truth = ScenarioTruth(response, intention, cause, confound, scenario_class, hits)
    return Scenario(seed, clip, truth, LabelLayers(goal, stimulus), traj, {"config": config.to_dict()})


def scenario_config(scenario: Scenario) -> SimConfig:
    cfg = scenario.corridor.get("config")
    return SimConfig.from_dict(cfg) if cfg else SimConfig()


def counterfactual_response(scenario: Scenario, removed: int) -> Response:
    """Oracle label with one object deleted: re-evaluates the generative rule."""
    if removed not in scenario.trajectories:
        raise DroidError("unknown_tracklet", f"no tracklet with id {removed}", tracklet_id=removed)
    rest = {k: v for k, v in scenario.trajectories.items() if k != removed}
    response, _, _ = apply_rule(rest, scenario.truth.intention, scenario.truth.confound, scenario_config(scenario))
    return response


SPLIT_OFFSETS = {"train": 0, "test1": 3_000_000, "test2": 6_000_000}


def split_seeds(seed: int, split: str, count: int) -> list[int]:
    if count > 3_000_000:
        raise DroidError("invalid_counts", "at most 3,000,000 scenarios per split")
    base = seed * 10_000_000 + SPLIT_OFFSETS[split]
    return [base + i for i in range(count)]


def generate_dataset(config: SimConfig, counts: tuple[int, int, int], seed: int = 0) -> dict[str, list[Scenario]]:
    """train/test1 mix Go and Stop; test2 holds single-cause reactive scenarios only."""
    if min(counts) <= 0:
        raise DroidError("invalid_counts", f"split counts must be positive, got {counts}")
    out = {}
    for split, n in zip(("train", "test1", "test2"), counts):
        kind = "test2" if split == "test2" else "mixed"
        out[split] = [generate_scenario(s, config, kind) for s in split_seeds(seed, split, n)]
    return out


# ---------------------------------------------------------------------- JSON


def _box_json(b: BoundingBox | None):
    return None if b is None else [int(b.x1), int(b.y1), int(b.x2), int(b.y2)]


def _box_from(v) -> BoundingBox | None:
    return None if v is None else BoundingBox(*map(float, v))


def scenario_to_dict(s: Scenario) -> dict:
    c = s.clip
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": s.seed,
        "frames": c.frames,
        "height": c.height,
        "width": c.width,
        "intrinsics": {"fx": c.intrinsics.fx, "fy": c.intrinsics.fy, "cx": c.intrinsics.cx, "cy": c.intrinsics.cy},
        "depth": {
            "camera_height": c.depth[0].camera_height,
            "far": c.depth[0].far,
            "plates": [[[*_box_json(b), z] for b, z in d.plates] for d in c.depth],
        },
        "ego_motion": c.ego_motion.tolist(),
        "tracklets": [{"id": t.id, "category": t.category, "boxes": [_box_json(b) for b in t.boxes]} for t in c.tracklets],
        "stuff": [{"category": r.category, "rects": [_box_json(b) for b in r.rects], "states": list(r.states)} for r in c.stuff],
        "labels": {
            "goal": [i.name for i in s.layers.goal],
            "stimulus": [None if x is None else x.value for x in s.layers.stimulus],
        },
        "truth": {
            "response": s.truth.response.name,
            "intention": s.truth.intention.name,
            "cause_id": s.truth.cause_id,
            "cause_ids": list(s.truth.cause_ids),
            "confound": s.truth.confound,
            "scenario_class": s.truth.scenario_class,
        },
        "trajectories": {str(k): v.tolist() for k, v in sorted(s.trajectories.items())},
        "config": s.corridor.get("config"),
    }


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise DroidError("schema_version", f"unsupported scenario schema version {d.get('schema_version')!r}")
    k = CameraIntrinsics(**d["intrinsics"])
    dep = d["depth"]
    depth = [DepthMap(k, dep["camera_height"], dep["far"], [(_box_from(p[:4]), float(p[4])) for p in frame])
             for frame in dep["plates"]]
    tracklets = [Tracklet(t["id"], t["category"], [_box_from(b) for b in t["boxes"]]) for t in d["tracklets"]]
    stuff = [StuffRegion(r["category"], [_box_from(b) for b in r["rects"]], r.get("states")) for r in d["stuff"]]
    clip = Clip(d["frames"], d["height"], d["width"], k, depth, tracklets, stuff, np.array(d["ego_motion"]))
    lab = d["labels"]
    layers = LabelLayers([Intention[g] for g in lab["goal"]], [None if x is None else Stimulus(x) for x in lab["stimulus"]])
    tr = d["truth"]
    truth = ScenarioTruth(Response[tr["response"]], Intention[tr["intention"]], tr["cause_id"], tr["confound"],
                          tr["scenario_class"], tuple(tr.get("cause_ids", ())))
    traj = {int(key): np.array(v) for key, v in d["trajectories"].items()}
    return Scenario(d["seed"], clip, truth, layers, traj, {"config": d.get("config")})


def write_jsonl(path, scenarios: Iterable[Scenario]) -> None:
    with open(path, "w") as fh:
        for s in scenarios:
            fh.write(json.dumps(scenario_to_dict(s), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list[Scenario]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(scenario_from_dict(json.loads(line)))
    return out
