"""Procedural desk-scale driving scenes, their importance labels, and rasterisation.

Coordinates are normalised to the frame with y pointing down; the ego vehicle sits
just below the bottom edge at the centre, so "ahead" means smaller y.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import SceneSamplingError
from .geometry import BoxCxCyWh, iou, to_xyxy
from .intention import CANONICAL_INTENTIONS, DEFAULT_INTENTION

logger = logging.getLogger(__name__)

LAYOUTS = ("wide-road", "narrow-road", "intersection")
CATEGORIES = ("vehicle", "pedestrian", "signal", "lane-marker")
EGO_CENTRE = (0.5, 0.95)

Point = Tuple[float, float]
Rect = Tuple[float, float, float, float]  # x0, y0, x1, y1

ROAD_TOP = 0.25
EGO_LANE_X = (0.38, 0.62)
ROADS: Dict[str, Tuple[float, float]] = {"wide-road": (0.1, 0.9), "narrow-road": (0.3, 0.7)}

# Intersection: a vertical road crossed by a horizontal band.
CROSSING_Y = (0.3, 0.5)
VERTICAL_X = (0.3, 0.7)
APPROACH: Rect = (EGO_LANE_X[0], CROSSING_Y[1], EGO_LANE_X[1], 1.0)
JUNCTION: Rect = (VERTICAL_X[0], CROSSING_Y[0], VERTICAL_X[1], CROSSING_Y[1])
BRANCHES: Dict[str, Rect] = {
    "straight": (EGO_LANE_X[0], 0.0, EGO_LANE_X[1], CROSSING_Y[0]),
    "left": (0.0, CROSSING_Y[0], VERTICAL_X[0], CROSSING_Y[1]),
    "right": (VERTICAL_X[1], CROSSING_Y[0], 1.0, CROSSING_Y[1]),
}
INTENDED_BRANCH: Dict[str, Optional[str]] = {
    "go-straight": "straight",
    "turn-left": "left",
    "turn-right": "right",
    "stop": None,
}

# Box size ranges (w_min, w_max, h_min, h_max) per category.
SIZES: Dict[str, Tuple[float, float, float, float]] = {
    "vehicle": (0.08, 0.14, 0.08, 0.12),
    "pedestrian": (0.03, 0.05, 0.05, 0.08),
    "signal": (0.04, 0.05, 0.07, 0.09),
    "lane-marker": (0.02, 0.025, 0.05, 0.07),
}

PALETTE: Dict[str, Tuple[int, int, int]] = {
    "background": (76, 115, 71),
    "road": (115, 115, 115),
    "lane": (140, 140, 140),
    "lane-marker": (255, 255, 255),
    "vehicle": (38, 77, 217),
    "pedestrian": (242, 115, 89),
    "signal": (26, 26, 26),
    "signal-red": (255, 13, 13),
    "signal-green": (26, 230, 51),
}
MIN_FOOTPRINT_PX = 3
SIGNAL_DISTANCE_THRESHOLD = 0.5


@dataclass
class GeneratorConfig:
    """Distributions and thresholds of the scene generator."""

    image_size: int = 128
    layout_probs: Tuple[float, float, float] = (0.515, 0.159, 0.326)
    class_probs: Tuple[float, float, float, float] = (0.719, 0.196, 0.0425, 0.0425)
    intention_probs: Tuple[float, float, float, float] = (0.3, 0.3, 0.3, 0.1)
    min_participants: int = 2
    max_participants: int = 8
    in_path_prob: float = 0.5
    collision_iou: float = 0.1
    signal_distance_threshold: float = SIGNAL_DISTANCE_THRESHOLD
    red_signal_prob: float = 0.5
    max_tries: int = 1000

    def __post_init__(self) -> None:
        """Validate configuration parameters."""
        for name, probs, size in (
            ("layout_probs", self.layout_probs, len(LAYOUTS)),
            ("class_probs", self.class_probs, len(CATEGORIES)),
            ("intention_probs", self.intention_probs, len(CANONICAL_INTENTIONS)),
        ):
            if len(probs) != size:
                raise ValueError(f"{name} needs {size} entries, got {len(probs)}")
            if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-6:
                raise ValueError(f"{name} must be non-negative and sum to 1")
        self.layout_probs = tuple(float(p) for p in self.layout_probs)  # type: ignore[assignment]
        self.class_probs = tuple(float(p) for p in self.class_probs)  # type: ignore[assignment]
        self.intention_probs = tuple(float(p) for p in self.intention_probs)  # type: ignore[assignment]
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not 0 <= self.min_participants <= self.max_participants:
            raise ValueError("Participant counts must satisfy 0 <= min <= max")
        if not 0.0 <= self.in_path_prob <= 1.0 or not 0.0 <= self.red_signal_prob <= 1.0:
            raise ValueError("Probabilities must lie in [0, 1]")
        if not 0.0 < self.collision_iou <= 1.0:
            raise ValueError("collision_iou must lie in (0, 1]")
        if self.signal_distance_threshold <= 0:
            raise ValueError("signal_distance_threshold must be positive")
        if self.max_tries < 1:
            raise ValueError("max_tries must be positive")


@dataclass
class Participant:
    category: str
    box: BoxCxCyWh
    signal_state: Optional[str] = None
    governs: Optional[str] = None

    def __post_init__(self) -> None:
        """Validate participant fields."""
        if self.category not in CATEGORIES:
            raise ValueError(f"Unknown participant category: {self.category}")
        if self.category == "signal":
            if self.signal_state not in ("red", "green"):
                raise ValueError("Signals need a 'red' or 'green' state")
            if self.governs not in BRANCHES:
                raise ValueError(f"Signals must govern one of {sorted(BRANCHES)}")

    @property
    def class_id(self) -> int:
        return CATEGORIES.index(self.category)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"category": self.category, "box": self.box.as_list()}
        if self.category == "signal":
            data["signal_state"] = self.signal_state
            data["governs"] = self.governs
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Participant":
        return cls(data["category"], BoxCxCyWh(*data["box"]), data.get("signal_state"), data.get("governs"))


@dataclass
class SceneSpec:
    """Geometry, intention and label of one scene."""

    scene_id: int
    layout: str
    lane: List[Point]
    participants: List[Participant] = field(default_factory=list)
    intention: str = DEFAULT_INTENTION
    important_idx: Optional[int] = None
    intention_ambiguous: bool = False

    def __post_init__(self) -> None:
        """Validate scene invariants."""
        if self.layout not in LAYOUTS:
            raise ValueError(f"Unknown layout: {self.layout}")
        if self.intention not in CANONICAL_INTENTIONS:
            raise ValueError(f"Unknown intention: {self.intention}")
        if len(self.lane) < 3:
            raise ValueError("Lane polygon needs at least three vertices")
        if self.important_idx is not None and not 0 <= self.important_idx < len(self.participants):
            raise ValueError(f"important_idx {self.important_idx} is not a participant index")

    @property
    def important(self) -> Optional[Participant]:
        return None if self.important_idx is None else self.participants[self.important_idx]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "layout": self.layout,
            "lane": [list(p) for p in self.lane],
            "participants": [p.to_dict() for p in self.participants],
            "intention": self.intention,
            "important_idx": self.important_idx,
            "intention_ambiguous": self.intention_ambiguous,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        return cls(
            scene_id=int(data["scene_id"]),
            layout=data["layout"],
            lane=[(float(x), float(y)) for x, y in data["lane"]],
            participants=[Participant.from_dict(p) for p in data["participants"]],
            intention=data["intention"],
            important_idx=data.get("important_idx"),
            intention_ambiguous=bool(data.get("intention_ambiguous", False)),
        )


@dataclass
class RenderedScene:
    image: np.ndarray  # 3×S×S float64 in [0, 1]
    annotation: SceneSpec


def rect_polygon(rect: Rect) -> List[Point]:
    x0, y0, x1, y1 = rect
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def ego_lane(layout: str) -> List[Point]:
    if layout == "intersection":
        return rect_polygon(APPROACH)
    return rect_polygon((EGO_LANE_X[0], ROAD_TOP, EGO_LANE_X[1], 1.0))


def point_in_polygon(point: Point, polygon: Sequence[Point]) -> bool:
    """Even-odd ray casting; points on the left/top edge count as inside."""
    x, y = point
    inside = False
    n = len(polygon)
    for i in range(n):
        (xa, ya), (xb, yb) = polygon[i], polygon[(i + 1) % n]
        if (ya > y) != (yb > y):
            x_cross = xa + (y - ya) * (xb - xa) / (yb - ya)
            if x < x_cross:
                inside = not inside
    return inside


def _in_rect(point: Point, rect: Rect) -> bool:
    return rect[0] <= point[0] < rect[2] and rect[1] <= point[1] < rect[3]


def ego_distance(box: BoxCxCyWh) -> float:
    return math.hypot(box.cx - EGO_CENTRE[0], box.cy - EGO_CENTRE[1])


def _path_regions(layout: str, intention: str) -> List[Rect]:
    """Regions beyond the ego lane that the ego vehicle will traverse."""
    if layout != "intersection":
        return []
    branch = INTENDED_BRANCH[intention]
    if branch is None:
        return []
    return [JUNCTION, BRANCHES[branch]]


def _nearest(spec: SceneSpec, candidates: List[int]) -> Optional[int]:
    if not candidates:
        return None
    # ties resolved by participant order
    return min(candidates, key=lambda i: (ego_distance(spec.participants[i].box), i))


def importance_rule(
    spec: SceneSpec, intention: Optional[str] = None, signal_distance_threshold: float = SIGNAL_DISTANCE_THRESHOLD
) -> Optional[int]:
    """Index of the participant the ego vehicle must attend to, or None.

    Priority cascade:
      1. pedestrians whose centre lies in the ego lane (nearest wins);
      2. at intersections, pedestrians in the junction or intended branch (nearest wins);
      3. the nearest vehicle in the lane or along the intended path;
      4. a red signal governing the intended branch replaces that vehicle when the
         vehicle is absent or further than the signal distance threshold.

    Outside intersections every signal governs "straight" and the intention is ignored.
    """
    intention = intention or spec.intention
    layout_intention = intention if spec.layout == "intersection" else DEFAULT_INTENTION
    regions = _path_regions(spec.layout, layout_intention)

    def centre(i: int) -> Point:
        box = spec.participants[i].box
        return box.cx, box.cy

    def of(category: str) -> List[int]:
        return [i for i, p in enumerate(spec.participants) if p.category == category]

    in_lane = [i for i in of("pedestrian") if point_in_polygon(centre(i), spec.lane)]
    if in_lane:
        return _nearest(spec, in_lane)
    on_path = [i for i in of("pedestrian") if any(_in_rect(centre(i), r) for r in regions)]
    if on_path:
        return _nearest(spec, on_path)

    vehicles = [
        i
        for i in of("vehicle")
        if point_in_polygon(centre(i), spec.lane) or any(_in_rect(centre(i), r) for r in regions)
    ]
    vehicle = _nearest(spec, vehicles)

    branch = INTENDED_BRANCH[layout_intention]
    red = [
        i
        for i in of("signal")
        if spec.participants[i].signal_state == "red" and branch is not None and spec.participants[i].governs == branch
    ]
    signal = _nearest(spec, red)
    if signal is not None and (
        vehicle is None or ego_distance(spec.participants[vehicle].box) > signal_distance_threshold
    ):
        return signal
    return vehicle


def annotate(spec: SceneSpec, signal_distance_threshold: float = SIGNAL_DISTANCE_THRESHOLD) -> SceneSpec:
    """Set ``important_idx`` and ``intention_ambiguous`` from the rule cascade (idempotent)."""
    spec.important_idx = importance_rule(spec, None, signal_distance_threshold)
    if spec.layout == "intersection":
        outcomes = {importance_rule(spec, other, signal_distance_threshold) for other in CANONICAL_INTENTIONS}
        spec.intention_ambiguous = len(outcomes) > 1
    else:
        spec.intention_ambiguous = False
    return spec


# Sampling

SIGNAL_SITES: Dict[str, Rect] = {
    "straight": (0.72, 0.05, 0.80, 0.28),
    "left": (0.05, 0.20, 0.28, 0.28),
    "right": (0.72, 0.52, 0.95, 0.60),
}
ROADSIDE_SIGNAL_SITES: Tuple[Rect, Rect] = ((0.02, 0.25, 0.09, 0.60), (0.91, 0.25, 0.98, 0.60))


def _road_rects(layout: str) -> List[Rect]:
    if layout == "intersection":
        return [(VERTICAL_X[0], 0.0, VERTICAL_X[1], 1.0), (0.0, CROSSING_Y[0], 1.0, CROSSING_Y[1])]
    x0, x1 = ROADS[layout]
    return [(x0, ROAD_TOP, x1, 1.0)]


def _path_rects(layout: str) -> List[Rect]:
    """Candidate regions for "in path" placements; intersections offer every branch."""
    if layout == "intersection":
        return [APPROACH, JUNCTION] + list(BRANCHES.values())
    return [(EGO_LANE_X[0], ROAD_TOP, EGO_LANE_X[1], 1.0)]


def _pick(rng: np.random.Generator, rects: Sequence[Rect]) -> Rect:
    return rects[int(rng.integers(len(rects)))]


def _box_in(rng: np.random.Generator, rect: Rect, category: str) -> BoxCxCyWh:
    w_min, w_max, h_min, h_max = SIZES[category]
    w = float(rng.uniform(w_min, w_max))
    h = float(rng.uniform(h_min, h_max))
    cx = float(np.clip(rng.uniform(rect[0], rect[2]), w / 2.0, 1.0 - w / 2.0))
    cy = float(np.clip(rng.uniform(rect[1], rect[3]), h / 2.0, 1.0 - h / 2.0))
    return BoxCxCyWh(cx, cy, w, h)


def _propose(rng: np.random.Generator, config: GeneratorConfig, layout: str, category: str) -> Participant:
    if category == "signal":
        state = "red" if rng.random() < config.red_signal_prob else "green"
        if layout == "intersection":
            governs = sorted(BRANCHES)[int(rng.integers(len(BRANCHES)))]
            return Participant(category, _box_in(rng, SIGNAL_SITES[governs], category), state, governs)
        return Participant(category, _box_in(rng, _pick(rng, ROADSIDE_SIGNAL_SITES), category), state, "straight")
    if category == "lane-marker":
        y0 = CROSSING_Y[1] if layout == "intersection" else ROAD_TOP
        x = EGO_LANE_X[int(rng.integers(2))]
        return Participant(category, _box_in(rng, (x - 0.01, y0, x + 0.01, 1.0), category))
    if rng.random() < config.in_path_prob:
        rect = _pick(rng, _path_rects(layout))
    elif category == "vehicle":
        rect = _pick(rng, _road_rects(layout))
    else:
        rect = (0.0, 0.0, 1.0, 1.0)
    return Participant(category, _box_in(rng, rect, category))


def _collides(candidate: Participant, placed: Sequence[Participant], threshold: float) -> bool:
    box = to_xyxy(candidate.box)
    return any(iou(box, to_xyxy(other.box)) >= threshold for other in placed)


def sample_scene(rng: np.random.Generator, config: GeneratorConfig, scene_id: int = 0) -> SceneSpec:
    """Draw layout, intention and collision-free participants, then label the scene.

    Raises:
        SceneSamplingError: If placement needs more than ``config.max_tries`` proposals
    """
    layout = LAYOUTS[int(rng.choice(len(LAYOUTS), p=config.layout_probs))]
    if layout == "intersection":
        intention = CANONICAL_INTENTIONS[int(rng.choice(len(CANONICAL_INTENTIONS), p=config.intention_probs))]
    else:
        intention = DEFAULT_INTENTION
    count = int(rng.integers(config.min_participants, config.max_participants + 1))

    participants: List[Participant] = []
    tries = 0
    while len(participants) < count:
        tries += 1
        if tries > config.max_tries:
            logger.error(f"Scene {scene_id}: placed {len(participants)}/{count} after {config.max_tries} tries")
            raise SceneSamplingError(f"Could not place {count} participants in scene {scene_id}")
        category = CATEGORIES[int(rng.choice(len(CATEGORIES), p=config.class_probs))]
        candidate = _propose(rng, config, layout, category)
        if not _collides(candidate, participants, config.collision_iou):
            participants.append(candidate)

    spec = SceneSpec(scene_id, layout, ego_lane(layout), participants, intention)
    return annotate(spec, config.signal_distance_threshold)


# Rendering


def _span(lo: float, hi: float, size: int) -> Tuple[int, int]:
    start, stop = int(math.floor(lo * size)), int(math.ceil(hi * size))
    if stop - start < MIN_FOOTPRINT_PX:
        start = int(round((lo + hi) / 2.0 * size - MIN_FOOTPRINT_PX / 2.0))
        stop = start + MIN_FOOTPRINT_PX
    start = min(max(start, 0), size - MIN_FOOTPRINT_PX)
    return start, max(min(stop, size), start + MIN_FOOTPRINT_PX)


def _fill(canvas: np.ndarray, rect: Rect, colour: Tuple[int, int, int]) -> None:
    size = canvas.shape[0]
    r0, r1 = _span(rect[1], rect[3], size)
    c0, c1 = _span(rect[0], rect[2], size)
    canvas[r0:r1, c0:c1] = colour


def render_uint8(spec: SceneSpec, image_size: int) -> np.ndarray:
    """H×W×3 uint8 raster drawn in participant order over the road layout."""
    canvas = np.empty((image_size, image_size, 3), dtype=np.uint8)
    canvas[...] = PALETTE["background"]
    for rect in _road_rects(spec.layout):
        _fill(canvas, rect, PALETTE["road"])
    xs, ys = [p[0] for p in spec.lane], [p[1] for p in spec.lane]
    _fill(canvas, (min(xs), min(ys), max(xs), max(ys)), PALETTE["lane"])
    for participant in spec.participants:
        x0, y0, x1, y1 = to_xyxy(participant.box).as_list()
        _fill(canvas, (x0, y0, x1, y1), PALETTE[participant.category])
        if participant.category == "signal":
            # lamp in the middle third of the housing
            dw, dh = (x1 - x0) / 3.0, (y1 - y0) / 3.0
            _fill(canvas, (x0 + dw, y0 + dh, x1 - dw, y1 - dh), PALETTE[f"signal-{participant.signal_state}"])
    return canvas


def render(spec: SceneSpec, image_size: int = 128) -> RenderedScene:
    """Flat-colour rasterisation; 3×S×S in [0, 1], deterministic."""
    raster = render_uint8(spec, image_size)
    return RenderedScene(np.ascontiguousarray(raster.transpose(2, 0, 1), dtype=np.float64) / 255.0, spec)
