"""Synthetic large-area point-cloud scenes with ground-truth boxes.

Scenes stand in for lidar frames: each object contributes points sampled
on its box surface (lidar hits the outside of things), plus ground-plane
clutter. Generation is pure in (config, seed) and scenes serialize to a
line-oriented text format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GROUND_SIGMA = 0.05  # m, z-noise of ground clutter
SURFACE_EPS = 1e-6  # m, allowed distance of a sampled point from its box surface


class SceneError(Exception):
    """Raised when a scene cannot be generated or parsed."""


class SceneParseError(SceneError):
    """Malformed scene file; carries the offending line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class GroundTruthBox:
    """One annotated object: center, extent, heading, velocity, class."""

    cx: float
    cy: float
    cz: float
    width: float
    length: float
    height: float
    yaw: float  # radians in [-pi, pi)
    vx: float = 0.0
    vy: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        if min(self.width, self.length, self.height) <= 0:
            raise SceneError("box extents must be strictly positive")
        if not (-math.pi <= self.yaw < math.pi):
            raise SceneError(f"yaw {self.yaw} outside [-pi, pi)")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    def surface_area(self) -> float:
        w, l, h = self.width, self.length, self.height
        return 2.0 * (w * l + w * h + l * h)

    def as_vector(self) -> np.ndarray:
        """(x, y, z, w, l, h, sin(yaw), cos(yaw), vx, vy) target vector."""
        return np.array(
            [self.cx, self.cy, self.cz, self.width, self.length, self.height,
             math.sin(self.yaw), math.cos(self.yaw), self.vx, self.vy]
        )


@dataclass(frozen=True)
class Scene:
    points: np.ndarray  # (P, 3) float64
    boxes: tuple[GroundTruthBox, ...]
    extent: tuple[float, float, float, float]  # x_min, x_max, y_min, y_max

    def __post_init__(self):
        if len(self.points) < 1:
            raise SceneError("scene must contain at least one point")
        if not np.isfinite(self.points).all():
            raise SceneError("scene points must be finite")
        x_min, x_max, y_min, y_max = self.extent
        if not (x_min < x_max and y_min < y_max):
            raise SceneError("degenerate extent")
        xs, ys = self.points[:, 0], self.points[:, 1]
        if xs.min() < x_min or xs.max() > x_max or ys.min() < y_min or ys.max() > y_max:
            raise SceneError("points outside extent")
        for b in self.boxes:
            if not (x_min <= b.cx <= x_max and y_min <= b.cy <= y_max):
                raise SceneError("box center outside extent")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Scene)
            and self.extent == other.extent
            and self.boxes == other.boxes
            and self.points.shape == other.points.shape
            and bool((self.points == other.points).all())
        )


@dataclass(frozen=True)
class ClassSpec:
    """Size distribution of one object class: mean (w, l, h) and relative jitter."""

    width: float
    length: float
    height: float
    size_jitter: float = 0.1  # uniform +- fraction of the mean


@dataclass(frozen=True)
class SceneConfig:
    extent: tuple[float, float, float, float] = (-50.0, 50.0, -50.0, 50.0)
    n_objects: tuple[int, int] = (2, 6)
    classes: tuple[ClassSpec, ...] = (ClassSpec(2.0, 4.5, 1.6),)
    surface_density: float = 6.0  # points per m^2 of box surface
    clutter_points: int = 300
    min_points_per_box: int = 10
    velocity_max: float = 0.0  # 0 disables velocities
    max_placement_attempts: int = 100

    def __post_init__(self):
        if self.surface_density < 0 or self.clutter_points < 0:
            raise SceneError("densities and counts must be nonnegative")
        if self.n_objects[0] < 0 or self.n_objects[1] < self.n_objects[0]:
            raise SceneError("invalid object count range")
        x_min, x_max, y_min, y_max = self.extent
        if not (x_min < x_max and y_min < y_max):
            raise SceneError("degenerate extent")
        if not self.classes:
            raise SceneError("at least one object class required")

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def _rot2d(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def _boxes_overlap_bev(a: GroundTruthBox, b: GroundTruthBox, margin: float = 0.5) -> bool:
    # Conservative circumscribed-circle test; good enough for rejection sampling.
    ra = 0.5 * math.hypot(a.width, a.length) + margin
    rb = 0.5 * math.hypot(b.width, b.length)
    return math.hypot(a.cx - b.cx, a.cy - b.cy) < ra + rb


def _sample_box_surface(box: GroundTruthBox, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample n points uniformly on the box surface, in world coordinates."""
    w, l, h = box.width, box.length, box.height
    # Face areas: +-x sides (l*h), +-y sides (w*h), top/bottom (w*l).
    areas = np.array([l * h, l * h, w * h, w * h, w * l, w * l])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    for f in range(6):
        m = face == f
        if f in (0, 1):  # x = +-w/2 faces
            local[m] = np.column_stack(
                [np.full(m.sum(), (0.5 if f == 0 else -0.5) * w), u[m] * l, v[m] * h]
            )
        elif f in (2, 3):  # y = +-l/2 faces
            local[m] = np.column_stack(
                [u[m] * w, np.full(m.sum(), (0.5 if f == 2 else -0.5) * l), v[m] * h]
            )
        else:  # z = +-h/2 faces
            local[m] = np.column_stack(
                [u[m] * w, v[m] * l, np.full(m.sum(), (0.5 if f == 4 else -0.5) * h)]
            )
    world = local.copy()
    world[:, :2] = local[:, :2] @ _rot2d(box.yaw).T
    return world + box.center


def point_distance_to_box_surface(points: np.ndarray, box: GroundTruthBox) -> np.ndarray:
    """Unsigned distance of each point to the box surface, under the box pose."""
    local = points - box.center
    local2 = local.copy()
    local2[:, :2] = local[:, :2] @ _rot2d(box.yaw)
    half = np.array([box.width, box.length, box.height]) / 2.0
    q = np.abs(local2) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.abs(np.minimum(q.max(axis=1), 0.0))
    return outside + inside


def _quantize(a: np.ndarray) -> np.ndarray:
    # Scenes are serialized with 6 fractional digits; quantizing at creation
    # makes the save/load round trip exact.
    return np.round(a, 6)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Generate a deterministic synthetic scene.

    Boxes rest on the ground plane, never overlap (rejection sampled), and
    are each supported by surface-sampled points. Remaining points are
    ground clutter at z ~ N(0, 0.05^2).
    """
    rng = np.random.default_rng(seed)
    x_min, x_max, y_min, y_max = config.extent
    n_obj = int(rng.integers(config.n_objects[0], config.n_objects[1] + 1))

    boxes: list[GroundTruthBox] = []
    for _ in range(n_obj):
        placed = False
        for _attempt in range(config.max_placement_attempts):
            cls = int(rng.integers(0, config.num_classes))
            spec = config.classes[cls]
            j = spec.size_jitter
            w = spec.width * float(rng.uniform(1 - j, 1 + j))
            l = spec.length * float(rng.uniform(1 - j, 1 + j))
            h = spec.height * float(rng.uniform(1 - j, 1 + j))
            yaw = round(float(rng.uniform(-math.pi, math.pi)), 6)
            if yaw >= math.pi or yaw < -math.pi:
                yaw = -3.141592  # 6-decimal rounding can cross +-pi
            margin = 0.5 * math.hypot(w, l) + 0.5
            if x_max - x_min <= 2 * margin or y_max - y_min <= 2 * margin:
                raise SceneError("extent too small for configured object sizes")
            cx = float(rng.uniform(x_min + margin, x_max - margin))
            cy = float(rng.uniform(y_min + margin, y_max - margin))
            if config.velocity_max > 0:
                vx = float(rng.uniform(-config.velocity_max, config.velocity_max))
                vy = float(rng.uniform(-config.velocity_max, config.velocity_max))
            else:
                vx = vy = 0.0
            cand = GroundTruthBox(
                round(cx, 6), round(cy, 6), round(h / 2, 6),
                round(w, 6), round(l, 6), round(h, 6), yaw,
                round(vx, 6), round(vy, 6), cls,
            )
            if not any(_boxes_overlap_bev(cand, b) for b in boxes):
                boxes.append(cand)
                placed = True
                break
        if not placed:
            raise SceneError(
                f"could not place box {len(boxes)} without overlap after "
                f"{config.max_placement_attempts} attempts"
            )

    chunks = []
    for box in boxes:
        n = max(config.min_points_per_box,
                int(round(config.surface_density * box.surface_area())))
        chunks.append(_sample_box_surface(box, n, rng))

    if config.clutter_points > 0:
        cx = rng.uniform(x_min, x_max, size=config.clutter_points)
        cy = rng.uniform(y_min, y_max, size=config.clutter_points)
        cz = rng.normal(0.0, GROUND_SIGMA, size=config.clutter_points)
        chunks.append(np.column_stack([cx, cy, cz]))

    if not chunks:
        raise SceneError("empty scene: no objects and no clutter configured")
    points = _quantize(np.concatenate(chunks))
    points[:, 0] = points[:, 0].clip(x_min, x_max)
    points[:, 1] = points[:, 1].clip(y_min, y_max)
    return Scene(points=points, boxes=tuple(boxes), extent=config.extent)


def save_scene(scene: Scene, path) -> None:
    """Write a scene in the `SCENE v1` text format (6 fractional digits)."""
    def f(x: float) -> str:
        return f"{x:.6f}"

    with open(path, "w") as fh:
        fh.write("SCENE v1 " + " ".join(f(v) for v in scene.extent) + "\n")
        for b in scene.boxes:
            fh.write(
                "BOX "
                + " ".join(f(v) for v in (b.cx, b.cy, b.cz, b.width, b.length,
                                          b.height, b.yaw, b.vx, b.vy))
                + f" {b.class_id}\n"
            )
        for p in scene.points:
            fh.write(f"PT {f(p[0])} {f(p[1])} {f(p[2])}\n")


def load_scene(path) -> Scene:
    """Parse a `SCENE v1` file; raises SceneParseError with the line number."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SceneParseError(1, "empty file")

    head = lines[0].split()
    if len(head) != 6 or head[0] != "SCENE" or head[1] != "v1":
        raise SceneParseError(1, "expected header 'SCENE v1 x_min x_max y_min y_max'")
    try:
        extent = tuple(float(v) for v in head[2:])
    except ValueError as e:
        raise SceneParseError(1, f"bad extent value: {e}") from None

    boxes: list[GroundTruthBox] = []
    points: list[list[float]] = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == "BOX":
                if len(parts) != 11:
                    raise ValueError("BOX record needs 10 fields")
                vals = [float(v) for v in parts[1:10]]
                boxes.append(GroundTruthBox(*vals, class_id=int(parts[10])))
            elif tag == "PT":
                if len(parts) != 4:
                    raise ValueError("PT record needs 3 fields")
                points.append([float(v) for v in parts[1:]])
            else:
                raise ValueError(f"unknown record '{tag}'")
        except (ValueError, SceneError) as e:
            raise SceneParseError(i, str(e)) from None
    if not points:
        raise SceneParseError(len(lines), "scene contains no points")
    return Scene(points=np.array(points), boxes=tuple(boxes), extent=extent)
