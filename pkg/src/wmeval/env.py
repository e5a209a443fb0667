"""Deterministic 2D manipulation simulator with rendering and oracle success.

The scene is the unit square with y pointing up. A gripper (horizontal bar
whose width encodes aperture) moves by clipped deltas, grasps the nearest
object within reach when commanded closed, and carries it at a fixed offset
below the bar. Four tasks of graded difficulty mirror a trivial grasp, a
transport, a precision placement, and a two-stage precision assembly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
import yaml

from .seeding import rng_from

AGENT_VIEW = "agent"
GRIPPER_VIEW = "gripper"

# Intensity classes; gaps are wide relative to the perception tolerance so
# classes stay unambiguous under mild generation noise.
BACKGROUND = 0.0
CLASS_INTENSITY = {
    "marker": 0.25,
    "object_a": 0.5,
    "object_b": 0.7,
    "gripper": 0.95,
}

OBJECT_HALF = 0.045
MARKER_HALF = 0.03
GRIPPER_HALF_H = 0.04
GRIPPER_HALF_W_CLOSED = 0.045
# Fingers closed around an object stop at an intermediate width, so holding
# is visually distinct from both open and closed-empty in a single frame.
GRIPPER_HALF_W_GRIPPING = 0.08
GRIPPER_HALF_W_OPEN = 0.115
# Carried objects hang this far below the gripper bar center.
GRASP_OFFSET_Y = -0.075
# Gripper view: 2x zoom, i.e. a window of this half-size around the gripper.
GRIPPER_WINDOW_HALF = 0.25


class TaskKind(str, Enum):
    LIFT = "lift"
    CAN = "can"
    SQUARE = "square"
    TOOLHANG = "toolhang"


class StepAfterHorizon(Exception):
    """Raised when stepping a state that already reached the task horizon."""


@dataclass(frozen=True)
class Appearance:
    """Rendering parameters; jittered to build the action-free pretraining corpus.

    Jitters must stay inside the perception tolerance and width bands so that
    scripted policies keep working on every variant.
    """

    object_half: float = OBJECT_HALF
    marker_half: float = MARKER_HALF
    gripper_half_h: float = GRIPPER_HALF_H
    gripper_w_closed: float = GRIPPER_HALF_W_CLOSED
    gripper_w_gripping: float = GRIPPER_HALF_W_GRIPPING
    gripper_w_open: float = GRIPPER_HALF_W_OPEN
    intensity_shift: float = 0.0  # added to every non-background class

    def intensity(self, cls: str) -> float:
        return CLASS_INTENSITY[cls] + self.intensity_shift


def variant_appearance(rng: np.random.Generator) -> Appearance:
    """Random appearance within the bands perception tolerates."""
    return Appearance(
        object_half=float(rng.uniform(0.038, 0.055)),
        marker_half=float(rng.uniform(0.025, 0.038)),
        gripper_half_h=float(rng.uniform(0.034, 0.046)),
        gripper_w_closed=float(rng.uniform(0.038, 0.052)),
        gripper_w_gripping=float(rng.uniform(0.074, 0.086)),
        gripper_w_open=float(rng.uniform(0.108, 0.122)),
        intensity_shift=float(rng.uniform(-0.04, 0.04)),
    )


def variant_task(task: TaskSpec, rng: np.random.Generator) -> TaskSpec:
    """Shift the object start region (clamped to the scene) for corpus diversity."""
    x0, y0, x1, y1 = task.object_init_region
    dx = float(rng.uniform(-0.06, 0.06))
    dy = float(rng.uniform(-0.06, 0.06))
    dx = float(np.clip(dx, -x0, 1.0 - x1))
    dy = float(np.clip(dy, -y0, 1.0 - y1))
    return replace(task, object_init_region=(x0 + dx, y0 + dy, x1 + dx, y1 + dy))


@dataclass(frozen=True)
class TaskSpec:
    """Static description of one manipulation task."""

    kind: TaskKind
    horizon: int
    success_params: dict[str, float]
    object_init_region: tuple[float, float, float, float]  # x0, y0, x1, y1
    grasp_radius: float
    max_step_delta: float
    gripper_start: tuple[float, float] = (0.5, 0.75)
    min_object_separation: float = 0.14

    def __post_init__(self):
        x0, y0, x1, y1 = self.object_init_region
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.grasp_radius > 0:
            raise ValueError("grasp_radius must be > 0")
        if not 0 < self.max_step_delta <= 0.2:
            raise ValueError("max_step_delta must be in (0, 0.2]")
        if not (0 <= x0 <= x1 <= 1 and 0 <= y0 <= y1 <= 1):
            raise ValueError("object_init_region must be a box inside [0,1]^2")
        for name in _REQUIRED_PARAMS[self.kind]:
            if name not in self.success_params:
                raise ValueError(f"{self.kind.value} task requires success_params[{name!r}]")

    @property
    def object_classes(self) -> tuple[str, ...]:
        if self.kind is TaskKind.TOOLHANG:
            return ("object_a", "object_b")
        return ("object_a",)


_REQUIRED_PARAMS = {
    TaskKind.LIFT: ("lift_threshold",),
    TaskKind.CAN: ("bin_x", "bin_y", "bin_half"),
    TaskKind.SQUARE: ("peg_x", "peg_y", "tol"),
    TaskKind.TOOLHANG: ("base_x", "base_y", "hang_x", "hang_y", "tol"),
}


@dataclass(frozen=True)
class ObjectState:
    id: str
    pos: tuple[float, float]
    cls: str


@dataclass(frozen=True)
class SimState:
    gripper_pos: tuple[float, float]
    aperture: float  # 0 = closed, 1 = open
    objects: tuple[ObjectState, ...]
    grasped: Optional[str]
    step: int
    stage: int

    def object(self, obj_id: str) -> ObjectState:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(obj_id)


@dataclass(frozen=True)
class Action:
    dx: float
    dy: float
    grip: float

    def __post_init__(self):
        if not (np.isfinite(self.dx) and np.isfinite(self.dy) and np.isfinite(self.grip)):
            raise ValueError("action components must be finite")
        if not 0.0 <= self.grip <= 1.0:
            raise ValueError("grip must lie in [0, 1]")


def default_task(kind: TaskKind | str) -> TaskSpec:
    """Built-in task definitions; thresholds are free parameters, not imports."""
    kind = TaskKind(kind)
    if kind is TaskKind.LIFT:
        return TaskSpec(
            kind=kind,
            horizon=40,
            success_params={"lift_threshold": 0.68},
            object_init_region=(0.35, 0.35, 0.65, 0.52),
            grasp_radius=0.05,
            max_step_delta=0.05,
            gripper_start=(0.50, 0.62),
        )
    if kind is TaskKind.CAN:
        return TaskSpec(
            kind=kind,
            horizon=80,
            success_params={"bin_x": 0.80, "bin_y": 0.30, "bin_half": 0.05},
            object_init_region=(0.08, 0.20, 0.28, 0.45),
            grasp_radius=0.05,
            max_step_delta=0.04,
            gripper_start=(0.50, 0.75),
        )
    if kind is TaskKind.SQUARE:
        return TaskSpec(
            kind=kind,
            horizon=120,
            success_params={"peg_x": 0.78, "peg_y": 0.68, "tol": 0.03},
            object_init_region=(0.08, 0.12, 0.34, 0.40),
            grasp_radius=0.045,
            max_step_delta=0.025,
            gripper_start=(0.50, 0.80),
        )
    if kind is TaskKind.TOOLHANG:
        return TaskSpec(
            kind=kind,
            horizon=200,
            success_params={
                "base_x": 0.70,
                "base_y": 0.42,
                "hang_x": 0.70,
                "hang_y": 0.66,
                "tol": 0.045,
            },
            object_init_region=(0.10, 0.15, 0.42, 0.42),
            grasp_radius=0.045,
            max_step_delta=0.025,
            gripper_start=(0.55, 0.80),
        )
    raise ValueError(f"unknown task kind {kind}")


def load_task_spec(path) -> TaskSpec:
    """Load a TaskSpec from a YAML key-value file (schema in README)."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return task_spec_from_dict(raw)


def task_spec_from_dict(raw: dict) -> TaskSpec:
    kind = TaskKind(raw["kind"])
    base = default_task(kind)
    kwargs = dict(
        kind=kind,
        horizon=int(raw.get("horizon", base.horizon)),
        success_params={k: float(v) for k, v in raw.get("success_params", base.success_params).items()},
        object_init_region=tuple(float(v) for v in raw.get("object_init_region", base.object_init_region)),
        grasp_radius=float(raw.get("grasp_radius", base.grasp_radius)),
        max_step_delta=float(raw.get("max_step_delta", base.max_step_delta)),
        gripper_start=tuple(float(v) for v in raw.get("gripper_start", base.gripper_start)),
    )
    return TaskSpec(**kwargs)


def _marker_positions(task: TaskSpec) -> list[tuple[float, float]]:
    p = task.success_params
    if task.kind is TaskKind.CAN:
        return [(p["bin_x"], p["bin_y"])]
    if task.kind is TaskKind.SQUARE:
        return [(p["peg_x"], p["peg_y"])]
    if task.kind is TaskKind.TOOLHANG:
        return [(p["base_x"], p["base_y"]), (p["hang_x"], p["hang_y"])]
    return []


def _placed(task: TaskSpec, obj: ObjectState, grasped: Optional[str]) -> bool:
    """An object is placed when it rests (ungrasped) within tolerance of its target."""
    if task.kind is not TaskKind.TOOLHANG:
        return False
    p = task.success_params
    target = (p["base_x"], p["base_y"]) if obj.id == "obj_a" else (p["hang_x"], p["hang_y"])
    if grasped == obj.id:
        return False
    return float(np.hypot(obj.pos[0] - target[0], obj.pos[1] - target[1])) <= p["tol"]


def _compute_stage(task: TaskSpec, objects: tuple[ObjectState, ...], grasped: Optional[str]) -> int:
    if task.kind is not TaskKind.TOOLHANG:
        return 0
    return sum(int(_placed(task, o, grasped)) for o in objects)


def positional_success(task: TaskSpec, positions: dict[str, Optional[tuple[float, float]]]) -> bool:
    """Success predicate from entity positions alone (shared with the frame judge).

    ``positions`` maps intensity-class names to estimated (x, y) or None when
    the entity is absent; absent required entities make the predicate false.
    """
    p = task.success_params
    a = positions.get("object_a")
    if task.kind is TaskKind.LIFT:
        return a is not None and a[1] > p["lift_threshold"]
    if task.kind is TaskKind.CAN:
        return (
            a is not None
            and abs(a[0] - p["bin_x"]) <= p["bin_half"]
            and abs(a[1] - p["bin_y"]) <= p["bin_half"]
        )
    if task.kind is TaskKind.SQUARE:
        return a is not None and float(np.hypot(a[0] - p["peg_x"], a[1] - p["peg_y"])) <= p["tol"]
    if task.kind is TaskKind.TOOLHANG:
        b = positions.get("object_b")
        return (
            a is not None
            and b is not None
            and float(np.hypot(a[0] - p["base_x"], a[1] - p["base_y"])) <= p["tol"]
            and float(np.hypot(b[0] - p["hang_x"], b[1] - p["hang_y"])) <= p["tol"]
        )
    raise ValueError(f"unknown task kind {task.kind}")


class Simulator:
    """Pure-function dynamics over value-semantic states for one TaskSpec."""

    def __init__(
        self,
        task: TaskSpec,
        frame_w: int = 32,
        frame_h: int = 32,
        views: int = 2,
        appearance: Appearance = Appearance(),
    ):
        if views not in (1, 2):
            raise ValueError("views must be 1 or 2")
        self.task = task
        self.frame_w = frame_w
        self.frame_h = frame_h
        self.views = views
        self.appearance = appearance

    # -- dynamics ----------------------------------------------------------

    def reset(self, seed: int) -> SimState:
        rng = rng_from("reset", self.task.kind.value, seed)
        x0, y0, x1, y1 = self.task.object_init_region
        positions: list[tuple[float, float]] = []
        for _ in self.task.object_classes:
            for _attempt in range(64):
                pos = (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))
                if all(
                    np.hypot(pos[0] - q[0], pos[1] - q[1]) >= self.task.min_object_separation
                    for q in positions
                ):
                    break
            positions.append(pos)
        objects = tuple(
            ObjectState(id=f"obj_{cls[-1]}", pos=pos, cls=cls)
            for cls, pos in zip(self.task.object_classes, positions)
        )
        return SimState(
            gripper_pos=self.task.gripper_start,
            aperture=1.0,
            objects=objects,
            grasped=None,
            step=0,
            stage=_compute_stage(self.task, objects, None),
        )

    def step(self, state: SimState, action: Action) -> SimState:
        if state.step >= self.task.horizon:
            raise StepAfterHorizon(f"step {state.step} >= horizon {self.task.horizon}")
        d = self.task.max_step_delta
        dx = float(np.clip(action.dx, -d, d))
        dy = float(np.clip(action.dy, -d, d))
        gx = float(np.clip(state.gripper_pos[0] + dx, 0.0, 1.0))
        gy = float(np.clip(state.gripper_pos[1] + dy, 0.0, 1.0))

        objects = list(state.objects)
        grasped = state.grasped
        if grasped is not None:
            objects = [
                replace(o, pos=_carried_pos(gx, gy)) if o.id == grasped else o for o in objects
            ]

        grip = float(action.grip)
        if grip < 0.5 and grasped is None:
            best = None
            for o in objects:
                dist = float(np.hypot(o.pos[0] - gx, o.pos[1] - gy))
                if dist <= self.task.grasp_radius and (best is None or dist < best[0]):
                    best = (dist, o.id)
            if best is not None:
                grasped = best[1]
                objects = [
                    replace(o, pos=_carried_pos(gx, gy)) if o.id == grasped else o
                    for o in objects
                ]
        elif grip >= 0.5 and grasped is not None:
            grasped = None

        objects_t = tuple(objects)
        return SimState(
            gripper_pos=(gx, gy),
            aperture=grip,
            objects=objects_t,
            grasped=grasped,
            step=state.step + 1,
            stage=_compute_stage(self.task, objects_t, grasped),
        )

    def oracle_success(self, state: SimState) -> bool:
        task = self.task
        if task.kind is TaskKind.TOOLHANG:
            return state.stage == 2
        positions = {o.cls: o.pos for o in state.objects}
        return positional_success(task, positions)

    # -- rendering ---------------------------------------------------------

    def render(self, state: SimState, view: str) -> np.ndarray:
        if view == AGENT_VIEW:
            window = (0.0, 0.0, 1.0)
        elif view == GRIPPER_VIEW:
            window = gripper_window(state.gripper_pos)
        else:
            raise ValueError(f"unknown view {view!r}")
        frame = np.full((self.frame_h, self.frame_w), BACKGROUND)
        for x, y, hx, hy, intensity in self._draw_list(state):
            _fill_rect(frame, x, y, hx, hy, intensity, window)
        return frame

    def observe(self, state: SimState) -> np.ndarray:
        """Stack the configured views into a (views, H, W) observation."""
        views = [self.render(state, AGENT_VIEW)]
        if self.views == 2:
            views.append(self.render(state, GRIPPER_VIEW))
        return np.stack(views)

    def _draw_list(self, state: SimState) -> list[tuple[float, float, float, float, float]]:
        # Draw order bottom to top: markers, objects, gripper. The gripper is
        # never occluded; a policy that cannot see it cannot act at all.
        ap = self.appearance
        entities = [
            (mx, my, ap.marker_half, ap.marker_half, ap.intensity("marker"))
            for mx, my in _marker_positions(self.task)
        ]
        entities.extend(
            (o.pos[0], o.pos[1], ap.object_half, ap.object_half, ap.intensity(o.cls))
            for o in state.objects
        )
        gx, gy = state.gripper_pos
        if state.grasped is not None:
            half_w = ap.gripper_w_gripping
        else:
            half_w = ap.gripper_w_closed + (ap.gripper_w_open - ap.gripper_w_closed) * float(
                np.clip(state.aperture, 0.0, 1.0)
            )
        entities.append((gx, gy, half_w, ap.gripper_half_h, ap.intensity("gripper")))
        return entities


def _carried_pos(gx: float, gy: float) -> tuple[float, float]:
    return (gx, max(gy + GRASP_OFFSET_Y, 0.0))


def gripper_window(gripper_pos: tuple[float, float]) -> tuple[float, float, float]:
    """Zoom window (x0, y0, size) around the gripper, clamped inside the scene."""
    half = GRIPPER_WINDOW_HALF
    cx = float(np.clip(gripper_pos[0], half, 1.0 - half))
    cy = float(np.clip(gripper_pos[1], half, 1.0 - half))
    return (cx - half, cy - half, 2.0 * half)


def _fill_rect(frame, x, y, half_x, half_y, intensity, window) -> None:
    wx0, wy0, wsize = window
    h, w = frame.shape
    u0 = (x - half_x - wx0) / wsize
    u1 = (x + half_x - wx0) / wsize
    v0 = (y - half_y - wy0) / wsize
    v1 = (y + half_y - wy0) / wsize
    c0 = int(np.rint(u0 * (w - 1)))
    c1 = int(np.rint(u1 * (w - 1)))
    # y up in scene coordinates, row 0 at the top of the frame
    r0 = int(np.rint((1.0 - v1) * (h - 1)))
    r1 = int(np.rint((1.0 - v0) * (h - 1)))
    c0, c1 = max(c0, 0), min(c1, w - 1)
    r0, r1 = max(r0, 0), min(r1, h - 1)
    if c0 > c1 or r0 > r1:
        return
    frame[r0 : r1 + 1, c0 : c1 + 1] = intensity


def pixel_to_scene(row: float, col: float, frame_w: int, frame_h: int) -> tuple[float, float]:
    """Inverse of the agent-view rasterization transform for centroids."""
    return (col / (frame_w - 1), 1.0 - row / (frame_h - 1))
