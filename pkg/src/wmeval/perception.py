"""Deterministic blob perception from rendered or generated frames.

Entities are located by intensity-class membership: pixels within a tolerance
band around each class intensity form the blob, and blobs survive only above
a minimum pixel count. Both the scripted policies and the frame judge act
through this module, so they behave identically on simulator renders and on
world-model samples with the same pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .env import CLASS_INTENSITY, pixel_to_scene

MIN_BLOB_PIXELS = 3
INTENSITY_TOLERANCE = 0.08
# Agent-view gripper bar column extents: <= 4 closed-empty, 5-6 holding an
# object, >= 7 open.
OPEN_WIDTH_PX = 7
GRIPPING_WIDTH_PX = 5


class EntityMissing(Exception):
    def __init__(self, cls: str):
        super().__init__(f"required entity {cls!r} not found in frame")
        self.cls = cls


@dataclass(frozen=True)
class EntityEstimate:
    cls: str
    centroid: Optional[tuple[float, float]]  # (row, col) pixel coordinates
    pixel_count: int
    present: bool
    col_extent: int = 0  # columns spanned by the blob; encodes gripper aperture


def extract_entities(
    frame: np.ndarray,
    intensity_classes: dict[str, float] | None = None,
    tolerance: float = INTENSITY_TOLERANCE,
) -> list[EntityEstimate]:
    """Locate each intensity class in a single frame.

    Absent entities are reported with present=False rather than raised; a
    class is present when at least MIN_BLOB_PIXELS pixels fall within
    +-tolerance of its intensity. Disjoint blobs of one class merge into a
    single centroid over their union.
    """
    if intensity_classes is None:
        intensity_classes = CLASS_INTENSITY
    estimates = []
    for cls, level in intensity_classes.items():
        mask = np.abs(frame - level) <= tolerance
        count = int(mask.sum())
        if count >= MIN_BLOB_PIXELS:
            rows, cols = np.nonzero(mask)
            centroid = (float(rows.mean()), float(cols.mean()))
            extent = int(cols.max() - cols.min() + 1)
            estimates.append(EntityEstimate(cls, centroid, count, True, extent))
        else:
            estimates.append(EntityEstimate(cls, None, count, False))
    return estimates


def entity_map(frame: np.ndarray, tolerance: float = INTENSITY_TOLERANCE) -> dict[str, EntityEstimate]:
    return {e.cls: e for e in extract_entities(frame, tolerance=tolerance)}


@dataclass(frozen=True)
class SceneEstimate:
    """Approximate simulator state recovered from the agent view."""

    gripper_pos: tuple[float, float]
    aperture_open: bool
    objects: dict[str, tuple[float, float]]


def estimate_state(observation: np.ndarray, classes: tuple[str, ...]) -> SceneEstimate:
    """Map agent-view blob centroids back to scene coordinates.

    ``observation`` is a (views, H, W) stack whose first view is the agent
    view, or a bare (H, W) frame. Raises EntityMissing for the gripper or any
    requested object class.
    """
    frame = observation[0] if observation.ndim == 3 else observation
    h, w = frame.shape
    ents = entity_map(frame)

    gripper = ents["gripper"]
    if not gripper.present:
        raise EntityMissing("gripper")
    objects = {}
    for cls in classes:
        if cls == "gripper":
            continue
        est = ents.get(cls)
        if est is None or not est.present:
            raise EntityMissing(cls)
        objects[cls] = pixel_to_scene(est.centroid[0], est.centroid[1], w, h)

    return SceneEstimate(
        gripper_pos=pixel_to_scene(gripper.centroid[0], gripper.centroid[1], w, h),
        aperture_open=gripper.col_extent >= OPEN_WIDTH_PX,
        objects=objects,
    )


def entity_positions(frame: np.ndarray) -> dict[str, Optional[tuple[float, float]]]:
    """Scene-coordinate positions for every class, None where absent."""
    h, w = frame.shape
    out: dict[str, Optional[tuple[float, float]]] = {}
    for e in extract_entities(frame):
        out[e.cls] = None if not e.present else pixel_to_scene(e.centroid[0], e.centroid[1], w, h)
    return out


@dataclass(frozen=True)
class SceneSnapshot:
    """Non-raising variant of estimate_state; absent entities are None."""

    gripper_pos: Optional[tuple[float, float]]
    aperture_open: bool
    gripping: bool  # bar at the holding width: fingers stopped on an object
    objects: dict[str, Optional[tuple[float, float]]]


def scene_snapshot(observation: np.ndarray) -> SceneSnapshot:
    frame = observation[0] if observation.ndim == 3 else observation
    h, w = frame.shape
    ents = entity_map(frame)

    def pos(e):
        return None if not e.present else pixel_to_scene(e.centroid[0], e.centroid[1], w, h)

    gripper = ents["gripper"]
    return SceneSnapshot(
        gripper_pos=pos(gripper),
        aperture_open=gripper.present and gripper.col_extent >= OPEN_WIDTH_PX,
        gripping=gripper.present and GRIPPING_WIDTH_PX <= gripper.col_extent < OPEN_WIDTH_PX,
        objects={cls: pos(e) for cls, e in ents.items() if cls != "gripper"},
    )
