"""Frame-observing scripted policies of controllable quality.

Each policy is a waypoint controller over perceived entity positions with a
per-task pick-and-place stage machine, corrupted by Gaussian action noise, a
constant waypoint bias, and random gripper-command flips. The corruption grid
stands in for checkpoints of varying training quality: evaluation only needs
policies whose true success rates spread across [0, 1].

Policies are pure functions of (pixels, task, rng); they never read simulator
state, so they act identically on rendered and generated frames. The 2-frame
context disambiguates carrying from hovering near an object: an object counts
as carried only when it sits at the grasp offset in both frames. Losing sight
of the gripper freezes the policy (zero actions); losing sight of an object
triggers an upward retreat so transient occlusions resolve instead of
deadlocking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .env import GRASP_OFFSET_Y, Action, TaskKind, TaskSpec
from .perception import SceneSnapshot, scene_snapshot
from .seeding import rng_from

CLOSE_BAND_FRAC = 2.0  # multiple of grasp_radius inside which the grip closes
PLACE_COMMIT_FRAC = 0.5  # fraction of placement tolerance required before release
CARRY_TOL = 0.04  # max |object - (gripper + offset)| that still reads as carried
LIFT_GOAL_MARGIN = 0.05
RETREAT_RISE = 0.3
SIDE_STANDOFF = 0.12  # lateral waypoint offset for the final grasp approach
WAYPOINT_TOL = 0.03


class DuplicateId(Exception):
    """Two policy configs share an id."""


@dataclass(frozen=True)
class PolicyConfig:
    id: str
    action_noise_sigma: float = 0.0
    grip_error_prob: float = 0.0
    waypoint_bias: tuple[float, float] = (0.0, 0.0)
    context_len: int = 2
    chunk_len: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.action_noise_sigma < 0:
            raise ValueError("action_noise_sigma must be >= 0")
        if not 0.0 <= self.grip_error_prob <= 1.0:
            raise ValueError("grip_error_prob must lie in [0, 1]")
        if self.context_len < 1 or self.chunk_len < 1:
            raise ValueError("context_len and chunk_len must be >= 1")


@dataclass(frozen=True)
class ActionChunk:
    actions: tuple[Action, ...]

    def __post_init__(self):
        if len(self.actions) == 0:
            raise ValueError("empty action chunk")


def frozen_chunk(n: int) -> ActionChunk:
    """Fallback emitted when the gripper is not visible: n all-zero actions."""
    return ActionChunk(tuple(Action(0.0, 0.0, 0.0) for _ in range(n)))


@dataclass(frozen=True)
class _Plan:
    goals: tuple[tuple[float, float], ...]  # waypoints; empty: hold in place
    grip_far: float  # grip command while outside the close band
    grip_near: float  # grip command once within it
    close_band: float = 0.0


def _hold(grip: float) -> _Plan:
    return _Plan(goals=(), grip_far=grip, grip_near=grip)


def _goto(goal, grip: float) -> _Plan:
    return _Plan(goals=(goal,), grip_far=grip, grip_near=grip)


class ScriptedPolicy:
    def __init__(self, config: PolicyConfig):
        self.config = config

    @property
    def id(self) -> str:
        return self.config.id

    def act(
        self, obs_history: Sequence[np.ndarray], task: TaskSpec, rng: np.random.Generator
    ) -> ActionChunk:
        if len(obs_history) != self.config.context_len:
            raise ValueError(
                f"expected {self.config.context_len} observations, got {len(obs_history)}"
            )
        now = scene_snapshot(obs_history[-1])
        prev = scene_snapshot(obs_history[-2]) if len(obs_history) >= 2 else now
        if now.gripper_pos is None:
            return frozen_chunk(self.config.chunk_len)
        plan = _plan_stage(now, prev, task)
        return self._emit(now.gripper_pos, plan, task, rng)

    def _emit(self, gripper_pos, plan: _Plan, task: TaskSpec, rng) -> ActionChunk:
        cfg = self.config
        noise = rng.normal(0.0, 1.0, size=(cfg.chunk_len, 2))
        flips = rng.uniform(size=cfg.chunk_len)
        bias = np.asarray(cfg.waypoint_bias)

        actions = []
        pos = np.asarray(gripper_pos)
        goals = [np.asarray(g) + bias for g in plan.goals]
        near = not goals
        delta = task.max_step_delta
        for i in range(cfg.chunk_len):
            while len(goals) > 1 and float(np.hypot(*(goals[0] - pos))) <= WAYPOINT_TOL:
                goals.pop(0)
            if not goals:
                move = np.zeros(2)
            else:
                move = np.clip(goals[0] - pos, -delta, delta)
            pos = np.clip(pos + move, 0.0, 1.0)
            if goals and not near and len(goals) == 1:
                near = float(np.hypot(*(goals[-1] - pos))) <= plan.close_band
            grip = plan.grip_near if near else plan.grip_far
            if flips[i] < cfg.grip_error_prob:
                grip = 1.0 - grip
            dx = float(move[0] + cfg.action_noise_sigma * noise[i, 0])
            dy = float(move[1] + cfg.action_noise_sigma * noise[i, 1])
            actions.append(Action(dx, dy, float(grip)))
        return ActionChunk(tuple(actions))


def chunk_rng(policy_seed: int, episode_seed: int, step: int) -> np.random.Generator:
    """Per-chunk noise stream: a pure function of (policy, episode, step)."""
    return rng_from("policy", policy_seed, episode_seed, step)


def _at_offset(gripper_pos, obj: Optional[tuple[float, float]]) -> bool:
    if gripper_pos is None or obj is None:
        return False
    gx, gy = gripper_pos
    return float(np.hypot(obj[0] - gx, obj[1] - (gy + GRASP_OFFSET_Y))) <= CARRY_TOL


def _carrying(now: SceneSnapshot, prev: SceneSnapshot, cls: str) -> bool:
    """Carried means the bar shows the holding width and the object rides at
    the grasp offset. The width makes this a single-frame fact: a closed-empty
    bar hovering one offset above a resting object renders narrower."""
    return now.gripping and _at_offset(now.gripper_pos, now.objects.get(cls))


def _near(a, b, r: float) -> bool:
    return float(np.hypot(a[0] - b[0], a[1] - b[1])) <= r


def _in_box(pos, center, half: float) -> bool:
    return abs(pos[0] - center[0]) <= half and abs(pos[1] - center[1]) <= half


def _retreat(now: SceneSnapshot) -> _Plan:
    # Rise to reveal whatever is covered, without dropping anything held.
    grip = 1.0 if now.aperture_open else 0.0
    gx, gy = now.gripper_pos
    return _goto((gx, min(gy + RETREAT_RISE, 1.0)), grip)


def _seen(now: SceneSnapshot, prev: SceneSnapshot, cls: str) -> Optional[tuple[float, float]]:
    """Last known object position: resting objects are static, so one frame of
    occlusion (e.g. the bar sliding over the target) falls back to the
    previous frame instead of aborting the plan."""
    return now.objects.get(cls) or prev.objects.get(cls)


def _pick(gripper_pos, obj, grasp_radius: float) -> _Plan:
    """Two-phase grasp: align at a lateral standoff, then slide in and close.

    The side approach keeps the bar away from the point one grasp offset above
    the object, the configuration most easily mistaken for carrying. The
    standoff side depends only on the object position so that replans under
    noise do not flip it.
    """
    side = 1.0 if obj[0] < 0.5 else -1.0
    standoff = (obj[0] + side * SIDE_STANDOFF, obj[1])
    aligned = abs(gripper_pos[1] - obj[1]) <= 0.04 and (
        -0.02 <= side * (gripper_pos[0] - obj[0]) <= SIDE_STANDOFF + WAYPOINT_TOL
    )
    goals = (obj,) if aligned else (standoff, obj)
    return _Plan(
        goals=goals, grip_far=1.0, grip_near=0.0, close_band=grasp_radius * CLOSE_BAND_FRAC
    )


def _place(gripper_pos, target, tol: float) -> _Plan:
    hover = (target[0], target[1] - GRASP_OFFSET_Y)
    # Per-axis commit with a floor above the pixel quantization of position
    # estimates, so release is reachable even for tight tolerances.
    commit = max(tol * PLACE_COMMIT_FRAC, 0.018)
    if abs(gripper_pos[0] - hover[0]) <= commit and abs(gripper_pos[1] - hover[1]) <= commit:
        return _hold(1.0)  # release and hover
    return _goto(hover, 0.0)


def _plan_stage(now: SceneSnapshot, prev: SceneSnapshot, task: TaskSpec) -> _Plan:
    p = task.success_params
    g = now.gripper_pos
    a = _seen(now, prev, "object_a")
    if task.kind is TaskKind.LIFT:
        if a is None:
            return _retreat(now)
        if a[1] > p["lift_threshold"] + 0.02:
            return _hold(0.0)  # keep holding aloft
        if _carrying(now, prev, "object_a"):
            goal_y = p["lift_threshold"] - GRASP_OFFSET_Y + LIFT_GOAL_MARGIN
            return _goto((g[0], goal_y), 0.0)
        return _pick(g, a, task.grasp_radius)
    if task.kind is TaskKind.CAN:
        target = (p["bin_x"], p["bin_y"])
        if _carrying(now, prev, "object_a"):
            return _place(g, target, p["bin_half"])
        if a is None:
            return _retreat(now)
        if _in_box(a, target, p["bin_half"]):
            return _hold(1.0)
        return _pick(g, a, task.grasp_radius)
    if task.kind is TaskKind.SQUARE:
        target = (p["peg_x"], p["peg_y"])
        if _carrying(now, prev, "object_a"):
            return _place(g, target, p["tol"])
        if a is None:
            return _retreat(now)
        if _near(a, target, p["tol"]):
            return _hold(1.0)
        return _pick(g, a, task.grasp_radius)
    if task.kind is TaskKind.TOOLHANG:
        b = _seen(now, prev, "object_b")
        base = (p["base_x"], p["base_y"])
        hang = (p["hang_x"], p["hang_y"])
        # Finish whatever is in hand first; dropping mid-carry is never useful.
        if _carrying(now, prev, "object_b"):
            return _place(g, hang, p["tol"])
        if _carrying(now, prev, "object_a"):
            return _place(g, base, p["tol"])
        if a is None:
            return _retreat(now)
        if not _near(a, base, p["tol"]):
            return _pick(g, a, task.grasp_radius)
        if b is None:
            return _retreat(now)
        if not _near(b, hang, p["tol"]):
            return _pick(g, b, task.grasp_radius)
        return _hold(1.0)
    raise ValueError(f"unknown task kind {task.kind}")


def make_policy_zoo(configs: Sequence[PolicyConfig]) -> list[ScriptedPolicy]:
    """Instantiate an ordered policy collection, rejecting duplicate ids."""
    seen = set()
    for cfg in configs:
        if cfg.id in seen:
            raise DuplicateId(cfg.id)
        seen.add(cfg.id)
    return [ScriptedPolicy(cfg) for cfg in configs]


def sigma_grid_zoo(sigmas: Sequence[float], prefix: str = "p", seed: int = 0) -> list[ScriptedPolicy]:
    """Zoo whose quality spread comes from an action-noise grid."""
    configs = [
        PolicyConfig(id=f"{prefix}{i}", action_noise_sigma=float(s), seed=seed + i)
        for i, s in enumerate(sigmas)
    ]
    return make_policy_zoo(configs)
