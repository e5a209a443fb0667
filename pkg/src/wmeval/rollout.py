"""Autoregressive policy deployment in the ground-truth env or a world model.

The in-model loop is strictly closed: the simulator is touched exactly once
per episode (initial frame), after which the policy only ever sees frames
produced by the backend. A privileged env-backed backend implements the same
interface and must reproduce ground-truth rollouts bit for bit, which anchors
the pipeline's sanity checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .env import Action, SimState, Simulator
from .policy import ScriptedPolicy, chunk_rng
from .seeding import rng_from

GROUND_TRUTH = "ground_truth"
WORLD_MODEL = "world_model"


@dataclass
class Trajectory:
    backend: str
    policy_id: str
    task_id: str
    seed: int
    frames: np.ndarray  # (steps + context_len, views, H, W)
    actions: np.ndarray  # (steps, 3)
    steps: int
    context_len: int
    oracle_success: Optional[bool] = None
    judged_success: Optional[bool] = None

    @property
    def uid(self) -> str:
        return f"{self.backend}:{self.task_id}:{self.policy_id}:{self.seed}"

    def __post_init__(self):
        if len(self.actions) != self.steps:
            raise ValueError("len(actions) must equal steps")
        if len(self.frames) != self.steps + self.context_len:
            raise ValueError("len(frames) must equal steps + context_len")


class ChunkBackend(Protocol):
    """Produces the next observations given past frames and an action group."""

    chunk_len: int
    context_len: int

    def start_episode(self, seed: int) -> np.ndarray: ...

    def sample(self, context: np.ndarray, actions: Sequence[Action], rng: np.random.Generator) -> np.ndarray: ...

    def oracle_success(self) -> Optional[bool]: ...


class EnvBackend:
    """Privileged backend that answers with the simulator itself.

    Substituting it for a learned model turns the pipeline into an identity
    check: rollouts must match ground truth exactly.
    """

    def __init__(self, sim: Simulator, context_len: int = 2):
        self.sim = sim
        self.chunk_len = 4
        self.context_len = context_len
        self._state: Optional[SimState] = None
        self._success = False

    def start_episode(self, seed: int) -> np.ndarray:
        self._state = self.sim.reset(seed)
        self._success = self.sim.oracle_success(self._state)
        return self.sim.observe(self._state)

    def sample(self, context, actions, rng) -> np.ndarray:
        frames = []
        for a in actions:
            self._state = self.sim.step(self._state, a)
            self._success = self._success or self.sim.oracle_success(self._state)
            frames.append(self.sim.observe(self._state))
        return np.stack(frames)

    def oracle_success(self) -> Optional[bool]:
        return self._success


def rollout_ground_truth(
    policy: ScriptedPolicy, sim: Simulator, seed: int, max_steps: Optional[int] = None
) -> Trajectory:
    task = sim.task
    if max_steps is None:
        max_steps = task.horizon
    if max_steps > task.horizon:
        raise ValueError("max_steps exceeds task horizon")
    ctx = policy.config.context_len
    state = sim.reset(seed)
    obs = sim.observe(state)
    frames = [obs] * ctx
    actions: list[list[float]] = []
    success = sim.oracle_success(state)
    step = 0
    while step < max_steps:
        rng = chunk_rng(policy.config.seed, seed, step)
        chunk = policy.act(frames[-ctx:], task, rng)
        for a in chunk.actions:
            if step >= max_steps:
                break
            state = sim.step(state, a)
            frames.append(sim.observe(state))
            actions.append([a.dx, a.dy, a.grip])
            success = success or sim.oracle_success(state)
            step += 1
    return Trajectory(
        backend=GROUND_TRUTH,
        policy_id=policy.id,
        task_id=task.kind.value,
        seed=seed,
        frames=np.stack(frames),
        actions=np.asarray(actions, dtype=np.float64).reshape(step, 3),
        steps=step,
        context_len=ctx,
        oracle_success=bool(success),
    )


def rollout_in_model(
    policy: ScriptedPolicy,
    backend: ChunkBackend,
    seed: int,
    max_steps: int,
    noise_seed: int = 0,
    task=None,
) -> Trajectory:
    """Closed-loop rollout: after the initial frame, only backend output is seen."""
    h = backend.chunk_len
    if policy.config.chunk_len % h != 0:
        raise ValueError("policy chunk_len must be a multiple of the backend chunk_len")
    if max_steps % h != 0:
        raise ValueError("max_steps must be a multiple of the backend chunk_len")
    ctx = max(policy.config.context_len, backend.context_len)
    obs0 = backend.start_episode(seed)
    frames = [obs0] * ctx
    actions: list[list[float]] = []
    step = 0
    while step < max_steps:
        rng = chunk_rng(policy.config.seed, seed, step)
        chunk = policy.act(frames[-policy.config.context_len :], task, rng)
        for group_start in range(0, len(chunk.actions), h):
            if step >= max_steps:
                break
            group = chunk.actions[group_start : group_start + h]
            context = np.stack(frames[-backend.context_len :])
            new_frames = backend.sample(context, group, rng_from("sample", noise_seed, seed, step))
            frames.extend(new_frames)
            actions.extend([a.dx, a.dy, a.grip] for a in group)
            step += len(group)
    return Trajectory(
        backend=WORLD_MODEL,
        policy_id=policy.id,
        task_id=task.kind.value,
        seed=seed,
        frames=np.stack(frames),
        actions=np.asarray(actions, dtype=np.float64).reshape(step, 3),
        steps=step,
        context_len=ctx,
        oracle_success=backend.oracle_success(),
    )
