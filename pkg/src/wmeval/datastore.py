"""Binary trajectory storage: JSONL index + packed frame/action stores.

Frames are quantized to 8 bits with round(255 * v); the same quantization is
applied when trajectories feed training and when they serve as metric
references, so the two paths can never disagree about pixel values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

INDEX_NAME = "index.jsonl"
FRAMES_NAME = "frames.u8"
ACTIONS_NAME = "actions.f32"


def quantize_frames(frames: np.ndarray) -> np.ndarray:
    return np.rint(255.0 * np.clip(frames, 0.0, 1.0)).astype(np.uint8)


def dequantize_frames(frames_u8: np.ndarray) -> np.ndarray:
    return frames_u8.astype(np.float64) / 255.0


@dataclass
class TrajectoryRecord:
    """One stored rollout: quantized frames plus metadata."""

    task: str
    policy_id: str
    seed: int
    source: str  # demo | rollout
    backend: str
    success: Optional[bool]
    judged_success: Optional[bool]
    context_len: int
    frames_u8: np.ndarray  # (steps + context_len, views, H, W) uint8
    actions: np.ndarray  # (steps, 3) float32

    @property
    def steps(self) -> int:
        return len(self.actions)

    @property
    def uid(self) -> str:
        return f"{self.backend}:{self.task}:{self.policy_id}:{self.seed}"

    def state_frames(self) -> np.ndarray:
        """Frames indexed by simulator step: entry j is the render of state j.

        Drops the duplicated context padding at the head of the raw sequence,
        leaving steps + 1 frames.
        """
        return self.frames_u8[self.context_len - 1 :]


def record_from_trajectory(traj, source: str) -> TrajectoryRecord:
    return TrajectoryRecord(
        task=traj.task_id,
        policy_id=traj.policy_id,
        seed=traj.seed,
        source=source,
        backend=traj.backend,
        success=traj.oracle_success,
        judged_success=traj.judged_success,
        context_len=traj.context_len,
        frames_u8=quantize_frames(traj.frames),
        actions=np.asarray(traj.actions, dtype=np.float32),
    )


def save_records(directory, records: list[TrajectoryRecord]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frame_offset = 0
    action_offset = 0
    lines = []
    with open(directory / FRAMES_NAME, "wb") as ffr, open(directory / ACTIONS_NAME, "wb") as fac:
        for rec in records:
            frames = np.ascontiguousarray(rec.frames_u8)
            actions = np.ascontiguousarray(rec.actions, dtype="<f4")
            t, v, h, w = frames.shape
            lines.append(
                json.dumps(
                    {
                        "task": rec.task,
                        "policy_id": rec.policy_id,
                        "seed": rec.seed,
                        "source": rec.source,
                        "backend": rec.backend,
                        "success": rec.success,
                        "judged_success": rec.judged_success,
                        "context_len": rec.context_len,
                        "steps": rec.steps,
                        "views": v,
                        "frame_h": h,
                        "frame_w": w,
                        "frame_offset": frame_offset,
                        "action_offset": action_offset,
                    },
                    sort_keys=True,
                )
            )
            ffr.write(frames.tobytes())
            fac.write(actions.tobytes())
            frame_offset += frames.size
            action_offset += actions.size
    with open(directory / INDEX_NAME, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_records(directory) -> list[TrajectoryRecord]:
    directory = Path(directory)
    frames_buf = np.fromfile(directory / FRAMES_NAME, dtype=np.uint8)
    actions_buf = np.fromfile(directory / ACTIONS_NAME, dtype="<f4")
    records = []
    with open(directory / INDEX_NAME) as fh:
        for line in fh:
            meta = json.loads(line)
            t = meta["steps"] + meta["context_len"]
            shape = (t, meta["views"], meta["frame_h"], meta["frame_w"])
            n_px = int(np.prod(shape))
            frames = frames_buf[meta["frame_offset"] : meta["frame_offset"] + n_px].reshape(shape)
            actions = actions_buf[meta["action_offset"] : meta["action_offset"] + meta["steps"] * 3]
            records.append(
                TrajectoryRecord(
                    task=meta["task"],
                    policy_id=meta["policy_id"],
                    seed=meta["seed"],
                    source=meta["source"],
                    backend=meta["backend"],
                    success=meta["success"],
                    judged_success=meta["judged_success"],
                    context_len=meta["context_len"],
                    frames_u8=frames.copy(),
                    actions=actions.astype(np.float32).reshape(meta["steps"], 3),
                )
            )
    return records
