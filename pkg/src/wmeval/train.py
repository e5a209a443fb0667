"""Dataset construction and denoiser training (EDM loss, Adam, cosine decay).

Demonstrations come from the scripted expert; the dataset is augmented with
rollouts from corrupted policies so that the model also sees failures and
off-distribution approaches. Policies used for data generation must never
reappear in the evaluation zoo. Action-free pretraining runs the same loop
with the action token zeroed on a corpus of randomized scene variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datastore import TrajectoryRecord, dequantize_frames, record_from_trajectory
from .env import Simulator, TaskSpec, variant_appearance, variant_task
from .policy import PolicyConfig, ScriptedPolicy
from .rollout import rollout_ground_truth
from .seeding import rng_from
from .worldmodel import (
    DenoiserConfig,
    backward_batch,
    forward_batch,
    init_params,
    loss_weight,
)


class PolicyLeak(Exception):
    """A data-generation policy id reappears in the evaluation zoo."""


@dataclass(frozen=True)
class TransitionSample:
    context: np.ndarray  # (K, views, H, W)
    actions: np.ndarray  # (H, 3)
    target: np.ndarray  # (H, views, H, W)
    source: str
    task: str


@dataclass
class DatasetManifest:
    counts: dict[str, int]  # "task/source" -> trajectory count
    fractions: tuple[float, float, float]
    seed: int
    splits: dict[str, list[int]]  # split name -> record indices

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        seen: set[int] = set()
        for idxs in self.splits.values():
            overlap = seen.intersection(idxs)
            if overlap:
                raise ValueError(f"trajectories {sorted(overlap)} appear in more than one split")
            seen.update(idxs)


@dataclass
class TransitionDataset:
    """Trajectory store plus the sliding-window view used for training."""

    records: list[TrajectoryRecord]
    manifest: DatasetManifest
    _state_cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def split_records(self, split: str) -> list[TrajectoryRecord]:
        return [self.records[i] for i in self.manifest.splits[split]]

    def _states(self, ri: int) -> np.ndarray:
        """Dequantized per-step frames, cached as float32."""
        cached = self._state_cache.get(ri)
        if cached is None:
            cached = (self.records[ri].state_frames().astype(np.float32)) / np.float32(255.0)
            self._state_cache[ri] = cached
        return cached

    def windows(self, split: str, config: DenoiserConfig) -> list[tuple[int, int]]:
        """(record index, window start) pairs; one window per stride-1 slice.

        A full-length trajectory of ``steps`` actions yields
        steps - K - H + 1 windows: K context frames, H actions, H targets.
        """
        k, h = config.context_len, config.chunk_len
        out = []
        for ri in self.manifest.splits[split]:
            n = self.records[ri].steps - k - h + 1
            out.extend((ri, t) for t in range(max(n, 0)))
        return out

    def sample_at(self, ri: int, t: int, config: DenoiserConfig) -> TransitionSample:
        rec = self.records[ri]
        k, h = config.context_len, config.chunk_len
        states = rec.state_frames()
        return TransitionSample(
            context=dequantize_frames(states[t : t + k]),
            actions=np.asarray(rec.actions[t + k - 1 : t + k - 1 + h], dtype=np.float64),
            target=dequantize_frames(states[t + k : t + k + h]),
            source=rec.source,
            task=rec.task,
        )

    def gather(self, windows: Sequence[tuple[int, int]], config: DenoiserConfig, dtype=np.float64):
        """Stack windows into flat (ctx, act, target) arrays for the loss."""
        ctx = np.empty((len(windows), config.ctx_dim), dtype=dtype)
        act = np.empty((len(windows), config.action_dim), dtype=dtype)
        tgt = np.empty((len(windows), config.x_dim), dtype=dtype)
        k, h = config.context_len, config.chunk_len
        for row, (ri, t) in enumerate(windows):
            states = self._states(ri)
            ctx[row] = states[t : t + k].reshape(-1)
            tgt[row] = states[t + k : t + k + h].reshape(-1)
            act[row] = self.records[ri].actions[t + k - 1 : t + k - 1 + h].reshape(-1)
        return ctx, act, tgt


def _make_splits(n: int, fractions: tuple[float, float, float], seed: int) -> dict[str, list[int]]:
    order = list(rng_from("split", seed).permutation(n))
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train : n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val :]),
    }


def build_dataset(
    sim: Simulator,
    expert_policy: ScriptedPolicy,
    demo_count: int,
    rollout_policies: Sequence[ScriptedPolicy],
    rollout_count: int,
    seed: int,
    eval_zoo_ids: Sequence[str] = (),
    fractions: tuple[float, float, float] = (0.9, 0.05, 0.05),
) -> TransitionDataset:
    """Expert demos plus corrupted-policy rollouts, split by trajectory."""
    zoo = set(eval_zoo_ids)
    for pol in [expert_policy, *rollout_policies]:
        if pol.id in zoo:
            raise PolicyLeak(f"policy {pol.id!r} is reserved for evaluation")
    if rollout_count > 0 and not rollout_policies:
        raise ValueError("rollout_count > 0 requires rollout policies")

    records = []
    base = seed * 1_000_003
    for i in range(demo_count):
        traj = rollout_ground_truth(expert_policy, sim, seed=base + i)
        records.append(record_from_trajectory(traj, source="demo"))
    for j in range(rollout_count):
        pol = rollout_policies[j % len(rollout_policies)]
        traj = rollout_ground_truth(pol, sim, seed=base + 500_000 + j)
        records.append(record_from_trajectory(traj, source="rollout"))

    counts: dict[str, int] = {}
    for rec in records:
        key = f"{rec.task}/{rec.source}"
        counts[key] = counts.get(key, 0) + 1
    manifest = DatasetManifest(
        counts=counts, fractions=fractions, seed=seed, splits=_make_splits(len(records), fractions, seed)
    )
    return TransitionDataset(records=records, manifest=manifest)


PRETRAIN_POLICY_GRID = [
    (0.0, 0.0),
    (0.01, 0.02),
    (0.02, 0.0),
    (0.03, 0.05),
    (0.045, 0.1),
]


def build_pretrain_corpus(
    task: TaskSpec,
    count: int,
    seed: int,
    frame_w: int = 32,
    frame_h: int = 32,
    views: int = 1,
    fractions: tuple[float, float, float] = (0.95, 0.05, 0.0),
) -> TransitionDataset:
    """Action-free pretraining corpus: randomized appearances, shifted start
    regions, and a small grid of policy qualities for motion diversity."""
    records = []
    for i in range(count):
        rng = rng_from("pretrain-variant", seed, i)
        sim = Simulator(
            variant_task(task, rng),
            frame_w=frame_w,
            frame_h=frame_h,
            views=views,
            appearance=variant_appearance(rng),
        )
        sigma, flip = PRETRAIN_POLICY_GRID[i % len(PRETRAIN_POLICY_GRID)]
        pol = ScriptedPolicy(
            PolicyConfig(
                id=f"corpus{i}", action_noise_sigma=sigma, grip_error_prob=flip, seed=seed + i
            )
        )
        traj = rollout_ground_truth(pol, sim, seed=seed * 2_000_003 + i)
        records.append(record_from_trajectory(traj, source="demo"))
    counts = {f"{task.kind.value}/demo": len(records)}
    manifest = DatasetManifest(
        counts=counts, fractions=fractions, seed=seed, splits=_make_splits(len(records), fractions, seed)
    )
    return TransitionDataset(records=records, manifest=manifest)


# -- loss and optimizer ------------------------------------------------------


def edm_loss(
    batch: Sequence[TransitionSample],
    params: dict[str, np.ndarray],
    config: DenoiserConfig,
    noise_seed: int,
    action_cond: bool = True,
):
    """Denoising loss and exact parameter gradients for one batch.

    Per sample: ln sigma ~ Normal(p_mean, p_std^2) (clipped to the config's
    sigma range), x = target + sigma * eps, and the squared error of the
    denoised estimate is weighted by (sigma^2 + sd^2) / (sigma * sd)^2.
    """
    ctx = np.stack([np.asarray(s.context, dtype=np.float64).reshape(-1) for s in batch])
    act = np.stack([np.asarray(s.actions, dtype=np.float64).reshape(-1) for s in batch])
    tgt = np.stack([np.asarray(s.target, dtype=np.float64).reshape(-1) for s in batch])
    return _edm_loss_arrays(ctx, act, tgt, params, config, noise_seed, action_cond)


def _edm_loss_arrays(ctx, act, tgt, params, config, noise_seed, action_cond=True):
    b = tgt.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    rng = rng_from("edm-noise", int(noise_seed))
    ln_sigma = config.p_mean + config.p_std * rng.standard_normal(b)
    sigma = np.exp(np.clip(ln_sigma, math.log(config.sigma_min), math.log(config.sigma_max)))
    eps = rng.standard_normal(tgt.shape)
    x = tgt + sigma[:, None] * eps

    d, cache = forward_batch(x, sigma, ctx, act, params, config, action_cond, want_cache=True)
    lam = loss_weight(sigma, config.sigma_data)
    diff = d - tgt
    per_sample = lam * np.mean(diff**2, axis=1)
    loss = float(np.mean(per_sample))
    grad_d = (2.0 / (b * config.x_dim)) * lam[:, None] * diff
    grads = backward_batch(grad_d, cache, params, config)
    if not action_cond:
        for name in ("act.w1", "act.b1", "act.w2", "act.b2"):
            grads[name] = np.zeros_like(grads[name])
    return loss, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> None:
    state.t += 1
    step_size = lr / (1 - beta1**state.t)
    v_corr = 1.0 / (1 - beta2**state.t)
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g)
        denom = np.sqrt(v * v_corr)
        denom += eps
        update = m / denom
        update *= step_size
        params[name] -= update


def cosine_lr(step: int, total: int, lr0: float = 1e-3) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    val_curve: list[tuple[int, float]] = field(default_factory=list)


def train_denoiser(
    dataset: TransitionDataset,
    config: DenoiserConfig,
    steps: int,
    seed: int,
    params: Optional[dict[str, np.ndarray]] = None,
    action_cond: bool = True,
    batch_size: int = 64,
    lr: float = 1e-3,
    val_every: int = 500,
) -> TrainResult:
    """Adam over the EDM loss; deterministic given (dataset, config, seed)."""
    params = init_params(config, seed) if params is None else {k: v.copy() for k, v in params.items()}
    result = TrainResult(params=params)
    if steps == 0:
        return result
    windows = dataset.windows("train", config)
    if not windows:
        raise ValueError("training split has no windows")
    state = AdamState.zeros_like(params)
    for step in range(steps):
        idx = rng_from("batch", seed, step).integers(0, len(windows), size=batch_size)
        ctx, act, tgt = dataset.gather([windows[i] for i in idx], config)
        loss, grads = _edm_loss_arrays(
            ctx, act, tgt, params, config, noise_seed=seed * 1_000_000 + step, action_cond=action_cond
        )
        adam_step(params, grads, state, lr=cosine_lr(step, steps, lr))
        result.loss_curve.append((step, loss))
        if val_every and (step + 1) % val_every == 0:
            vl = validation_loss(dataset, params, config, seed=seed, action_cond=action_cond)
            if vl is not None:
                result.val_curve.append((step + 1, vl))
    return result


def validation_loss(
    dataset: TransitionDataset,
    params: dict[str, np.ndarray],
    config: DenoiserConfig,
    seed: int = 0,
    action_cond: bool = True,
    split: str = "val",
    max_windows: int = 512,
) -> Optional[float]:
    """Deterministic loss on a held-out split (fixed windows, fixed noise)."""
    windows = dataset.windows(split, config)
    if not windows:
        return None
    if len(windows) > max_windows:
        sel = rng_from("val-sel", seed).choice(len(windows), size=max_windows, replace=False)
        windows = [windows[int(i)] for i in sorted(sel)]
    total = 0.0
    count = 0
    for start in range(0, len(windows), 256):
        chunk = windows[start : start + 256]
        ctx, act, tgt = dataset.gather(chunk, config)
        loss, _ = _edm_loss_arrays(
            ctx, act, tgt, params, config, noise_seed=seed * 7_777_777 + start, action_cond=action_cond
        )
        total += loss * len(chunk)
        count += len(chunk)
    return total / count


def pretrain_action_free(
    dataset: TransitionDataset, config: DenoiserConfig, steps: int, seed: int, **kw
) -> TrainResult:
    """Train with the action token replaced by a zero vector."""
    return train_denoiser(dataset, config, steps, seed, params=None, action_cond=False, **kw)


def finetune(
    params_init: Optional[dict[str, np.ndarray]],
    dataset: TransitionDataset,
    config: DenoiserConfig,
    steps: int,
    seed: int,
    **kw,
) -> TrainResult:
    """Action-conditional training from pretrained weights or from scratch."""
    if params_init is None:
        params_init = init_params(config, seed)
    return train_denoiser(dataset, config, steps, seed, params=params_init, action_cond=True, **kw)
