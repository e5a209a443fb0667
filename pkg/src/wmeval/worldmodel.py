"""Action-conditional denoising predictor of future frame chunks.

An EDM-preconditioned fully-connected residual trunk denoises a chunk of
future frames conditioned on (a) context frames concatenated to its input and
(b) an embedding added to every block pre-activation. The embedding is the
sum of a noise-level embedding and a latent action token: Fourier features of
the raw action chunk passed through a small MLP. Everything is plain numpy
with exact hand-written reverse-mode gradients, so training is deterministic
and the gradient path is testable against finite differences.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit as _sigmoid

from .seeding import rng_from

CHECKPOINT_MAGIC = b"WMCP"
CHECKPOINT_VERSION = 1


class ShapeMismatch(Exception):
    """An input does not match the configured tensor shape."""


class NonPositiveSigma(Exception):
    """Noise level must be strictly positive."""


@dataclass(frozen=True)
class DenoiserConfig:
    frame_w: int = 32
    frame_h: int = 32
    views: int = 1
    context_len: int = 2
    chunk_len: int = 4
    hidden_dims: tuple[int, ...] = (256, 256)
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sampler_steps: int = 18
    rho: float = 7.0
    fourier_freqs: int = 6

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be >= 1")
        if self.context_len < 1 or self.chunk_len < 1:
            raise ValueError("context_len and chunk_len must be >= 1")
        if self.views not in (1, 2):
            raise ValueError("views must be 1 or 2")
        if len(self.hidden_dims) < 1 or len(set(self.hidden_dims)) != 1:
            raise ValueError("hidden_dims must be non-empty with equal widths")

    @property
    def width(self) -> int:
        return self.hidden_dims[0]

    @property
    def n_blocks(self) -> int:
        return len(self.hidden_dims)

    @property
    def action_dim(self) -> int:
        return 3 * self.chunk_len

    @property
    def frame_dim(self) -> int:
        return self.views * self.frame_h * self.frame_w

    @property
    def x_dim(self) -> int:
        return self.chunk_len * self.frame_dim

    @property
    def ctx_dim(self) -> int:
        return self.context_len * self.frame_dim

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "DenoiserConfig":
        raw = json.loads(payload)
        raw["hidden_dims"] = tuple(raw["hidden_dims"])
        return cls(**raw)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def param_order(config: DenoiserConfig) -> list[str]:
    names = ["in.w", "in.b"]
    for i in range(config.n_blocks):
        names += [f"blk{i}.w1", f"blk{i}.b1", f"blk{i}.w2", f"blk{i}.b2"]
    names += ["out.w", "out.b"]
    names += ["noise.w1", "noise.b1", "noise.w2", "noise.b2"]
    names += ["act.w1", "act.b1", "act.w2", "act.b2"]
    return names


def param_shapes(config: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    e = config.width
    d_in = config.x_dim + config.ctx_dim
    ff_n = 2 * config.fourier_freqs
    ff_a = 2 * config.fourier_freqs * config.action_dim
    shapes: dict[str, tuple[int, ...]] = {"in.w": (e, d_in), "in.b": (e,)}
    for i in range(config.n_blocks):
        shapes[f"blk{i}.w1"] = (e, e)
        shapes[f"blk{i}.b1"] = (e,)
        shapes[f"blk{i}.w2"] = (e, e)
        shapes[f"blk{i}.b2"] = (e,)
    shapes["out.w"] = (config.x_dim, e)
    shapes["out.b"] = (config.x_dim,)
    shapes["noise.w1"] = (e, ff_n)
    shapes["noise.b1"] = (e,)
    shapes["noise.w2"] = (e, e)
    shapes["noise.b2"] = (e,)
    shapes["act.w1"] = (e, ff_a)
    shapes["act.b1"] = (e,)
    shapes["act.w2"] = (e, e)
    shapes["act.b2"] = (e,)
    return shapes


def init_params(config: DenoiserConfig, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """He-style init; the output layer starts at zero so the fresh denoiser
    reduces to D = c_skip * x."""
    rng = rng_from("init", config.config_hash(), seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("out.") or len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape).astype(dtype)
    return params


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def fourier_features(a: np.ndarray, num_freqs: int) -> np.ndarray:
    """Log-spaced sin/cos features: for each component x and k < num_freqs,
    the pair (sin(2pi 2^k x), cos(2pi 2^k x)); output dim = 2*num_freqs*dim."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("fourier_features requires finite input")
    squeeze = a.ndim == 1
    if squeeze:
        a = a[None, :]
    freqs = 2.0 ** np.arange(num_freqs)
    ang = 2.0 * np.pi * a[:, :, None] * freqs[None, None, :]  # (B, D, F)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(a.shape[0], -1)
    return out[0] if squeeze else out


def edm_coefficients(sigma, sigma_data: float):
    """EDM preconditioning (c_skip, c_out, c_in, c_noise) at noise level sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise NonPositiveSigma(f"sigma must be > 0, got {sigma}")
    s2 = sigma**2 + sigma_data**2
    c_skip = sigma_data**2 / s2
    c_out = sigma * sigma_data / np.sqrt(s2)
    c_in = 1.0 / np.sqrt(s2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def precondition(x_noisy: np.ndarray, sigma: float, f_output: np.ndarray, sigma_data: float = 0.5):
    """Combine the raw trunk output into the denoised estimate."""
    if np.shape(x_noisy) != np.shape(f_output):
        raise ShapeMismatch(f"x {np.shape(x_noisy)} vs F {np.shape(f_output)}")
    c_skip, c_out, _, _ = edm_coefficients(sigma, sigma_data)
    return c_skip * x_noisy + c_out * f_output


def loss_weight(sigma, sigma_data: float = 0.5):
    """EDM loss weight; identically equal to 1 / c_out(sigma)^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def _flatten_frames(frames: np.ndarray, expected_len: int, config: DenoiserConfig, what: str):
    frames = np.asarray(frames, dtype=np.float64)
    want = (expected_len, config.views, config.frame_h, config.frame_w)
    if frames.shape != want:
        raise ShapeMismatch(f"{what}: expected {want}, got {frames.shape}")
    return frames.reshape(-1)


def actions_to_vector(actions, config: DenoiserConfig) -> np.ndarray:
    arr = np.asarray(
        [[a.dx, a.dy, a.grip] if hasattr(a, "dx") else a for a in actions], dtype=np.float64
    )
    if arr.shape != (config.chunk_len, 3):
        raise ShapeMismatch(f"actions: expected {(config.chunk_len, 3)}, got {arr.shape}")
    return arr.reshape(-1)


def forward_batch(
    x: np.ndarray,
    sigma: np.ndarray,
    ctx: np.ndarray,
    act: np.ndarray,
    params: dict[str, np.ndarray],
    config: DenoiserConfig,
    action_cond: bool = True,
    want_cache: bool = False,
):
    """Denoise a batch of flattened chunks; optionally keep the cache for backprop.

    x: (B, x_dim) noisy chunks; sigma: (B,); ctx: (B, ctx_dim); act: (B, 3H).
    """
    b = x.shape[0]
    if x.shape != (b, config.x_dim):
        raise ShapeMismatch(f"x: expected {(b, config.x_dim)}, got {x.shape}")
    if ctx.shape != (b, config.ctx_dim):
        raise ShapeMismatch(f"context: expected {(b, config.ctx_dim)}, got {ctx.shape}")
    if act.shape != (b, config.action_dim):
        raise ShapeMismatch(f"actions: expected {(b, config.action_dim)}, got {act.shape}")
    if sigma.shape != (b,):
        raise ShapeMismatch(f"sigma: expected {(b,)}, got {sigma.shape}")

    dtype = params["in.w"].dtype
    x = np.ascontiguousarray(x, dtype=dtype)
    ctx = np.ascontiguousarray(ctx, dtype=dtype)
    act = np.ascontiguousarray(act, dtype=dtype)
    c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, config.sigma_data)
    c_skip, c_out, c_in = (v.astype(dtype) for v in (c_skip, c_out, c_in))
    cache: dict = {"sigma": sigma, "c_skip": c_skip, "c_out": c_out, "c_in": c_in}

    ff_a = fourier_features(act, config.fourier_freqs).astype(dtype)
    t1_pre = ff_a @ params["act.w1"].T + params["act.b1"]
    t1 = _silu(t1_pre)
    token = t1 @ params["act.w2"].T + params["act.b2"]
    if not action_cond:
        token = np.zeros_like(token)

    ff_n = fourier_features(c_noise[:, None], config.fourier_freqs).astype(dtype)
    n1_pre = ff_n @ params["noise.w1"].T + params["noise.b1"]
    n1 = _silu(n1_pre)
    nemb = n1 @ params["noise.w2"].T + params["noise.b2"]

    e = nemb + token
    inp = np.concatenate([c_in[:, None] * x, ctx], axis=1)
    h = inp @ params["in.w"].T + params["in.b"]

    if want_cache:
        cache.update(
            ff_a=ff_a, t1_pre=t1_pre, t1=t1, ff_n=ff_n, n1_pre=n1_pre, n1=n1, inp=inp,
            action_cond=action_cond, blocks=[],
        )
    for i in range(config.n_blocks):
        u = h + e
        z = _silu(u)
        t_mid_pre = z @ params[f"blk{i}.w1"].T + params[f"blk{i}.b1"]
        t_mid = _silu(t_mid_pre)
        h_new = h + t_mid @ params[f"blk{i}.w2"].T + params[f"blk{i}.b2"]
        if want_cache:
            cache["blocks"].append((u, z, t_mid_pre, t_mid))
        h = h_new
    uo = h + e
    zo = _silu(uo)
    f_out = zo @ params["out.w"].T + params["out.b"]
    d = c_skip[:, None] * x + c_out[:, None] * f_out
    if want_cache:
        cache.update(uo=uo, zo=zo, x=x)
        return d, cache
    return d


def backward_batch(
    grad_d: np.ndarray, cache: dict, params: dict[str, np.ndarray], config: DenoiserConfig
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the forward pass w.r.t. every parameter."""
    grads: dict[str, np.ndarray] = {}
    g_f = cache["c_out"][:, None] * grad_d

    grads["out.w"] = g_f.T @ cache["zo"]
    grads["out.b"] = g_f.sum(axis=0)
    g_uo = (g_f @ params["out.w"]) * _silu_grad(cache["uo"])
    g_h = g_uo.copy()
    g_e = g_uo.copy()

    for i in reversed(range(config.n_blocks)):
        u, z, t_mid_pre, t_mid = cache["blocks"][i]
        grads[f"blk{i}.w2"] = g_h.T @ t_mid
        grads[f"blk{i}.b2"] = g_h.sum(axis=0)
        g_tpre = (g_h @ params[f"blk{i}.w2"]) * _silu_grad(t_mid_pre)
        grads[f"blk{i}.w1"] = g_tpre.T @ z
        grads[f"blk{i}.b1"] = g_tpre.sum(axis=0)
        g_u = (g_tpre @ params[f"blk{i}.w1"]) * _silu_grad(u)
        g_h = g_h + g_u
        g_e = g_e + g_u

    grads["in.w"] = g_h.T @ cache["inp"]
    grads["in.b"] = g_h.sum(axis=0)

    # e = noise_embedding + action_token
    g_nemb = g_e
    grads["noise.w2"] = g_nemb.T @ cache["n1"]
    grads["noise.b2"] = g_nemb.sum(axis=0)
    g_n1pre = (g_nemb @ params["noise.w2"]) * _silu_grad(cache["n1_pre"])
    grads["noise.w1"] = g_n1pre.T @ cache["ff_n"]
    grads["noise.b1"] = g_n1pre.sum(axis=0)

    if cache["action_cond"]:
        g_token = g_e
        grads["act.w2"] = g_token.T @ cache["t1"]
        grads["act.b2"] = g_token.sum(axis=0)
        g_t1pre = (g_token @ params["act.w2"]) * _silu_grad(cache["t1_pre"])
        grads["act.w1"] = g_t1pre.T @ cache["ff_a"]
        grads["act.b1"] = g_t1pre.sum(axis=0)
    else:
        for name in ("act.w1", "act.b1", "act.w2", "act.b2"):
            grads[name] = np.zeros_like(params[name])
    return grads


def action_token(actions, params: dict[str, np.ndarray], config: DenoiserConfig) -> np.ndarray:
    """Latent action token: MLP over Fourier features of the raw action chunk."""
    vec = actions_to_vector(actions, config)
    ff = fourier_features(vec, config.fourier_freqs)
    t1 = _silu(params["act.w1"] @ ff + params["act.b1"])
    return params["act.w2"] @ t1 + params["act.b2"]


def denoise(
    x_noisy: np.ndarray,
    sigma: float,
    context: np.ndarray,
    actions,
    params: dict[str, np.ndarray],
    config: DenoiserConfig,
    action_cond: bool = True,
) -> np.ndarray:
    """Denoised estimate of one frame chunk at noise level sigma."""
    x = _flatten_frames(x_noisy, config.chunk_len, config, "x_noisy")
    ctx = _flatten_frames(context, config.context_len, config, "context")
    act = actions_to_vector(actions, config)
    d = forward_batch(
        x[None, :],
        np.asarray([float(sigma)]),
        ctx[None, :],
        act[None, :],
        params,
        config,
        action_cond=action_cond,
    )
    return d[0].reshape(config.chunk_len, config.views, config.frame_h, config.frame_w)


def karras_sigmas(config: DenoiserConfig) -> np.ndarray:
    """Noise-level schedule sigma_0 = sigma_max ... sigma_{N-1} = sigma_min."""
    n = config.sampler_steps
    if n == 1:
        return np.asarray([config.sigma_max])
    inv_rho = 1.0 / config.rho
    ramp = np.arange(n) / (n - 1)
    return (
        config.sigma_max**inv_rho + ramp * (config.sigma_min**inv_rho - config.sigma_max**inv_rho)
    ) ** config.rho


def sample_chunk(
    context: np.ndarray,
    actions,
    params: dict[str, np.ndarray],
    config: DenoiserConfig,
    noise_seed,
    action_cond: bool = True,
) -> np.ndarray:
    """Deterministic 2nd-order (Heun) sampling of one frame chunk.

    With a single step the correction is skipped, degenerating to one Euler
    step. Output frames are clamped to [0, 1].
    """
    ctx = _flatten_frames(context, config.context_len, config, "context")[None, :]
    act = actions_to_vector(actions, config)[None, :]
    rng = noise_seed if isinstance(noise_seed, np.random.Generator) else rng_from("chunk-noise", int(noise_seed))
    sigmas = np.concatenate([karras_sigmas(config), [0.0]])
    x = sigmas[0] * rng.standard_normal((1, config.x_dim))
    for i in range(config.sampler_steps):
        s_cur, s_next = sigmas[i], sigmas[i + 1]
        d_cur = forward_batch(x, np.asarray([s_cur]), ctx, act, params, config, action_cond)
        slope = (x - d_cur) / s_cur
        x_next = x + (s_next - s_cur) * slope
        if s_next > 0:
            d_next = forward_batch(
                x_next, np.asarray([s_next]), ctx, act, params, config, action_cond
            )
            slope_next = (x_next - d_next) / s_next
            x = x + (s_next - s_cur) * 0.5 * (slope + slope_next)
        else:
            x = x_next
    x = np.clip(x[0], 0.0, 1.0)
    return x.reshape(config.chunk_len, config.views, config.frame_h, config.frame_w)


# -- checkpoint io -----------------------------------------------------------


def save_checkpoint(path, params: dict[str, np.ndarray], config: DenoiserConfig) -> None:
    """Versioned binary checkpoint: header + little-endian float32 weights in
    the documented parameter order."""
    payload = config.to_json().encode()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(digest)
        for name in param_order(config):
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], DenoiserConfig]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        payload = fh.read(cfg_len)
        digest = fh.read(32)
        if hashlib.sha256(payload).digest() != digest:
            raise ValueError(f"{path}: config hash mismatch")
        config = DenoiserConfig.from_json(payload.decode())
        params = {}
        for name, shape in param_shapes(config).items():
            n = int(np.prod(shape))
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated checkpoint at {name}")
            params[name] = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return params, config
