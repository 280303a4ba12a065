"""A toy multi-modal DiT with seeded weights and a rectified-flow Euler sampler.

Each layer RMS-normalizes the text and image streams, projects them to
queries/keys/values with separate text and image weights, runs joint attention
(plain or shared, per the layer policy) and adds the output projection back
into each stream. A linear head maps final image tokens to a velocity.

Time runs from t=1 (pure noise) to t=0 (data) on a uniform grid; the noisy
state is ``t * noise + (1 - t) * latent`` so the velocity is ``noise - latent``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from attnshare.errors import ConfigurationError, ShapeError, ValidationError
from attnshare.position import RopeParams
from attnshare.sharing import (
    QkvBundle,
    SharedPositions,
    SharingConfig,
    layer_policy,
    make_positions,
    shared_mm_attention,
)
from attnshare.tensor import Pcg32, as_matrix, derive_seed, matmul, thread_cap

VANILLA = SharingConfig(mode="vanilla")
PROJECTIONS = ("wq_txt", "wk_txt", "wv_txt", "wq_img", "wk_img", "wv_img")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 8
    heads: int = 4
    dim: int = 64
    text_len: int = 4
    grid: Tuple[int, int] = (8, 8)
    latent_channels: int = 4
    seed: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        counts = dict(layers=self.layers, heads=self.heads, dim=self.dim, text_len=self.text_len,
                      latent_channels=self.latent_channels, grid_h=self.grid[0], grid_w=self.grid[1])
        for name, value in counts.items():
            if int(value) < 1:
                raise ValidationError(f"{name} must be >= 1, got {value}")
        if self.dim % self.heads:
            raise ValidationError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.head_dim % 2:
            raise ValidationError(f"head_dim {self.head_dim} must be even for rotary embedding")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_image_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def layer_groups(self, count: int = 3) -> List[range]:
        """Contiguous near-equal layer groups, e.g. [0,19), [19,38), [38,57) for 57 layers."""
        bounds = [round(i * self.layers / count) for i in range(count + 1)]
        return [range(bounds[i], bounds[i + 1]) for i in range(count)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 30
    cfg_scale: float = 3.5

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if not (math.isfinite(self.cfg_scale) and self.cfg_scale >= 0):
            raise ValidationError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


@dataclass
class ToyDit:
    config: ModelConfig
    layers: List[Dict[str, np.ndarray]]
    w_in: np.ndarray  # latent_channels x dim
    w_out: np.ndarray  # dim x latent_channels

    @property
    def rope(self) -> RopeParams:
        return RopeParams(head_dim=self.config.head_dim, base=self.config.rope_base)

    def head_projection(self, layer: int, name: str, head: int) -> np.ndarray:
        """The d x d_k block of projection ``name`` that feeds attention head ``head``."""
        d_k = self.config.head_dim
        return self.layers[layer][name][:, head * d_k:(head + 1) * d_k]


def init_model(cfg: ModelConfig) -> ToyDit:
    rng = Pcg32(cfg.seed)
    d, c = cfg.dim, cfg.latent_channels
    scale = 1.0 / math.sqrt(d)
    layers = []
    for _ in range(cfg.layers):
        weights = {name: rng.normal_matrix(d, d, scale) for name in PROJECTIONS}
        weights["wo_txt"] = rng.normal_matrix(d, d, scale)
        weights["wo_img"] = rng.normal_matrix(d, d, scale)
        layers.append(weights)
    w_in = rng.normal_matrix(c, d, 1.0 / math.sqrt(c))
    w_out = rng.normal_matrix(d, c, scale)
    return ToyDit(cfg, layers, w_in, w_out)


def rms_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    xd = x.astype(np.float64)
    return (xd / np.sqrt((xd ** 2).mean(axis=1, keepdims=True) + eps)).astype(np.float32)


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    arg = 1000.0 * t * freqs
    emb = np.concatenate([np.sin(arg), np.cos(arg), np.zeros(dim - 2 * half)])
    return emb.astype(np.float32)


def prompt_embedding(model: ToyDit, prompt: Optional[int]) -> np.ndarray:
    """Deterministic stand-in for encoded prompt ``prompt``; ``None`` is the empty prompt (zeros)."""
    cfg = model.config
    if prompt is None:
        return np.zeros((cfg.text_len, cfg.dim), dtype=np.float32)
    return Pcg32(derive_seed(cfg.seed, "prompt", prompt)).normal_matrix(cfg.text_len, cfg.dim)


def project(model: ToyDit, layer: int, image_tokens: np.ndarray, text_tokens: np.ndarray) -> QkvBundle:
    w = model.layers[layer]
    xn, cn = rms_norm(image_tokens), rms_norm(text_tokens)
    return QkvBundle(
        q_txt=matmul(cn, w["wq_txt"]), k_txt=matmul(cn, w["wk_txt"]), v_txt=matmul(cn, w["wv_txt"]),
        q_img=matmul(xn, w["wq_img"]), k_img=matmul(xn, w["wk_img"]), v_img=matmul(xn, w["wv_img"]),
    )


def forward(
    model: ToyDit,
    image_tokens,
    text_tokens,
    t: float,
    cfg: SharingConfig = VANILLA,
    ref_bundles: Optional[Mapping[int, QkvBundle]] = None,
    positions: Optional[SharedPositions] = None,
    trace: Optional[list] = None,
):
    """Run every layer; returns ``(tokens, bundles)``.

    ``tokens`` is the (M+N) x d stack of final text then image tokens and
    ``bundles[l]`` is this stream's own QkvBundle at layer ``l``, usable as a
    reference for other streams. When ``trace`` is a list, one dict per layer is
    appended with the policy taken and the attention weights.
    """
    mc = model.config
    x = as_matrix(image_tokens, name="image_tokens")
    c = as_matrix(text_tokens, name="text_tokens")
    if x.shape != (mc.num_image_tokens, mc.dim) or c.shape != (mc.text_len, mc.dim):
        raise ShapeError(f"token shapes {x.shape}/{c.shape} do not match model {mc}")
    cfg.check_layers(mc.layers)
    if isinstance(ref_bundles, (list, tuple)):
        ref_bundles = dict(enumerate(ref_bundles))
    if cfg.mode != "vanilla":
        missing = sorted(l for l in cfg.layers if not ref_bundles or l not in ref_bundles)
        if missing:
            raise ConfigurationError(f"no reference bundle for shared layers {missing}")
    if positions is None:
        positions = make_positions(mc.grid, mc.text_len, cfg)

    temb = timestep_embedding(t, mc.dim)
    x = x + temb
    c = c + temb
    bundles = []
    rope = model.rope
    m = mc.text_len
    for layer in range(mc.layers):
        bundle = project(model, layer, x, c)
        bundles.append(bundle)
        policy = layer_policy(layer, cfg)
        if policy == "shared":
            out, weights = shared_mm_attention(bundle, ref_bundles[layer], cfg, positions,
                                               heads=mc.heads, rope=rope, return_weights=True)
        else:
            out, weights = shared_mm_attention(bundle, None, VANILLA, positions,
                                               heads=mc.heads, rope=rope, return_weights=True)
        if trace is not None:
            trace.append({"layer": layer, "policy": policy, "weights": weights})
        w = model.layers[layer]
        c = c + matmul(out[:m], w["wo_txt"])
        x = x + matmul(out[m:], w["wo_img"])
    return np.concatenate([c, x]), bundles


def embed_latent(model: ToyDit, latent) -> np.ndarray:
    latent = as_matrix(latent, name="latent")
    mc = model.config
    if latent.shape != (mc.num_image_tokens, mc.latent_channels):
        raise ShapeError(f"latent shape {latent.shape} != {(mc.num_image_tokens, mc.latent_channels)}")
    return matmul(latent, model.w_in)


def predict_velocity(model: ToyDit, latent, text_tokens, t: float, cfg: SharingConfig = VANILLA,
                     ref_bundles=None, positions=None, trace=None):
    """Velocity (N x latent_channels) and the per-layer bundles for one stream."""
    tokens, bundles = forward(model, embed_latent(model, latent), text_tokens, t, cfg,
                              ref_bundles, positions, trace)
    image = tokens[model.config.text_len:]
    return matmul(rms_norm(image), model.w_out), bundles


def cfg_combine(v_uncond, v_cond, s: float) -> np.ndarray:
    u = as_matrix(v_uncond, name="v_uncond").astype(np.float64)
    c = as_matrix(v_cond, name="v_cond").astype(np.float64)
    if u.shape != c.shape:
        raise ShapeError(f"guidance operands differ: {u.shape} vs {c.shape}")
    return (u + s * (c - u)).astype(np.float32)


def time_grid(steps: int) -> np.ndarray:
    """Uniform times 1, 1 - 1/T, ..., 0 (T + 1 entries)."""
    if int(steps) < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    return 1.0 - np.arange(steps + 1, dtype=np.float64) / steps


def euler_step(x, v, dt: float) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - dt * np.asarray(v, dtype=np.float64)).astype(np.float32)


def euler_integrate(x_start, velocity: Callable[[np.ndarray, float, int], np.ndarray], steps: int) -> np.ndarray:
    """Integrate from t=1 to t=0; ``velocity(x, t, step_index)``. Returns (T+1, ...) trajectory."""
    times = time_grid(steps)
    x = np.asarray(x_start, dtype=np.float32)
    traj = [x]
    for k in range(steps):
        x = euler_step(x, velocity(x, float(times[k]), k), times[k] - times[k + 1])
        traj.append(x)
    return np.stack(traj)


@dataclass
class SampleResult:
    trajectories: List[np.ndarray]  # one (T+1, N, latent_channels) array per stream
    roles: List[str]
    prompts: List[Optional[int]]
    traces: Dict[Tuple[int, int], list] = field(default_factory=dict)  # (stream, step) -> layer trace

    @property
    def finals(self) -> List[np.ndarray]:
        return [traj[-1] for traj in self.trajectories]


def initial_noise(model: ToyDit, seed: int, stream: int) -> np.ndarray:
    mc = model.config
    return Pcg32(derive_seed(seed, "noise", stream)).normal_matrix(mc.num_image_tokens, mc.latent_channels)


def rf_sample(
    model: ToyDit,
    sampler: SamplerConfig,
    sharing: SharingConfig,
    seed: int,
    prompts: Sequence[Optional[int]] = (0, 1, 2, 3),
    ref_cache=None,
    trace_steps: Sequence[int] = (),
    uncond_prompt: Optional[int] = None,
) -> SampleResult:
    """Sample a reference stream plus targets with classifier-free guidance.

    Without ``ref_cache`` the first prompt is the reference: it runs plain
    attention and, at each step, its per-layer bundles (conditional and
    unconditional passes separately) are shared into every target. With a
    ``ref_cache`` (see ``attnshare.refcache``) every prompt is a target and the
    cached bundles for the current step index are shared into both passes.
    Targets never attend to each other.
    """
    mc = model.config
    sharing.check_layers(mc.layers)
    prompts = list(prompts)
    if not prompts:
        raise ValidationError("need at least one prompt")
    live_ref = ref_cache is None
    roles = (["reference"] + ["target"] * (len(prompts) - 1)) if live_ref else ["target"] * len(prompts)
    positions = make_positions(mc.grid, mc.text_len, sharing)
    cond = [prompt_embedding(model, p) for p in prompts]
    uncond = prompt_embedding(model, uncond_prompt)
    states = [initial_noise(model, seed, k) for k in range(len(prompts))]
    trajs = [[s] for s in states]
    times = time_grid(sampler.steps)
    traces: Dict[Tuple[int, int], list] = {}
    trace_steps = set(trace_steps)
    workers = thread_cap()

    def guided(k, t, cfg, ref_c, ref_u, step):
        trace = [] if step in trace_steps else None
        v_c, b_c = predict_velocity(model, states[k], cond[k], t, cfg, ref_c, positions, trace)
        if trace is not None:
            traces[(k, step)] = trace
        v_u, b_u = predict_velocity(model, states[k], uncond, t, cfg, ref_u, positions)
        return cfg_combine(v_u, v_c, sampler.cfg_scale), dict(enumerate(b_c)), dict(enumerate(b_u))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for step in range(sampler.steps):
            t, dt = float(times[step]), float(times[step] - times[step + 1])
            if live_ref:
                v_ref, ref_c, ref_u = guided(0, t, VANILLA, None, None, step)
                targets = range(1, len(prompts))
            else:
                t_idx = sampler.steps - step
                ref_c = ref_u = ref_cache.bundles_at(t_idx)
                targets = range(len(prompts))
            jobs = {k: pool.submit(guided, k, t, sharing, ref_c, ref_u, step) for k in targets}
            new = {k: job.result()[0] for k, job in jobs.items()}
            if live_ref:
                new[0] = v_ref
            for k, v in new.items():
                states[k] = euler_step(states[k], v, dt)
                trajs[k].append(states[k])
    return SampleResult([np.stack(tr) for tr in trajs], roles, prompts, traces)
