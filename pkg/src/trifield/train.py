"""Losses, the optimizer schedule, scene initialization, loss-guided incremental
training, and online extension with block chaining.

Training optimizes the active block only. The per-keyframe per-pixel loss cache
drives the incremental sampling plan: ray budgets concentrate on pixels whose
photometric loss was high the last time they were seen, mixed with a uniform
floor so nothing starves. New blocks spawn when the camera walks outside the
active block's cube and are supervised on the new frames plus an overlap window
of recent ones.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np
import torch

from .camera import Intrinsics, Pose, camera_ray_grid
from .config import mix_seed, numpy_rng, torch_generator
from .dibr import Keyframe
from .field import Bounds, TriPlaneField
from .refine import Refiner, RefinerError, RefineInput, RefineOutput
from .render import RenderConfig, ViewRender, render_ray_batch, render_view


class DivergenceError(RuntimeError):
    pass


class NonFiniteGradientError(RuntimeError):
    pass


class ZeroVarianceWarning(UserWarning):
    pass


# -- losses ---------------------------------------------------------------------

def photometric_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the squared L2 color residual."""
    if rendered.shape != target.shape:
        raise ValueError("rendered/target shapes disagree")
    if rendered.numel() == 0:
        raise ValueError("empty batch")
    return ((rendered - target) ** 2).sum(dim=-1).mean()


@dataclass(frozen=True)
class LossConfig:
    lambda_depth: float = 0.1
    normalization: str = "standardize"

    def __post_init__(self):
        if self.lambda_depth < 0:
            raise ValueError("lambda_depth must be nonnegative")
        if self.normalization != "standardize":
            raise ValueError(f"unknown depth normalization {self.normalization!r}")


def _standardize(values: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Zero mean, unit (population) std; a zero-variance side maps to all zeros."""
    mean = values.mean()
    std = values.std(unbiased=False)
    if float(std.detach()) < 1e-20:
        return torch.zeros_like(values.detach()), True
    return (values - mean) / std, False


def depth_loss(rendered: torch.Tensor, reference: torch.Tensor,
               config: LossConfig = LossConfig()) -> torch.Tensor:
    """Scale/shift-invariant depth loss: both sides standardized per frame, then
    mean squared difference. The balance weight is applied by the caller."""
    if rendered.shape != reference.shape:
        raise ValueError("rendered/reference shapes disagree")
    if rendered.numel() < 2:
        raise ValueError("need at least 2 depth samples per frame")
    ref_norm, ref_flat = _standardize(reference)
    if ref_flat:
        warnings.warn("reference depth has zero variance; depth loss contributes 0",
                      ZeroVarianceWarning)
        return torch.zeros((), dtype=rendered.dtype)
    rend_norm, _ = _standardize(rendered)
    return ((rend_norm - ref_norm) ** 2).mean()


# -- optimizer --------------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to the peak rate, then cosine decay to the final rate."""

    warmup: int = 500
    peak: float = 5e-4
    final: float = 5e-6
    total: int = 10000

    def rate(self, step: int) -> float:
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        span = max(self.total - self.warmup, 1)
        progress = min((step - self.warmup) / span, 1.0)
        return self.final + (self.peak - self.final) * 0.5 * (1 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    schedule: LrSchedule
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0

    @staticmethod
    def create(params: list[torch.Tensor], schedule: LrSchedule,
               clip: float = 1.0) -> "OptimizerState":
        return OptimizerState(m=[torch.zeros_like(p) for p in params],
                              v=[torch.zeros_like(p) for p in params],
                              schedule=schedule, clip=clip)


def step_optimizer(params: list[torch.Tensor], grads: list[torch.Tensor],
                   opt: OptimizerState) -> OptimizerState:
    """Global-norm clip, then a bias-corrected adaptive-moment update in place."""
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ValueError("parameter/gradient/state counts disagree")
    for index, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape mismatch for parameter {index}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in parameter tensor "
                                         f"{index} of shape {tuple(g.shape)}")
    with torch.no_grad():
        norm_sq = sum(float((g.double() ** 2).sum()) for g in grads)
        norm = math.sqrt(norm_sq)
        scale = 1.0 if norm <= opt.clip else opt.clip / norm
        t = opt.step + 1
        lr = opt.schedule.rate(opt.step)
        bias1 = 1.0 - opt.beta1**t
        bias2 = 1.0 - opt.beta2**t
        for p, g, m, v in zip(params, grads, opt.m, opt.v):
            gc = g * scale
            m.mul_(opt.beta1).add_(gc, alpha=1 - opt.beta1)
            v.mul_(opt.beta2).addcmul_(gc, gc, value=1 - opt.beta2)
            p.add_(-lr * (m / bias1) / ((v / bias2).sqrt() + opt.eps))
    opt.step = t
    return opt


# -- scene state -------------------------------------------------------------------

@dataclass
class DatabaseEntry:
    keyframe: Keyframe
    loss_cache: np.ndarray          # (H, W) float32, last photometric loss per pixel
    has_cache: bool = False
    depth_supervised: bool = True
    blocks: set[int] = dataclass_field(default_factory=lambda: {0})


def make_entry(keyframe: Keyframe, depth_supervised: bool = True,
               block: int = 0) -> DatabaseEntry:
    return DatabaseEntry(keyframe=keyframe,
                         loss_cache=np.zeros(keyframe.shape, dtype=np.float32),
                         depth_supervised=depth_supervised, blocks={block})


@dataclass
class SceneState:
    blocks: list[TriPlaneField]
    entries: list[DatabaseEntry]
    camera: Intrinsics
    active_block: int = 0
    window: int = 5
    extended_frames: int = 0
    loss_history: list[float] = dataclass_field(default_factory=list)

    def validate(self) -> None:
        if not self.blocks:
            raise ValueError("scene state needs at least one block")
        for index, entry in enumerate(self.entries):
            if not entry.blocks:
                raise ValueError(f"keyframe {index} is not assigned to any block")


@dataclass(frozen=True)
class TrainConfig:
    render: RenderConfig
    batch_size: int = 256
    lambda_start: float = 0.1
    lambda_end: float = 0.01
    lr_peak: float = 5e-4
    lr_final: float = 5e-6
    warmup: int = 500
    clip: float = 1.0
    incremental_iters: int = 800
    incremental_warmup: int = 80
    incremental_batch: int = 128
    uniform_mix: float = 0.2
    new_frame_budget_factor: float = 2.0
    plane_init: float = 1e-2
    density_bias: float = -6.0
    seed: int = 0


# -- sampling plans -----------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPlan:
    entry_indices: list[int]
    budgets: list[int]              # rays per keyframe, sums to the batch size
    weights: list[np.ndarray]       # flat (H*W,) categorical weights per keyframe


def _apportion(shares: list[float], total: int) -> list[int]:
    """Largest-remainder rounding of `total` into integer budgets (deterministic)."""
    norm = sum(shares)
    exact = [total * s / norm for s in shares]
    base = [int(math.floor(e)) for e in exact]
    remainder = total - sum(base)
    order = sorted(range(len(shares)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:remainder]:
        base[i] += 1
    return base


def information_gain_plan(state: SceneState, new_entry_indices: list[int],
                          window: int, batch_size: int, uniform_mix: float = 0.2,
                          new_frame_budget_factor: float = 2.0) -> SamplingPlan:
    """Ray budgets and per-pixel weights over the new keyframes plus the most
    recent `window` older ones. Cached pixels are weighted by their last loss
    mixed with a uniform floor; uncached keyframes get uniform weights and a
    larger budget."""
    new_set = set(new_entry_indices)
    old = [i for i in range(len(state.entries)) if i not in new_set]
    active = (old[-window:] if window > 0 else []) + list(new_entry_indices)
    if not active:
        raise ValueError("sampling plan has no keyframes")
    shares = [new_frame_budget_factor if i in new_set else 1.0 for i in active]
    budgets = _apportion(shares, batch_size)
    weights = []
    for i in active:
        entry = state.entries[i]
        pixels = entry.loss_cache.size
        cache = entry.loss_cache.reshape(-1).astype(np.float64)
        total = cache.sum()
        if entry.has_cache and total > 0:
            w = (1.0 - uniform_mix) * cache / total + uniform_mix / pixels
        else:
            w = np.full(pixels, 1.0 / pixels)
        weights.append(w / w.sum())
    return SamplingPlan(entry_indices=active, budgets=budgets, weights=weights)


# -- training loops ------------------------------------------------------------------

class _EntryTensors:
    """Flattened per-entry ray/target tensors for fast batched gathers."""

    def __init__(self, entries: list[DatabaseEntry], indices: list[int],
                 camera: Intrinsics, dtype: torch.dtype):
        self.indices = list(indices)
        self.local = {g: l for l, g in enumerate(self.indices)}
        origins, dirs, colors, depths, depth_ok = [], [], [], [], []
        for g in self.indices:
            kf = entries[g].keyframe
            origin, d = camera_ray_grid(camera, kf.pose)
            origins.append(torch.as_tensor(origin, dtype=dtype))
            dirs.append(torch.as_tensor(d.reshape(-1, 3), dtype=dtype))
            colors.append(torch.as_tensor(kf.image.reshape(-1, 3), dtype=dtype))
            depth = kf.depth.reshape(-1)
            ok = entries[g].depth_supervised & np.isfinite(depth) & kf.valid_mask.reshape(-1)
            depths.append(torch.as_tensor(np.where(ok, depth, 0.0), dtype=dtype))
            depth_ok.append(torch.as_tensor(ok))
        self.origins = torch.stack(origins)
        self.dirs = torch.stack(dirs)
        self.colors = torch.stack(colors)
        self.depths = torch.stack(depths)
        self.depth_ok = torch.stack(depth_ok)
        self.pixels = self.dirs.shape[1]


def _train_iterations(state: SceneState, tensors: _EntryTensors, sampler,
                      iterations: int, cfg: TrainConfig, schedule: LrSchedule,
                      lambda_fn, rng: np.random.Generator,
                      generator: torch.Generator) -> None:
    """Shared optimization loop over batches drawn by `sampler(rng) -> (entry, pix)`.

    entry indices are local to `tensors`. Mutates the active block's parameters,
    the loss caches and state.loss_history.
    """
    block = state.blocks[state.active_block]
    params = block.parameters()
    opt = OptimizerState.create(params, schedule, clip=cfg.clip)
    background = torch.as_tensor(cfg.render.background, dtype=block.dtype)
    render_cfg = replace(cfg.render, jitter=True)
    for iteration in range(iterations):
        entry_sel, pix_sel = sampler(rng)
        flat = torch.as_tensor(entry_sel * tensors.pixels + pix_sel)
        origins = tensors.origins[torch.as_tensor(entry_sel)]
        dirs = tensors.dirs.reshape(-1, 3)[flat]
        targets = tensors.colors.reshape(-1, 3)[flat]

        quad = render_ray_batch(block, origins, dirs, render_cfg, generator)
        color = quad.color + (1.0 - quad.accumulated_alpha[:, None]) * background
        per_ray = ((color - targets) ** 2).sum(dim=-1)
        loss = per_ray.mean()

        lam = lambda_fn(iteration)
        if lam > 0:
            ref_depth = tensors.depths.reshape(-1)[flat]
            ok = tensors.depth_ok.reshape(-1)[flat]
            depth_terms = []
            counts = []
            for local in np.unique(entry_sel):
                sel = torch.as_tensor((entry_sel == local)) & ok
                n = int(sel.sum())
                if n < 2:
                    continue
                ref = ref_depth[sel]
                if float(ref.std(unbiased=False)) < 1e-20:
                    continue
                depth_terms.append(depth_loss(quad.depth[sel], ref))
                counts.append(n)
            if depth_terms:
                total = sum(counts)
                weighted = sum(t * (c / total) for t, c in zip(depth_terms, counts))
                loss = loss + lam * weighted

        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {iteration}; "
                                  "parameters retain the last finite state")
        loss.backward()
        # the feature head is not touched by this loss; treat it as zero-grad
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
        step_optimizer(params, grads, opt)
        for p in params:
            p.grad = None

        cache_vals = per_ray.detach().to(torch.float32).numpy()
        state.loss_history.append(float(cache_vals.mean()))
        for local in np.unique(entry_sel):
            g = tensors.indices[local]
            sel = entry_sel == local
            entry = state.entries[g]
            entry.loss_cache.reshape(-1)[pix_sel[sel]] = cache_vals[sel]
            entry.has_cache = True


def train_initial(state: SceneState, iterations: int, cfg: TrainConfig) -> SceneState:
    """Optimize the active block on rays drawn uniformly from every keyframe."""
    state.validate()
    if iterations == 0:
        return state
    block = state.blocks[state.active_block]
    tensors = _EntryTensors(state.entries, list(range(len(state.entries))),
                            state.camera, block.dtype)
    rng = numpy_rng(mix_seed(cfg.seed, "init"))
    generator = torch_generator(mix_seed(cfg.seed, "init-jitter"))
    schedule = LrSchedule(warmup=min(cfg.warmup, max(iterations // 2, 1)),
                          peak=cfg.lr_peak, final=cfg.lr_final, total=iterations)
    n_total = len(tensors.indices) * tensors.pixels

    def sampler(r: np.random.Generator):
        flat = r.integers(0, n_total, size=cfg.batch_size)
        return (flat // tensors.pixels).astype(np.int64), flat % tensors.pixels

    span = max(iterations - 1, 1)

    def lambda_fn(it: int) -> float:
        return cfg.lambda_start + (cfg.lambda_end - cfg.lambda_start) * it / span

    _train_iterations(state, tensors, sampler, iterations, cfg, schedule,
                      lambda_fn, rng, generator)
    return state


@dataclass
class ExtendResult:
    state: SceneState
    rendered: ViewRender
    refined: RefineOutput
    spawned_block: bool
    entry_index: int


def extend_scene(state: SceneState, next_pose: Pose, refiner: Refiner,
                 camera: Intrinsics, cfg: TrainConfig,
                 iterations: int | None = None) -> ExtendResult:
    """Render the next pose, refine it, append it to the database, chain a new
    block if the camera left the active one, and run the incremental updates."""
    state.validate()
    if not np.all(np.isfinite(next_pose.matrix_3x4)):
        raise ValueError("next pose is not finite")
    rendered = render_view(state.blocks, next_pose, camera, cfg.render.evaluation())
    request = RefineInput(image=rendered.image, feature=rendered.feature,
                          depth=rendered.depth, alpha=np.clip(rendered.alpha, 0.0, 1.0),
                          pose=next_pose, prompt="")
    try:
        refined = refiner.refine(request)
    except Exception as exc:
        raise RefinerError(f"refiner {refiner.name!r} failed: {exc}") from exc

    depth = refined.depth if refined.depth is not None else rendered.depth
    keyframe = Keyframe(image=np.clip(refined.image, 0.0, 1.0), depth=depth,
                        pose=next_pose,
                        valid_mask=np.ones(rendered.image.shape[:2], dtype=bool))
    previous_last_center = state.entries[-1].keyframe.pose.center

    frame_index = state.extended_frames
    entry = make_entry(keyframe, depth_supervised=refined.depth is not None,
                       block=state.active_block)
    state.entries.append(entry)
    entry_index = len(state.entries) - 1
    state.extended_frames = frame_index + 1

    spawned = not state.blocks[state.active_block].bounds.contains(next_pose.center)
    if spawned:
        old = state.blocks[state.active_block]
        new_index = len(state.blocks)
        generator = torch_generator(mix_seed(cfg.seed, "block", new_index))
        new_block = TriPlaneField.create(
            resolution=old.resolution, d=old.d, hidden=old.decoder.hidden,
            layers=old.decoder.layers,
            bounds=Bounds(previous_last_center, old.bounds.half_extent),
            generator=generator, dtype=old.dtype, l_pos=old.decoder.l_pos,
            l_dir=old.decoder.l_dir, plane_init=cfg.plane_init,
            density_bias=cfg.density_bias)
        state.blocks.append(new_block)
        state.active_block = new_index
        entry.blocks = {new_index}
        plan_preview = information_gain_plan(state, [entry_index], state.window,
                                             cfg.incremental_batch, cfg.uniform_mix,
                                             cfg.new_frame_budget_factor)
        for g in plan_preview.entry_indices:
            state.entries[g].blocks.add(new_index)

    iters = cfg.incremental_iters if iterations is None else iterations
    if iters > 0:
        plan = information_gain_plan(state, [entry_index], state.window,
                                     cfg.incremental_batch, cfg.uniform_mix,
                                     cfg.new_frame_budget_factor)
        tensors = _EntryTensors(state.entries, plan.entry_indices, camera,
                                state.blocks[state.active_block].dtype)
        rng = numpy_rng(mix_seed(cfg.seed, "extend", frame_index))
        generator = torch_generator(mix_seed(cfg.seed, "extend-jitter", frame_index))
        schedule = LrSchedule(warmup=min(cfg.incremental_warmup, max(iters // 2, 1)),
                              peak=cfg.lr_peak, final=cfg.lr_final, total=iters)
        budgets = plan.budgets
        locals_per_budget = [np.full(b, l, dtype=np.int64)
                             for l, b in enumerate(budgets) if b > 0]
        entry_sel = np.concatenate(locals_per_budget) if locals_per_budget else np.empty(0, np.int64)
        weights = plan.weights

        def sampler(r: np.random.Generator):
            pix = [r.choice(tensors.pixels, size=b, replace=True, p=weights[l])
                   for l, b in enumerate(budgets) if b > 0]
            return entry_sel, np.concatenate(pix).astype(np.int64)

        _train_iterations(state, tensors, sampler, iters, cfg, schedule,
                          lambda x: cfg.lambda_end, rng, generator)
    return ExtendResult(state=state, rendered=rendered, refined=refined,
                        spawned_block=spawned, entry_index=entry_index)
