"""
Two-stage inverse-rendering driver.

Stage 1 fits geometry, opacity, radiance colours and materials with the
radiance colour path and no consistency terms. Stage 2 freezes geometry,
switches to PBR shading and refines albedos, sun visibility and lighting.

Trainable fields are optimised through unconstrained latents (log scale,
logit for bounded fields, softplus for sun intensity); frozen fields are
never decoded, so they stay bit-identical across steps.
"""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
from tqdm import tqdm

from config import RunConfig
from core.ingest import Dataset, FrameData
from core.ledger import (
    CheckpointError,
    append_jsonl,
    atomic_rewrite_json,
    load_checkpoint,
    save_checkpoint,
    truncate_jsonl,
)
from core.losses import LossWeights, compute_terms, total_loss
from core.render import RenderedMaps, render_view, trace_sky_visibility
from core.scene_io import load_scene, save_scene
from core.scenegraph import (
    DTYPE,
    FIELD_NAMES,
    DynamicNode,
    GaussianSet,
    Illumination,
    SceneGraph,
    instantiate,
    owner_index,
    quat_to_matrix,
)
from core.validator import NumericError
from core.visibility import bake_sun_visibility, build_bvh, hemisphere_directions
from paths import RunLayout

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LIGHT_FIELDS = ("sky_sh", "sun_direction", "sun_intensity")
ALL_FIELDS = FIELD_NAMES + LIGHT_FIELDS
GEOMETRY_FIELDS = ("means", "scales", "rotations", "opacities", "normals")

STAGE1_TRAINABLE = ("means", "scales", "rotations", "opacities", "colors", "normals", "rgb_albedo", "roughness", "lidar_albedo")
STAGE2_TRAINABLE = ("rgb_albedo", "lidar_albedo", "sun_visibility", "sky_sh", "sun_direction", "sun_intensity")

BOUND_EPS = 1e-4
SIGMOID_FIELDS = ("opacities", "rgb_albedo", "roughness", "lidar_albedo", "sun_visibility")


@dataclass(frozen=True)
class StagePlan:
    """Trainable/frozen partition and colour path of one stage."""

    stage: int
    trainable: tuple[str, ...]
    color_path: str
    densify: bool = False

    @classmethod
    def for_stage(cls, stage: int, config: RunConfig) -> "StagePlan":
        if stage == 1:
            return cls(1, STAGE1_TRAINABLE, "radiance", config.densify.enabled)
        if stage == 2:
            trainable = STAGE2_TRAINABLE
            if config.schedule.stage2_train_roughness:
                trainable = trainable + ("roughness",)
            return cls(2, trainable, "pbr", False)
        raise ValueError(f"unknown stage {stage}")

    @property
    def frozen(self) -> tuple[str, ...]:
        return tuple(name for name in ALL_FIELDS if name not in self.trainable)


# ---------------------------------------------------------------------------
# reparameterisation
# ---------------------------------------------------------------------------


def _logit(x: torch.Tensor) -> torch.Tensor:
    x = torch.clamp(x, BOUND_EPS, 1.0 - BOUND_EPS)
    return torch.log(x) - torch.log1p(-x)


def encode(name: str, value: torch.Tensor, scale_floor: float = 1e-6) -> torch.Tensor:
    """Natural value -> unconstrained latent."""
    value = value.detach().to(DTYPE)
    if name == "scales":
        return torch.log(torch.clamp(value, min=scale_floor))
    if name in SIGMOID_FIELDS:
        return _logit(value)
    if name == "sun_intensity":
        v = torch.clamp(value, min=1e-8)
        return v + torch.log(-torch.expm1(-v))
    return value.clone()


def decode(name: str, latent: torch.Tensor, scale_floor: float = 1e-6) -> torch.Tensor:
    """Latent -> natural value; bounded fields land inside their ranges."""
    if name == "scales":
        return torch.clamp(torch.exp(latent), min=scale_floor)
    if name in SIGMOID_FIELDS:
        return torch.sigmoid(latent)
    if name == "sun_intensity":
        return torch.nn.functional.softplus(latent)
    if name in ("rotations", "normals"):
        return torch.nn.functional.normalize(latent, dim=-1)
    if name == "sun_direction":
        return latent / latent.norm()
    return latent


class ParameterTable:
    """Canonical field values of a scene in storage order, plus latents.

    Storage order is background first, then each dynamic node, which is
    also the instantiate order, so per-primitive arrays line up with
    rendered primitive indices.
    """

    def __init__(self, scene: SceneGraph, scale_floor: float = 1e-6):
        self.scene = scene
        self.scale_floor = scale_floor
        parts = [scene.background] + [node.gaussians for node in scene.dynamic_nodes]
        merged = GaussianSet.concat(parts)
        self.values: dict[str, torch.Tensor] = {name: getattr(merged, name).detach().clone() for name in FIELD_NAMES}
        illum = scene.illumination
        self.values["sky_sh"] = illum.sky_sh.detach().clone()
        self.values["sun_direction"] = illum.sun_direction.detach().clone()
        self.values["sun_intensity"] = illum.sun_intensity.detach().clone()
        self.latents: dict[str, torch.nn.Parameter] = {}
        self.owners = owner_index(scene)

    def __len__(self) -> int:
        return int(self.values["means"].shape[0])

    def activate(self, trainable: tuple[str, ...]) -> list[torch.nn.Parameter]:
        """Fresh latents for the trainable fields; returns them in field order."""
        self.latents = {
            name: torch.nn.Parameter(encode(name, self.values[name], self.scale_floor))
            for name in ALL_FIELDS
            if name in trainable
        }
        return list(self.latents.values())

    def current(self) -> dict[str, torch.Tensor]:
        """Decoded trainable fields (with graph) and stored frozen fields."""
        out = dict(self.values)
        for name, latent in self.latents.items():
            out[name] = decode(name, latent, self.scale_floor)
        return out

    @torch.no_grad()
    def commit(self) -> None:
        """Copy decoded latents back into the canonical values after a step."""
        for name, latent in self.latents.items():
            if name in ("normals", "rotations"):
                latent.copy_(torch.nn.functional.normalize(latent, dim=-1))
            self.values[name] = decode(name, latent, self.scale_floor).detach().clone()

    def scene_view(self, values: dict[str, torch.Tensor] | None = None) -> SceneGraph:
        """SceneGraph sharing structure with the template but holding the given values."""
        values = self.values if values is None else values
        merged = GaussianSet(**{name: values[name] for name in FIELD_NAMES})
        start = len(self.scene.background)
        background = merged.select(slice(0, start))
        nodes = []
        for node in self.scene.dynamic_nodes:
            stop = start + len(node.gaussians)
            nodes.append(DynamicNode(node.name, merged.select(slice(start, stop)), node.trajectory))
            start = stop
        illum = Illumination(values["sky_sh"], values["sun_direction"], values["sun_intensity"])
        return SceneGraph(background, nodes, illum, self.scene.point_budget)

    def to_scene(self) -> SceneGraph:
        return self.scene_view().clone()

    def replace(self, values: dict[str, torch.Tensor], owners: np.ndarray) -> None:
        """Swap in a resized primitive set (after densification); owners stay grouped."""
        self.values.update({name: values[name].detach().clone() for name in FIELD_NAMES})
        self.owners = owners
        background = int(np.sum(owners == -1))
        nodes = []
        start = background
        for k, node in enumerate(self.scene.dynamic_nodes):
            count = int(np.sum(owners == k))
            nodes.append(DynamicNode(node.name, self._slice(start, start + count), node.trajectory))
            start += count
        self.scene = SceneGraph(self._slice(0, background), nodes, self.scene.illumination, self.scene.point_budget)

    def _slice(self, start: int, stop: int) -> GaussianSet:
        return GaussianSet(**{name: self.values[name][start:stop] for name in FIELD_NAMES})


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class OptimizationState:
    """Everything a step mutates; checkpoints persist exactly this."""

    table: ParameterTable
    plan: StagePlan
    optimizer: torch.optim.Adam
    iteration: int = 0
    seed: int = 0
    learning_rate: float = 1e-5
    max_iterations: int = 30_000
    sky_cache: dict[int, torch.Tensor] = field(default_factory=dict)
    weight_cache: dict[tuple[int, int], LossWeights] = field(default_factory=dict)
    empty_lidar_frames: set[int] = field(default_factory=set)
    grad_accum: torch.Tensor | None = None
    grad_count: torch.Tensor | None = None

    @property
    def stage(self) -> int:
        return self.plan.stage

    def frozen_mask(self) -> dict[str, bool]:
        return {name: name in self.plan.frozen for name in ALL_FIELDS}


def make_optimizer(params: list[torch.nn.Parameter], config: RunConfig) -> torch.optim.Adam:
    sched = config.schedule
    return torch.optim.Adam(
        params,
        lr=sched.learning_rate,
        betas=(sched.beta1, sched.beta2),
        eps=sched.adam_eps,
    )


def init_state(scene: SceneGraph, config: RunConfig, stage: int = 1) -> OptimizationState:
    table = ParameterTable(scene, config.scene.scale_floor)
    plan = StagePlan.for_stage(stage, config)
    optimizer = make_optimizer(table.activate(plan.trainable), config)
    state = OptimizationState(
        table=table,
        plan=plan,
        optimizer=optimizer,
        seed=config.seed,
        learning_rate=config.schedule.learning_rate,
        max_iterations=config.schedule.max_iterations,
    )
    _reset_densify_stats(state)
    return state


def _reset_densify_stats(state: OptimizationState) -> None:
    n = len(state.table)
    state.grad_accum = torch.zeros(n, dtype=DTYPE)
    state.grad_count = torch.zeros(n, dtype=DTYPE)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def frame_index(state: OptimizationState, dataset: Dataset) -> int:
    """One frame per step, cycling in dataset order."""
    return state.iteration % len(dataset)


def frame_weights(state: OptimizationState, frame: FrameData, config: RunConfig) -> LossWeights:
    """Stage- and prior-adjusted weights, resolved once per (stage, frame)."""
    key = (state.stage, frame.index)
    if key not in state.weight_cache:
        state.weight_cache[key] = LossWeights.from_config(config.loss).for_stage(state.stage).for_priors(frame.priors)
    return state.weight_cache[key]


def forward_frame(
    table: ParameterTable,
    values: dict[str, torch.Tensor],
    frame: FrameData,
    dataset: Dataset,
    plan: StagePlan,
    config: RunConfig,
    sky_vis: torch.Tensor | None = None,
    weights: LossWeights | None = None,
) -> tuple[dict[str, torch.Tensor], RenderedMaps, LossWeights]:
    """Render one training frame from the given values and evaluate the loss terms."""
    view = table.scene_view(values)
    gaussians = instantiate(view, frame.timestamp)
    maps = render_view(
        gaussians,
        dataset.rig,
        frame.index,
        view.illumination,
        config,
        config.render.samples_train,
        color_path=plan.color_path,
        sky_vis=sky_vis,
        lidar_mask=frame.lidar_mask,
        simulate_lidar=False,
    )
    if weights is None:
        weights = LossWeights.from_config(config.loss).for_stage(plan.stage).for_priors(frame.priors)
    terms = compute_terms(
        maps, frame.color, frame.intensity, frame.priors, weights,
        config.loss.neighborhood_radius, config.loss.variance_bins,
    )
    return terms, maps, weights


def sky_visibility_for(state: OptimizationState, frame: FrameData, dataset: Dataset, config: RunConfig) -> torch.Tensor | None:
    """Cached hemisphere visibility for stage 2; None in the radiance path.

    Geometry is frozen in stage 2, so the cache equals a fresh trace. With
    schedule.visibility_retrace_every = N > 0 it is rebuilt every N steps.
    """
    if state.plan.color_path != "pbr":
        return None
    every = config.schedule.visibility_retrace_every
    if every > 0 and state.iteration % every == 0:
        state.sky_cache.clear()
    cached = state.sky_cache.get(frame.index)
    if cached is not None:
        return cached
    view = state.table.scene_view()
    gaussians = instantiate(view, frame.timestamp)
    if len(gaussians) == 0:
        return None
    dirs = hemisphere_directions(gaussians.normals, config.render.samples_train)
    vis = trace_sky_visibility(gaussians, dirs, config)
    state.sky_cache[frame.index] = vis
    return vis


def gradients(
    state: OptimizationState,
    dataset: Dataset,
    frame: int,
    config: RunConfig,
) -> dict[str, torch.Tensor]:
    """d total_loss / d value for every field at the current values.

    Frozen fields get an exact zero gradient. Visibility gates enter as
    constants.
    """
    table = state.table
    data = dataset.frames[frame]
    values = {name: tensor.detach().clone().requires_grad_(name in state.plan.trainable) for name, tensor in table.values.items()}
    sky_vis = sky_visibility_for(state, data, dataset, config)
    terms, _, weights = forward_frame(table, values, data, dataset, state.plan, config, sky_vis, frame_weights(state, data, config))
    total, _ = total_loss(terms, weights)
    wrt = [name for name in ALL_FIELDS if values[name].requires_grad]
    grads = torch.autograd.grad(total, [values[name] for name in wrt], allow_unused=True)
    out = {name: torch.zeros_like(table.values[name]) for name in ALL_FIELDS}
    for name, grad in zip(wrt, grads):
        if grad is not None:
            out[name] = grad.detach()
    return out


def loss_at(state: OptimizationState, dataset: Dataset, frame: int, config: RunConfig, values: dict[str, torch.Tensor] | None = None) -> float:
    """Scalar total loss at the given values (used for finite-difference checks)."""
    values = state.table.values if values is None else values
    data = dataset.frames[frame]
    sky_vis = sky_visibility_for(state, data, dataset, config)
    with torch.no_grad():
        terms, _, weights = forward_frame(state.table, values, data, dataset, state.plan, config, sky_vis, frame_weights(state, data, config))
        total, _ = total_loss(terms, weights)
    return float(total)


def gradient_vector(grads: dict[str, torch.Tensor]) -> torch.Tensor:
    return torch.cat([grads[name].reshape(-1) for name in ALL_FIELDS])


def _first_bad_term(terms: dict[str, torch.Tensor]) -> str:
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            return name
    return "total"


def _json_float(value: float) -> float | str:
    return value if math.isfinite(value) else repr(value)


def write_failure_dump(path: Path, state: OptimizationState, frame: int, term: str, breakdown: dict[str, float]) -> None:
    atomic_rewrite_json(path, {
        "iteration": state.iteration,
        "stage": state.stage,
        "frame": frame,
        "term": term,
        "breakdown": {k: _json_float(v) for k, v in breakdown.items()},
    })


def step(
    state: OptimizationState,
    dataset: Dataset,
    config: RunConfig,
    failure_dump: Path | None = None,
) -> dict[str, Any]:
    """Render the next frame, backpropagate and apply one Adam update.

    Raises:
        NumericError: If the loss or a gradient is non-finite; the offending
            frame and term are written to failure_dump when given.
    """
    table = state.table
    idx = frame_index(state, dataset)
    data = dataset.frames[idx]
    state.optimizer.zero_grad(set_to_none=True)
    values = table.current()
    sky_vis = sky_visibility_for(state, data, dataset, config)
    terms, maps, weights = forward_frame(table, values, data, dataset, state.plan, config, sky_vis, frame_weights(state, data, config))
    total, breakdown = total_loss(terms, weights)
    if idx not in state.empty_lidar_frames and not bool(maps.lidar_mask.any()):
        state.empty_lidar_frames.add(idx)
        logger.warning("frame %d has an empty LiDAR mask; its intensity loss is 0", idx)

    if not torch.isfinite(total):
        term = _first_bad_term(terms)
        if failure_dump is not None:
            write_failure_dump(failure_dump, state, idx, term, breakdown)
        raise NumericError(f"non-finite loss at iteration {state.iteration} frame {idx} term {term}")

    total.backward()
    for name, latent in table.latents.items():
        if latent.grad is not None and not torch.isfinite(latent.grad).all():
            if failure_dump is not None:
                write_failure_dump(failure_dump, state, idx, f"grad:{name}", breakdown)
            raise NumericError(f"non-finite gradient for '{name}' at iteration {state.iteration} frame {idx}")

    if state.plan.densify and "means" in table.latents and table.latents["means"].grad is not None:
        state.grad_accum += table.latents["means"].grad.detach().norm(dim=-1)
        state.grad_count += 1.0

    state.optimizer.step()
    table.commit()

    record = {"iteration": state.iteration, "stage": state.stage, "frame": idx}
    record.update(breakdown)
    state.iteration += 1
    return record


# ---------------------------------------------------------------------------
# stage transition and densification
# ---------------------------------------------------------------------------


def bake_initial_sun_visibility(table: ParameterTable, t: float, config: RunConfig) -> None:
    """Trace every primitive toward the sun and store v_sun in {0, 1}."""
    view = table.scene_view()
    gaussians = instantiate(view, t)
    if len(gaussians) == 0:
        return
    vis_cfg = config.visibility
    bvh = build_bvh(gaussians, vis_cfg.sigma_extent, vis_cfg.leaf_size)
    baked = bake_sun_visibility(
        gaussians, bvh, table.values["sun_direction"],
        vis_cfg.opacity_threshold, vis_cfg.epsilon, vis_cfg.ray_chunk,
    )
    table.values["sun_visibility"] = torch.as_tensor(baked, dtype=DTYPE)


def enter_stage2(state: OptimizationState, dataset: Dataset, config: RunConfig) -> None:
    """Freeze geometry, bake v_sun, switch to PBR and start a fresh Adam."""
    bake_initial_sun_visibility(state.table, dataset.frames[0].timestamp, config)
    state.plan = StagePlan.for_stage(2, config)
    state.optimizer = make_optimizer(state.table.activate(state.plan.trainable), config)
    state.sky_cache.clear()
    logger.info("stage=2 iter=%d trainable=%s", state.iteration, ",".join(state.plan.trainable))


def densify(state: OptimizationState, config: RunConfig) -> tuple[int, int, int]:
    """Clone small high-gradient primitives, split large ones, prune transparent ones.

    Returns (cloned, split, pruned). New primitives keep their parent's owner.
    """
    dcfg = config.densify
    table = state.table
    values = table.values
    n = len(table)
    if n == 0:
        return 0, 0, 0
    grads = torch.where(state.grad_count > 0, state.grad_accum / torch.clamp(state.grad_count, min=1.0), torch.zeros_like(state.grad_accum))
    means = values["means"]
    extent = float((means.max(dim=0).values - means.min(dim=0).values).norm()) if n > 1 else 1.0
    max_scale = values["scales"].max(dim=-1).values
    hot = grads >= dcfg.grad_threshold
    small = max_scale <= dcfg.percent_dense * extent
    clone_mask = hot & small
    split_mask = hot & ~small

    room = max(config.scene.point_budget - n, 0)
    if int(clone_mask.sum()) + int(split_mask.sum()) > room:
        clone_mask &= torch.cumsum(clone_mask.to(torch.int64), 0) <= room
        room -= int(clone_mask.sum())
        split_mask &= torch.cumsum(split_mask.to(torch.int64), 0) <= room

    generator = torch.Generator().manual_seed(state.seed * 1_000_003 + state.iteration)
    split_idx = torch.nonzero(split_mask).squeeze(-1)
    stds = values["scales"][split_idx].repeat(2, 1)
    samples = torch.normal(torch.zeros_like(stds), stds, generator=generator)
    rots = quat_to_matrix(values["rotations"][split_idx]).repeat(2, 1, 1)
    split_means = (rots @ samples.unsqueeze(-1)).squeeze(-1) + means[split_idx].repeat(2, 1)

    clone_idx = torch.nonzero(clone_mask).squeeze(-1)
    new_fields: dict[str, torch.Tensor] = {}
    for name in FIELD_NAMES:
        base = values[name]
        reps = [1] * (base.dim() - 1)
        split_part = base[split_idx].repeat(2, *reps)
        if name == "means":
            split_part = split_means
        elif name == "scales":
            split_part = split_part / dcfg.split_factor
        new_fields[name] = torch.cat([base, base[clone_idx], split_part], dim=0)
    owners = np.concatenate([table.owners, table.owners[clone_idx.numpy()], np.tile(table.owners[split_idx.numpy()], 2)])

    keep = torch.ones(new_fields["means"].shape[0], dtype=torch.bool)
    keep[split_idx] = False
    keep &= new_fields["opacities"] >= dcfg.prune_opacity
    pruned = int((~keep).sum()) - int(split_idx.numel())

    order = np.argsort(owners, kind="stable")
    order = order[keep.numpy()[order]]
    index = torch.as_tensor(order)
    table.replace({name: tensor[index] for name, tensor in new_fields.items()}, owners[order])

    state.optimizer = make_optimizer(table.activate(state.plan.trainable), config)
    _reset_densify_stats(state)
    return int(clone_idx.numel()), int(split_idx.numel()), pruned


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_state(state: OptimizationState, layout: RunLayout, config_hash: str) -> Path:
    """Write the scene text and a torch checkpoint for the current iteration."""
    it = state.iteration
    save_scene(layout.checkpoint_scene(it), state.table.to_scene())
    path = layout.checkpoint(it)
    save_checkpoint(path, {
        "version": CHECKPOINT_VERSION,
        "iteration": it,
        "stage": state.stage,
        "config_hash": config_hash,
        "values": {k: v.detach().clone() for k, v in state.table.values.items()},
        "owners": state.table.owners.copy(),
        "latents": {k: v.detach().clone() for k, v in state.table.latents.items()},
        "optimizer": state.optimizer.state_dict(),
        "grad_accum": state.grad_accum,
        "grad_count": state.grad_count,
    })
    logger.info("checkpoint iter=%d path=%s", it, path)
    return path


def restore_state(path: str | Path, config: RunConfig) -> OptimizationState:
    """Rebuild an OptimizationState from a checkpoint and its scene file.

    Raises:
        CheckpointError: If the checkpoint or its scene file is missing or
            was written by an incompatible version.
    """
    payload = load_checkpoint(path)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version in '{path}'.")
    iteration = int(payload["iteration"])
    scene_path = Path(path).with_name(f"scene_{iteration:06d}.txt")
    if not scene_path.exists():
        raise CheckpointError(f"Checkpoint scene not found: {scene_path}")
    scene = load_scene(scene_path)

    table = ParameterTable(scene, config.scene.scale_floor)
    table.values = {k: v.clone() for k, v in payload["values"].items()}
    table.owners = np.asarray(payload["owners"], dtype=np.int64)
    plan = StagePlan.for_stage(int(payload["stage"]), config)
    table.activate(plan.trainable)
    with torch.no_grad():
        for name, latent in table.latents.items():
            latent.copy_(payload["latents"][name])
    optimizer = make_optimizer(list(table.latents.values()), config)
    optimizer.load_state_dict(payload["optimizer"])
    state = OptimizationState(
        table=table,
        plan=plan,
        optimizer=optimizer,
        iteration=iteration,
        seed=config.seed,
        learning_rate=config.schedule.learning_rate,
        max_iterations=config.schedule.max_iterations,
        grad_accum=payload["grad_accum"],
        grad_count=payload["grad_count"],
    )
    if payload.get("config_hash") != config.config_hash():
        logger.warning("resuming from %s with a different config hash", path)
    return state


def latest_checkpoint(layout: RunLayout) -> Path | None:
    found = sorted(layout.checkpoints_dir.glob("ckpt_*.pt"))
    return found[-1] if found else None


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def run_schedule(
    scene: SceneGraph,
    dataset: Dataset,
    config: RunConfig,
    layout: RunLayout | None = None,
    resume: str | Path | None = None,
    progress: bool | None = None,
    on_step: Callable[[OptimizationState, dict[str, Any]], None] | None = None,
) -> tuple[SceneGraph, list[dict[str, Any]]]:
    """Run stage 1 then stage 2 and return the final scene and the loss log.

    With a layout, loss records stream to losses.jsonl and checkpoints are
    written every schedule.checkpoint_every iterations. Resuming truncates
    the loss log to the checkpoint's iteration and continues bit-identically.
    """
    if len(dataset) == 0:
        raise NumericError("dataset has no frames to optimise against")
    sched = config.schedule
    config_hash = config.config_hash()
    if resume is not None:
        state = restore_state(resume, config)
        logger.info("resumed iter=%d stage=%d from %s", state.iteration, state.stage, resume)
        if layout is not None:
            truncate_jsonl(layout.loss_log, state.iteration)
    else:
        state = init_state(scene, config)
    if layout is not None:
        layout.ensure_dirs()
        failure_dump = layout.failure_dump
    else:
        failure_dump = None

    if progress is None:
        progress = sys.stderr.isatty()
    log: list[dict[str, Any]] = []
    bar = tqdm(range(state.iteration, sched.max_iterations), disable=not progress, desc="invert")
    for it in bar:
        if state.stage == 1 and it >= sched.stage1_iterations:
            enter_stage2(state, dataset, config)
        record = step(state, dataset, config, failure_dump)
        log.append(record)
        if layout is not None:
            append_jsonl(layout.loss_log, record)
        if on_step is not None:
            on_step(state, record)

        done = state.iteration
        if state.plan.densify and config.densify.interval > 0 and done % config.densify.interval == 0:
            cloned, split, pruned = densify(state, config)
            logger.info("densify iter=%d cloned=%d split=%d pruned=%d primitives=%d", done, cloned, split, pruned, len(state.table))
        if sched.log_every > 0 and done % sched.log_every == 0:
            logger.info("stage=%d iter=%d total=%.6g", state.stage, done, record["total"])
        if layout is not None and done % sched.checkpoint_every == 0:
            save_state(state, layout, config_hash)

    if state.stage == 1 and sched.stage1_iterations >= sched.max_iterations:
        logger.info("schedule ended in stage 1 (stage1_iterations=%d)", sched.stage1_iterations)
    final = state.table.to_scene()
    if layout is not None:
        save_scene(layout.final_scene, final)
    return final, log
