"""Experiment configuration: one JSON document, one section per module, unknown keys rejected."""

from __future__ import annotations

import hashlib
import json
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .density import ConditionedDensity, GaussianMixture, NoiseSchedule, mixture_from_config
from .distill import DistillConfig
from .flowmatch import FmConfig
from .geodesic import GeodesicConfig
from .rng import make_rng
from .tasks import (
    RotationTaskSpec,
    bridge_density,
    make_gmm_bridge_task,
    make_offset_task,
    make_rotation_task,
    rotation_task_density,
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScheduleSection(_Strict):
    kind: Literal["linear-VP", "cosine"] = "linear-VP"
    beta_min: float = 0.1
    beta_max: float = 20.0

    def build(self) -> NoiseSchedule:
        return NoiseSchedule(self.kind, self.beta_min, self.beta_max)


class Component(_Strict):
    weight: float = Field(gt=0)
    mean: list[float]
    cov: float | list[float]
    label: int | None = None


class DensitySection(_Strict):
    """``bridge``/``rotation`` use the task's own density; ``mixture`` lists components."""

    kind: Literal["bridge", "rotation", "mixture"] = "bridge"
    separation: float = 5.0
    std: float = 0.9
    components: list[Component] | None = None
    labeled: bool = True
    schedule: ScheduleSection = ScheduleSection()

    @model_validator(mode="after")
    def _components_present(self):
        if self.kind == "mixture" and not self.components:
            raise ValueError("density.kind 'mixture' needs a non-empty 'components' list")
        return self


class TaskSection(_Strict):
    kind: Literal["bridge", "rotation", "offset"] = "bridge"
    n_train: int = Field(256, ge=1)
    n_test: int = Field(64, ge=1)
    # rotation
    d: int = Field(2, ge=2)
    radius: float = 2.0
    ring_std: float = 0.35
    ring_components: int = Field(8, ge=1)
    other_std: float = 0.5
    warp_strength: float = Field(0.5, ge=0)
    angle_range: tuple[float, float] = (-0.8 * np.pi, 0.8 * np.pi)
    ray_grid: int = Field(0, ge=0)
    # offset
    offset: list[float] = [1.5, -0.7]

    def rotation_spec(self) -> RotationTaskSpec:
        return RotationTaskSpec(
            self.d, self.radius, self.ring_std, self.ring_components, self.other_std,
            self.warp_strength, tuple(self.angle_range), self.ray_grid,
        )


class GeodesicSection(_Strict):
    n_nodes: int = Field(64, ge=4)
    step_size: float = Field(0.4, gt=0)
    iterations: int = Field(6000, ge=0)
    resample_every: int = Field(10, ge=1)
    projection: Literal["rescaled", "full-funcderiv"] = "rescaled"
    tol: float = Field(1e-14, ge=0)
    pairs: int = Field(4, ge=1)
    oracle_resolution: int = Field(256, ge=8)
    bounds: tuple[tuple[float, float], tuple[float, float]] | None = None

    def build(self) -> GeodesicConfig:
        return GeodesicConfig(self.step_size, self.iterations, self.resample_every, self.projection, tol=self.tol)


class DistillSection(_Strict):
    tau: float = Field(0.6, gt=0, lt=1)
    beta: float = 1.0
    t_grid_size: int = Field(8, ge=1)
    teacher_lr: float = Field(1e-2, gt=0)
    student_lr: float = Field(3e-3, gt=0)
    epochs: int = Field(100, ge=0)
    ode_steps: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=0)
    teacher_optimizer: Literal["sgd", "adam"] = "sgd"
    student_optimizer: Literal["sgd", "adam"] = "adam"
    clip: float = Field(10.0, gt=0)
    projection: Literal["full-funcderiv", "rescaled"] = "full-funcderiv"
    jitter: bool = True
    mode: Literal["alternating", "phased"] = "alternating"
    hidden: list[int] = [64, 64]
    activation: Literal["silu", "tanh"] = "silu"
    line_search: bool = True
    n_pairs: int = Field(64, ge=1)

    def build(self, seed: int) -> DistillConfig:
        d = self.model_dump()
        d.pop("n_pairs")
        return DistillConfig(**d, seed=seed)


class FmSection(_Strict):
    interpolant: Literal["linear", "geodesic"] = "linear"
    sigma_min: float = Field(0.01, ge=0)
    lr: float = Field(3e-3, gt=0)
    steps: int = Field(3000, ge=0)
    batch: int = Field(256, ge=1)
    t_sampling: Literal["lognormal", "uniform", "discrete"] = "lognormal"
    t_grid: int = Field(10, ge=1)
    source_aug_strength: float = Field(0.0, ge=0, le=1)
    geodesic_noise: bool = False
    optimizer: Literal["sgd", "adam"] = "adam"
    lr_schedule: Literal["cosine", "constant"] = "cosine"
    clip: float = Field(10.0, gt=0)
    hidden: list[int] = [64, 64]
    activation: Literal["silu", "tanh"] = "silu"
    student_checkpoint: str | None = None

    def build(self, seed: int) -> FmConfig:
        d = self.model_dump()
        d.pop("student_checkpoint")
        return FmConfig(**d, seed=seed)


class SampleSection(_Strict):
    nfe: int = Field(100, ge=1)
    method: Literal["euler", "heun"] = "euler"
    checkpoint: str | None = None
    n: int = Field(64, ge=1)


class EvalSection(_Strict):
    nfe: list[int] = [10, 100]
    t_grid: int = Field(9, ge=1)
    curve_pairs: int = Field(32, ge=1)
    energy_max_points: int = Field(2000, ge=2)


class ExperimentConfig(_Strict):
    name: str = Field(pattern=r"^[A-Za-z0-9_.-]+$")
    seed: int = 0
    density: DensitySection = DensitySection()
    task: TaskSection = TaskSection()
    geodesic: GeodesicSection = GeodesicSection()
    distill: DistillSection = DistillSection()
    fm: FmSection = FmSection()
    sample: SampleSection = SampleSection()
    eval: EvalSection = EvalSection()

    @field_validator("seed")
    @classmethod
    def _seed_range(cls, v):
        if not 0 <= v < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        return v

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if seed is not None:
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
        raw["seed"] = seed
    return ExperimentConfig.model_validate(raw)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_density(cfg: ExperimentConfig) -> ConditionedDensity:
    ds = cfg.density
    sch = ds.schedule.build()
    if ds.kind == "bridge":
        return bridge_density(ds.separation, ds.std, sch)
    if ds.kind == "rotation":
        return rotation_task_density(cfg.task.rotation_spec(), schedule=sch)
    m = mixture_from_config([c.model_dump() for c in ds.components])
    if ds.labeled and m.labels is not None:
        return ConditionedDensity(m, None, sch)
    return ConditionedDensity(GaussianMixture(m.weights, m.means, m.variances), None, sch)


def build_datasets(cfg: ExperimentConfig, cd: ConditionedDensity):
    """Train and test splits, each a pure function of (config, seed)."""
    t = cfg.task
    out = []
    for split, n in (("train", t.n_train), ("test", t.n_test)):
        rng = make_rng(cfg.seed, 1000 + (split == "test"))
        if t.kind == "bridge":
            out.append(make_gmm_bridge_task(n, cd, rng))
        elif t.kind == "rotation":
            out.append(make_rotation_task(n, rng, t.rotation_spec()))
        else:
            out.append(make_offset_task(n, t.offset, rng))
    return tuple(out)
