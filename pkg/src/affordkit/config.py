"""Pipeline configuration: one resolved, serializable parameter block.

Every artifact the service writes gets the resolved config embedded
(binary containers) or written alongside as <artifact>.config.json, so
a run can be reproduced from its outputs. Field names carry explicit
units; all lengths are meters.
"""

from __future__ import annotations

import json

from pydantic import BaseModel, Field, field_validator

from .errors import UsageError
from .tensor import ORIENTATION_BINS


class PipelineConfig(BaseModel):
    """Defaults mirror the reference operating point of the pipeline."""

    n_keypoints: int = Field(default=512, ge=1)
    orientation_bins: int = 8
    cell_size_m: float = Field(default=0.01, gt=0)  # presets: 0.005 and 0.01
    sampling_scheme: str = "proximity"
    seed: int = 0
    tensor_samples: int = Field(default=4096, ge=1)
    bisector_tolerance_m: float = Field(default=0.002, gt=0)
    contact_bound_m: float = Field(default=2.0, gt=0)
    agglomeration_mode: str = "closest"
    thresholds: dict[str, float] = Field(
        default_factory=lambda: {"agglomeration": 0.7, "saliency": 0.5}
    )
    keep: float | int = 0.9  # saliency keep budget: fraction of mass or cell count
    weighted_projections: bool = False
    num_test_points: int | None = None
    test_point_density_per_m2: float = Field(default=50.0, gt=0)
    search_radius_m: float | None = None
    match_radius_m: float | None = None  # None: use cell_size_m

    @field_validator("orientation_bins")
    @classmethod
    def _bins_fixed(cls, v: int) -> int:
        if v != ORIENTATION_BINS:
            raise ValueError(f"orientation_bins is fixed at {ORIENTATION_BINS}")
        return v

    @field_validator("sampling_scheme")
    @classmethod
    def _scheme_known(cls, v: str) -> str:
        if v not in ("uniform", "proximity"):
            raise ValueError(f"unknown sampling scheme {v!r}")
        return v

    @field_validator("thresholds")
    @classmethod
    def _thresholds_in_range(cls, v: dict) -> dict:
        for name, value in v.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"threshold {name!r} must be in [0, 1]")
        return v

    def detector_config(self, pipeline: str = "agglomeration", threshold: float | None = None):
        from .detect import DetectorConfig

        return DetectorConfig(
            pipeline=pipeline,
            thresholds=dict(self.thresholds),
            threshold=threshold,
            num_test_points=self.num_test_points,
            test_point_density=self.test_point_density_per_m2,
            search_radius=self.search_radius_m,
            seed=self.seed,
        )

    def resolved(self) -> dict:
        return json.loads(self.model_dump_json())


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    return PipelineConfig(**data)


def write_config_sidecar(config: PipelineConfig, artifact_path) -> str:
    path = str(artifact_path) + ".config.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.resolved(), f, indent=1, sort_keys=True)
    return path
