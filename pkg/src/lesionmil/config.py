"""Pipeline configuration: a strict YAML schema with defaults matching the
standard protocol constants (50 patches of 41 voxels, the full parameter
grids, 4 outer / 3 inner folds, 10 slices spaced 25 apart, every 10th voxel,
-950 density threshold, 0.5 posterior threshold).

Unknown keys anywhere in the file are rejected so typos cannot silently
fall back to defaults.  ``seed`` is the master seed; stage seeds derive
from it with fixed offsets documented in :func:`stage_seed`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


class ConfigError(Exception):
    """Bad configuration file: unknown keys, wrong types, bad ranges."""


class DataError(Exception):
    """Expected data artifacts are missing or inconsistent."""


_STAGE_OFFSETS = {
    "cohort": 0x1000001,
    "patches": 0x2000003,
    "cv": 0x3000005,
    "experts": 0x4000007,
}


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seed: master plus a fixed per-stage offset.  PCG64 hashes
    its seed, so nearby integers still give independent streams."""
    return int(master) + _STAGE_OFFSETS[stage]


def _require_keys(d: dict, allowed: set[str], where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _floats(v, n, where) -> tuple:
    try:
        out = tuple(float(t) for t in v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected a list of numbers") from exc
    if len(out) != n:
        raise ConfigError(f"{where}: expected {n} values, got {len(out)}")
    return out


@dataclass(frozen=True)
class PhantomProfile:
    background_mean: float = -800.0
    background_std: float = 60.0
    lesion_mean: float = -980.0
    lesion_std: float = 40.0
    lesion_count: tuple[int, int] = (0, 2)
    lesion_radius_mm: tuple[float, float] = (6.0, 10.0)
    smoothing_mm: float = 1.2

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "PhantomProfile":
        _require_keys(d, {f.name for f in fields(cls)}, where)
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "lesion_count":
                kw[f.name] = tuple(int(t) for t in _floats(v, 2, f"{where}.{f.name}"))
            elif f.name == "lesion_radius_mm":
                kw[f.name] = _floats(v, 2, f"{where}.{f.name}")
            else:
                kw[f.name] = float(v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "background_mean": self.background_mean,
            "background_std": self.background_std,
            "lesion_mean": self.lesion_mean,
            "lesion_std": self.lesion_std,
            "lesion_count": list(self.lesion_count),
            "lesion_radius_mm": list(self.lesion_radius_mm),
            "smoothing_mm": self.smoothing_mm,
        }


@dataclass(frozen=True)
class CohortConfig:
    subjects: int = 24
    dims: tuple[int, int, int] = (96, 96, 128)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    label_threshold: str | float = "median"
    mild: PhantomProfile = field(default_factory=PhantomProfile)
    severe: PhantomProfile = field(
        default_factory=lambda: PhantomProfile(lesion_count=(3, 6), lesion_radius_mm=(9.0, 16.0))
    )
    expert_keep_prob: tuple[float, float] = (0.85, 0.70)
    expert_ring_add_prob: tuple[float, float] = (0.15, 0.08)
    expert_ring_voxels: int = 2

    @classmethod
    def from_dict(cls, d: dict, where: str = "cohort") -> "CohortConfig":
        _require_keys(d, {f.name for f in fields(cls)}, where)
        kw: dict = {}
        if "subjects" in d:
            kw["subjects"] = int(d["subjects"])
        if "dims" in d:
            kw["dims"] = tuple(int(t) for t in _floats(d["dims"], 3, f"{where}.dims"))
        if "spacing" in d:
            kw["spacing"] = _floats(d["spacing"], 3, f"{where}.spacing")
        if "label_threshold" in d:
            v = d["label_threshold"]
            if v != "median":
                v = float(v)
                if not 0.0 <= v < 1.0:
                    raise ConfigError(f"{where}.label_threshold must be 'median' or in [0, 1)")
            kw["label_threshold"] = v
        for prof in ("mild", "severe"):
            if prof in d:
                kw[prof] = PhantomProfile.from_dict(d[prof], f"{where}.{prof}")
        if "expert_keep_prob" in d:
            kw["expert_keep_prob"] = _floats(d["expert_keep_prob"], 2, f"{where}.expert_keep_prob")
        if "expert_ring_add_prob" in d:
            kw["expert_ring_add_prob"] = _floats(d["expert_ring_add_prob"], 2,
                                                 f"{where}.expert_ring_add_prob")
        if "expert_ring_voxels" in d:
            kw["expert_ring_voxels"] = int(d["expert_ring_voxels"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "subjects": self.subjects,
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "label_threshold": self.label_threshold,
            "mild": self.mild.to_dict(),
            "severe": self.severe.to_dict(),
            "expert_keep_prob": list(self.expert_keep_prob),
            "expert_ring_add_prob": list(self.expert_ring_add_prob),
            "expert_ring_voxels": self.expert_ring_voxels,
        }


@dataclass(frozen=True)
class FeatureConfig:
    schema: str = "gauss"
    patches_per_subject: int = 50
    patch_size: int = 41
    levels: int = 32
    distances: tuple[int, ...] = (1, 2, 3, 4, 5)
    window: tuple[float, float] = (-1024.0, 0.0)
    scales: tuple[float, ...] = (0.6, 1.2, 2.4, 4.8)
    sketch_size: int = 1024
    instance_label_threshold: float = 0.05

    @classmethod
    def from_dict(cls, d: dict, where: str = "features") -> "FeatureConfig":
        _require_keys(d, {f.name for f in fields(cls)}, where)
        kw: dict = {}
        for name in ("patches_per_subject", "patch_size", "levels", "sketch_size"):
            if name in d:
                kw[name] = int(d[name])
        if "schema" in d:
            if d["schema"] not in ("cooc", "gauss", "both"):
                raise ConfigError(f"{where}.schema must be cooc, gauss or both")
            kw["schema"] = d["schema"]
        if "distances" in d:
            kw["distances"] = tuple(int(t) for t in d["distances"])
        if "window" in d:
            kw["window"] = _floats(d["window"], 2, f"{where}.window")
        if "scales" in d:
            kw["scales"] = tuple(float(t) for t in d["scales"])
        if "instance_label_threshold" in d:
            v = float(d["instance_label_threshold"])
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{where}.instance_label_threshold must lie in (0, 1)")
            kw["instance_label_threshold"] = v
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "patches_per_subject": self.patches_per_subject,
            "patch_size": self.patch_size,
            "levels": self.levels,
            "distances": list(self.distances),
            "window": list(self.window),
            "scales": list(self.scales),
            "sketch_size": self.sketch_size,
            "instance_label_threshold": self.instance_label_threshold,
        }


@dataclass(frozen=True)
class GridConfig:
    poly_degrees: tuple[int, ...] = (1, 2)
    rbf_sigmas: tuple[float, ...] = (8.0, 10.0, 12.0, 14.0, 16.0, 20.0)
    costs: tuple[float, ...] = (0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0)
    quantiles: tuple[float, ...] = (0.25, 0.5, 0.75, 0.9, 1.0)

    @classmethod
    def from_dict(cls, d: dict, where: str = "grid") -> "GridConfig":
        _require_keys(d, {f.name for f in fields(cls)}, where)
        kw: dict = {}
        if "poly_degrees" in d:
            kw["poly_degrees"] = tuple(int(t) for t in d["poly_degrees"])
        for name in ("rbf_sigmas", "costs", "quantiles"):
            if name in d:
                kw[name] = tuple(float(t) for t in d[name])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "poly_degrees": list(self.poly_degrees),
            "rbf_sigmas": list(self.rbf_sigmas),
            "costs": list(self.costs),
            "quantiles": list(self.quantiles),
        }


@dataclass(frozen=True)
class CvConfig:
    outer_folds: int = 4
    inner_folds: int = 3

    @classmethod
    def from_dict(cls, d: dict, where: str = "cv") -> "CvConfig":
        _require_keys(d, {"outer_folds", "inner_folds"}, where)
        return cls(outer_folds=int(d.get("outer_folds", 4)),
                   inner_folds=int(d.get("inner_folds", 3)))

    def to_dict(self) -> dict:
        return {"outer_folds": self.outer_folds, "inner_folds": self.inner_folds}


@dataclass(frozen=True)
class DensemapConfig:
    slice_count: int = 10
    slice_stride: int = 25
    step: int = 10
    posterior_threshold: float = 0.5
    laa_threshold: float = -950.0

    @classmethod
    def from_dict(cls, d: dict, where: str = "densemap") -> "DensemapConfig":
        _require_keys(d, {f.name for f in fields(cls)}, where)
        kw: dict = {k: int(d[k]) for k in ("slice_count", "slice_stride", "step") if k in d}
        if "posterior_threshold" in d:
            v = float(d["posterior_threshold"])
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{where}.posterior_threshold must lie in (0, 1)")
            kw["posterior_threshold"] = v
        if "laa_threshold" in d:
            kw["laa_threshold"] = float(d["laa_threshold"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "slice_count": self.slice_count,
            "slice_stride": self.slice_stride,
            "step": self.step,
            "posterior_threshold": self.posterior_threshold,
            "laa_threshold": self.laa_threshold,
        }


@dataclass(frozen=True)
class PipelineConfig:
    data_dir: Path = Path("data")
    output_dir: Path = Path("out")
    seed: int = 20240601
    workers: int = 1
    variant: str = "misvm-q"
    cohort: CohortConfig = field(default_factory=CohortConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    cv: CvConfig = field(default_factory=CvConfig)
    densemap: DensemapConfig = field(default_factory=DensemapConfig)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "PipelineConfig":
        _require_keys(d, {"paths", "seed", "workers", "variant", "cohort",
                          "features", "grid", "cv", "densemap"}, "config")
        kw: dict = {}
        paths = d.get("paths", {})
        _require_keys(paths, {"data_dir", "output_dir"}, "paths")
        kw["data_dir"] = (base_dir / paths.get("data_dir", "data")).resolve()
        kw["output_dir"] = (base_dir / paths.get("output_dir", "out")).resolve()
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "workers" in d:
            kw["workers"] = max(1, int(d["workers"]))
        if "variant" in d:
            if d["variant"] not in ("misvm-q", "miles-q"):
                raise ConfigError("variant must be misvm-q or miles-q")
            kw["variant"] = d["variant"]
        if "cohort" in d:
            kw["cohort"] = CohortConfig.from_dict(d["cohort"])
        if "features" in d:
            kw["features"] = FeatureConfig.from_dict(d["features"])
        if "grid" in d:
            kw["grid"] = GridConfig.from_dict(d["grid"])
        if "cv" in d:
            kw["cv"] = CvConfig.from_dict(d["cv"])
        if "densemap" in d:
            kw["densemap"] = DensemapConfig.from_dict(d["densemap"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "paths": {"data_dir": str(self.data_dir), "output_dir": str(self.output_dir)},
            "seed": self.seed,
            "workers": self.workers,
            "variant": self.variant,
            "cohort": self.cohort.to_dict(),
            "features": self.features.to_dict(),
            "grid": self.grid.to_dict(),
            "cv": self.cv.to_dict(),
            "densemap": self.densemap.to_dict(),
        }

    @property
    def variant_internal(self) -> str:
        return self.variant.replace("-", "_")

    def cohort_dir(self) -> Path:
        return self.data_dir / "cohort"

    def features_dir(self) -> Path:
        return self.data_dir / "features"


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    return PipelineConfig.from_dict(raw, base_dir=path.parent)


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False),
        encoding="utf-8",
    )
