"""Pipeline configuration: YAML loading and up-front validation.

Relative paths resolve against the directory of the config file. Every
problem is reported as a :class:`ConfigError` naming the offending field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .ingest import DEFAULT_K, DEFAULT_SIDE_WEIGHT, DEFAULT_SIGMA_MULT, ManifestError, SequenceManifest, load_manifest
from .lidar.profile import SensorProfile, UnknownPresetError, resolve_profile
from .replay import COMPOSITIONS
from .sdf import OptimizerConfig, RenderConfig, TsdfConfig

METHODS = ("tsdf", "volume-fit", "both")

# fixed stage ids: appending a stage never shifts the streams of earlier ones
STAGE_INGEST, STAGE_RECONSTRUCT, STAGE_SIMULATE, STAGE_EVALUATE = 1, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


def stage_seed(root: int, *keys: int) -> int:
    """Independent 32-bit sub-seed for a stage (and optional sub-keys)."""
    return int(np.random.SeedSequence([int(root), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class GridConfig:
    voxel_size: float = 0.1
    padding: float = 2.0
    origin: Optional[tuple[float, float, float]] = None
    dims: Optional[tuple[int, int, int]] = None


@dataclass(frozen=True)
class IngestConfig:
    outlier_k: int = DEFAULT_K
    outlier_sigma: float = DEFAULT_SIGMA_MULT
    side_weight: float = DEFAULT_SIDE_WEIGHT
    max_range: float = math.inf


@dataclass(frozen=True)
class VolumeFitConfig:
    max_rays: int = 20000      # seeded subsample of the ray bundle
    voxel_size: Optional[float] = None  # defaults to grid.voxel_size
    init_value: float = 1.0


@dataclass(frozen=True)
class ReplayConfig:
    ego_track: Optional[Path] = None
    object_tracks: Optional[Path] = None
    assets: Optional[Path] = None
    size_map: Optional[Path] = None
    composition: str = "componentwise"


@dataclass(frozen=True)
class EvalSequence:
    sequence_id: str
    manifest: Path
    mesh: Path


@dataclass(frozen=True)
class PipelineConfig:
    manifest_path: Optional[Path]
    output: Path
    seed: int = 0
    method: str = "tsdf"
    grid: GridConfig = field(default_factory=GridConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    tsdf: TsdfConfig = field(default_factory=TsdfConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    volume_fit: VolumeFitConfig = field(default_factory=VolumeFitConfig)
    source_profile: Optional[SensorProfile] = None
    target_profiles: tuple[SensorProfile, ...] = ()
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    mesh: Optional[Path] = None
    truncation_fraction: float = 0.97
    eval_sequences: tuple[EvalSequence, ...] = ()
    threads: Optional[int] = None
    manifest: Optional[SequenceManifest] = None


def _block(doc: dict, key: str, cls, convert=None):
    raw = doc.get(key) or {}
    if not isinstance(raw, dict):
        raise ConfigError(key, "must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{key}.{unknown[0]}", f"unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = {}
    for k, v in raw.items():
        try:
            kwargs[k] = convert(k, v) if convert else v
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}.{k}", str(exc)) from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def _path(base: Path, value, where: str, must_exist: bool = True) -> Path:
    if not isinstance(value, (str, Path)) or not str(value):
        raise ConfigError(where, "expected a path")
    p = Path(value)
    p = p if p.is_absolute() else base / p
    if must_exist and not p.exists():
        raise ConfigError(where, f"path does not exist: {p}")
    return p


def _profiles(spec, where: str, base: Path) -> tuple[SensorProfile, ...]:
    if isinstance(spec, str) and not spec.startswith(("/", ".")) and (base / spec).exists():
        spec = str(base / spec)
    try:
        return resolve_profile(spec)
    except UnknownPresetError as exc:
        raise ConfigError(where, str(exc)) from None
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(where, str(exc)) from None


def _number(k, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    return v


def _seed(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2 ** 64:
        raise ConfigError(where, f"seed must be an integer in [0, 2^64), got {value!r}")
    return value


def load_config(path, overrides: Optional[dict[str, Any]] = None) -> PipelineConfig:
    """Parse and validate a pipeline config; ``overrides`` holds CLI flags."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if path is None:
        doc, base = {}, Path.cwd()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"cannot parse YAML: {exc}") from None
        base = path.parent
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a mapping")
    return build_config(doc, base, overrides)


_TOP = {"manifest", "output", "seed", "method", "grid", "ingest", "tsdf", "render", "optimizer", "volume_fit",
        "source_profile", "target_profiles", "replay", "mesh", "evaluate", "threads"}


def build_config(doc: dict, base: Path, overrides: Optional[dict[str, Any]] = None) -> PipelineConfig:
    overrides = overrides or {}
    unknown = sorted(set(doc) - _TOP)
    if unknown:
        raise ConfigError(unknown[0], f"unknown key (allowed: {', '.join(sorted(_TOP))})")

    seed = _seed(overrides.get("seed", doc.get("seed", 0)), "seed")
    method = overrides.get("method", doc.get("method", "tsdf"))
    if method not in METHODS:
        raise ConfigError("method", f"must be one of {', '.join(METHODS)}, got {method!r}")
    out = overrides.get("output", doc.get("output"))
    if out is None:
        raise ConfigError("output", "no output directory (set 'output' or pass --out)")
    output = Path(out) if "output" in overrides else _path(base, out, "output", must_exist=False)

    manifest_path = manifest = None
    if doc.get("manifest") is not None:
        manifest_path = _path(base, doc["manifest"], "manifest")
        try:
            manifest = load_manifest(manifest_path, "manifest")
        except ManifestError as exc:
            raise ConfigError(exc.field, str(exc).split(": ", 1)[-1]) from None

    grid = _block(doc, "grid", GridConfig, lambda k, v: tuple(v) if k in ("origin", "dims") else v)
    if not grid.voxel_size > 0 or grid.padding < 0:
        raise ConfigError("grid", "voxel_size must be positive and padding non-negative")
    if (grid.origin is None) != (grid.dims is None):
        raise ConfigError("grid", "give both origin and dims, or neither for automatic bounds")
    if grid.dims is not None and (len(grid.dims) != 3 or min(grid.dims) < 2 or len(grid.origin) != 3):
        raise ConfigError("grid.dims", "need three dimensions of at least 2 nodes and a 3-component origin")
    ingest = _block(doc, "ingest", IngestConfig, _number)
    if ingest.outlier_k < 1 or not ingest.outlier_sigma > 0 or not ingest.side_weight > 0:
        raise ConfigError("ingest", "outlier_k >= 1, outlier_sigma > 0 and side_weight > 0 required")
    tsdf = _block(doc, "tsdf", TsdfConfig, _number)
    if not tsdf.truncation_distance > 0 or not tsdf.max_weight >= 1:
        raise ConfigError("tsdf", "truncation_distance must be positive and max_weight >= 1")
    render = _block(doc, "render", RenderConfig)
    if isinstance(doc.get("optimizer"), dict) and "seed" in doc["optimizer"]:
        raise ConfigError("optimizer.seed", "derived from the root 'seed'; set that instead")
    optimizer = _block(doc, "optimizer", OptimizerConfig)
    if optimizer.epochs < 1 or optimizer.batch_size < 1 or not optimizer.lr > 0:
        raise ConfigError("optimizer", "epochs, batch_size and lr must be positive")
    optimizer = OptimizerConfig(**{**optimizer.__dict__, "seed": stage_seed(seed, STAGE_RECONSTRUCT)})
    vfit = _block(doc, "volume_fit", VolumeFitConfig)
    if vfit.max_rays < 1 or (vfit.voxel_size is not None and not vfit.voxel_size > 0):
        raise ConfigError("volume_fit", "max_rays must be >= 1 and voxel_size positive")

    source = None
    if doc.get("source_profile") is not None:
        source = _profiles(doc["source_profile"], "source_profile", base)[0]
    if "profile" in overrides:
        targets = _profiles(overrides["profile"], "--profile", base)
    else:
        raw_targets = doc.get("target_profiles") or []
        if not isinstance(raw_targets, list):
            raw_targets = [raw_targets]
        targets = tuple(p for i, spec in enumerate(raw_targets)
                        for p in _profiles(spec, f"target_profiles[{i}]", base))

    rdoc = doc.get("replay") or {}
    if not isinstance(rdoc, dict):
        raise ConfigError("replay", "must be a mapping")
    r_unknown = sorted(set(rdoc) - {f.name for f in fields(ReplayConfig)})
    if r_unknown:
        raise ConfigError(f"replay.{r_unknown[0]}", "unknown key")
    replay = ReplayConfig(**{k: (_path(base, v, f"replay.{k}") if k != "composition" else v)
                             for k, v in rdoc.items() if v is not None})
    if replay.composition not in COMPOSITIONS:
        raise ConfigError("replay.composition", f"must be one of {COMPOSITIONS}")

    mesh = None
    if overrides.get("mesh") is not None:
        mesh = _path(Path.cwd(), overrides["mesh"], "--mesh")
    elif doc.get("mesh") is not None:
        mesh = _path(base, doc["mesh"], "mesh", must_exist=False)

    edoc = doc.get("evaluate") or {}
    if not isinstance(edoc, dict):
        raise ConfigError("evaluate", "must be a mapping")
    frac = edoc.get("truncation_fraction", 0.97)
    if not isinstance(frac, (int, float)) or not 0 < frac <= 1:
        raise ConfigError("evaluate.truncation_fraction", "must lie in (0, 1]")
    seqs = []
    for i, item in enumerate(edoc.get("sequences") or []):
        where = f"evaluate.sequences[{i}]"
        if not isinstance(item, dict) or not {"id", "manifest", "mesh"} <= set(item):
            raise ConfigError(where, "needs id, manifest and mesh")
        mpath = _path(base, item["manifest"], f"{where}.manifest")
        try:
            load_manifest(mpath, f"{where}.manifest")
        except ManifestError as exc:
            raise ConfigError(exc.field, str(exc).split(": ", 1)[-1]) from None
        seqs.append(EvalSequence(str(item["id"]), mpath, _path(base, item["mesh"], f"{where}.mesh", must_exist=False)))
    if len({s.sequence_id for s in seqs}) != len(seqs):
        raise ConfigError("evaluate.sequences", "sequence ids must be unique")

    threads = overrides.get("threads", doc.get("threads"))
    if threads is not None and (isinstance(threads, bool) or not isinstance(threads, int) or threads < 1):
        raise ConfigError("threads", f"must be a positive integer, got {threads!r}")

    return PipelineConfig(manifest_path, output, seed, method, grid, ingest, tsdf, render, optimizer, vfit,
                          source, tuple(targets), replay, mesh, float(frac), tuple(seqs), threads, manifest)
