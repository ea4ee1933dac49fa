"""
settings.py
Pipeline configuration: a flat `key=value` file with dotted section prefixes
(`gbt.bootstraps=1000`), parsed with configparser and validated by pydantic.
"""
import configparser
import hashlib
import json
import logging
from pathlib import Path
from typing import Annotated

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

from histoage.imaging.augment import AugmentPolicy
from histoage.utils.errors import ConfigError

logger = logging.getLogger(__name__)

SCALE_TAGS = ("S1", "S2", "S3")
_SECTION = "pipeline"


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


IntList = Annotated[list[int], BeforeValidator(_split_list)]
StrList = Annotated[list[str], BeforeValidator(_split_list)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsConfig(_Section):
    work_dir: Path = Path("work")
    slides_dir: Path | None = None
    cohort_file: Path | None = None


class SynthConfig(_Section):
    enabled: bool = True
    scale_factor: float = Field(1.0, gt=0.0)
    tabular_only: bool = False
    slide_size: int = Field(4096, ge=224)
    ppi: int = 2140
    latent_age_sd: float = Field(3.0, ge=0.0)
    horizon_years: float = Field(20.0, ge=0.0)
    weibull_shape: float = Field(1.5, gt=0.0)

    @field_validator("ppi")
    @classmethod
    def supported_ppi(cls, value):
        if value not in (2140, 4280):
            raise ValueError("ppi must be 2140 or 4280")
        return value


class TilingConfig(_Section):
    min_tissue_fraction: float = Field(0.20, ge=0.0, le=1.0)
    max_patches_per_slide: int = Field(0, ge=0)  # 0 keeps every foreground patch


class CDLConfig(_Section):
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    blocks: IntList = Field(default_factory=lambda: [2, 2, 3])
    widths: IntList = Field(default_factory=lambda: [64, 128, 256])
    dim_s1: int = Field(512, ge=4)
    dim_s2: int = Field(128, ge=4)
    collapse_patience: int = Field(5, ge=1)

    @model_validator(mode="after")
    def matching_blocks(self):
        if len(self.blocks) != len(self.widths):
            raise ValueError("cdl.blocks and cdl.widths must have the same length")
        if any(b < 1 for b in self.blocks) or any(w < 1 for w in self.widths):
            raise ValueError("block sizes and widths must be positive")
        return self


class ClusterConfig(_Section):
    k: int = Field(3, ge=1)
    restarts: int = Field(10, ge=1)
    max_iter: int = Field(300, ge=1)
    elbow_max_k: int = Field(6, ge=1)


class GBTConfig(_Section):
    bootstraps: int = Field(1000, ge=1)
    depth: int = Field(4, ge=1)
    trees: int = Field(200, ge=1)
    eta: float = Field(0.1, gt=0.0, le=1.0)
    lam: float = Field(1.0, ge=0.0)
    colsample: float = Field(1.0, gt=0.0, le=1.0)
    min_child: int = Field(1, ge=1)
    attention_folds: int = Field(5, ge=2)


class EpiConfig(_Section):
    cox_lambda: float = Field(0.1, ge=0.0)
    folds: int = Field(5, ge=2)
    logistic_ridge: float = Field(1e-6, ge=0.0)
    max_newton: int = Field(100, ge=1)
    curve_step: float = Field(0.25, gt=0.0)
    disease_mode: str = "threshold"

    @field_validator("disease_mode")
    @classmethod
    def known_mode(cls, value):
        if value not in ("threshold", "probability"):
            raise ValueError("disease_mode must be 'threshold' or 'probability'")
        return value


class ReportConfig(_Section):
    montage_rows: int = Field(2, ge=1)
    montage_cols: int = Field(4, ge=1)
    svg: bool = True


class PipelineConfig(_Section):
    seed: int = Field(20201231, ge=0, lt=2 ** 64)
    scales: StrList = Field(default_factory=lambda: list(SCALE_TAGS))
    paths: PathsConfig = Field(default_factory=PathsConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    tiling: TilingConfig = Field(default_factory=TilingConfig)
    augment: AugmentPolicy = Field(default_factory=AugmentPolicy)
    cdl: CDLConfig = Field(default_factory=CDLConfig)
    cluster: ClusterConfig = Field(default_factory=ClusterConfig)
    gbt: GBTConfig = Field(default_factory=GBTConfig)
    epi: EpiConfig = Field(default_factory=EpiConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)

    @field_validator("scales")
    @classmethod
    def known_scales(cls, value):
        unknown = [s for s in value if s not in SCALE_TAGS]
        if unknown or not value:
            raise ValueError(f"scales must be a non-empty subset of {list(SCALE_TAGS)}")
        if "S3" in value and not {"S1", "S2"} <= set(value):
            raise ValueError("S3 combines S1 and S2; both must be selected")
        return value

    @property
    def work_dir(self) -> Path:
        return Path(self.paths.work_dir)

    def embedding_dim(self, scale_tag: str) -> int:
        return {"S1": self.cdl.dim_s1, "S2": self.cdl.dim_s2}[scale_tag]


# ---------------------- Loading ----------------------

def parse_flat(text: str) -> dict:
    """Turn `a.b=c` lines into a nested dict {'a': {'b': 'c'}}."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as e:
        raise ConfigError("<file>", str(e).splitlines()[0]) from e

    nested = {}
    for key, value in parser.items(_SECTION):
        parts = key.strip().split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "key is both a value and a section")
        node[parts[-1]] = value.strip()
    return nested


def _merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def check_external_inputs(config: PipelineConfig):
    """Without the generator, the slides and cohort must already exist on disk."""
    if config.synth.enabled:
        return
    required = ("cohort_file",) if config.synth.tabular_only else ("slides_dir", "cohort_file")
    for name in required:
        value = getattr(config.paths, name)
        if value is None:
            raise ConfigError(f"paths.{name}", "required when synth.enabled=false")
        if not Path(value).exists():
            raise ConfigError(f"paths.{name}", f"path does not exist: {value}")


def build_config(values: dict) -> PipelineConfig:
    try:
        config = PipelineConfig.model_validate(values)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(field, first["msg"]) from e
    check_external_inputs(config)
    return config


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a config file (or defaults when path is None) and apply `a.b=value` overrides."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("<file>", f"config file not found: {path}")
        values = parse_flat(path.read_text(encoding="utf-8"))
    if overrides:
        values = _merge(values, parse_flat("\n".join(f"{k}={v}" for k, v in overrides.items())))
    config = build_config(values)
    logger.info(f"Config loaded - source: {path or '<defaults>'} - hash: {config_hash(config)[:12]}")
    return config


def config_hash(config: PipelineConfig) -> str:
    """SHA-256 over every field except the work directory location."""
    payload = config.model_dump(mode="json", exclude={"paths": {"work_dir"}})
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dump_config(config: PipelineConfig) -> str:
    """Flat `key=value` rendering that load_config reads back to an equal config."""
    lines = []

    def walk(prefix, value):
        if isinstance(value, dict):
            for key in sorted(value):
                walk(f"{prefix}.{key}" if prefix else key, value[key])
        elif isinstance(value, list):
            lines.append(f"{prefix}={','.join(str(v) for v in value)}")
        elif value is None:
            return
        else:
            lines.append(f"{prefix}={value}")

    walk("", config.model_dump(mode="json"))
    return "\n".join(lines) + "\n"
