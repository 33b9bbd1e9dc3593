"""
Run configuration - one JSON file drives every pipeline stage.

Sections mirror the stages (synth, sae, grid, probe, steer, split); CLI flags
are applied on top through ``apply_overrides``.
"""
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import pydantic
from pydantic import BaseModel, Field, model_validator

from latent_lens.exceptions import ConfigError
from latent_lens.gridsearch import DEFAULT_K_VALUES, DEFAULT_LATENT_DIMS, GridSpec
from latent_lens.probe import ProbeConfig
from latent_lens.sae_core import Activation, SaeConfig, TopKActivation
from latent_lens.synth import SynthSpec

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_ROOT = "runs"
OUTPUT_ENV = "LATENT_LENS_OUT"


class PathsSection(BaseModel):
    corpus: Optional[str] = Field(default=None, description="EMBC corpus; defaults to <out>/corpus.embc")
    labels: Dict[str, str] = Field(
        default_factory=dict, description="attribute -> label CSV; defaults to <out>/labels_<attribute>.csv",
    )


class SaeSection(BaseModel):
    latent_dim: int = Field(default=200, gt=0)
    activation: Activation = Field(default_factory=lambda: TopKActivation(k=20))
    learning_rate: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=256, gt=0)
    epochs: int = Field(default=20, ge=0)
    center_inputs: bool = True

    @model_validator(mode="after")
    def _k_fits(self):
        k = getattr(self.activation, "k", None)
        if k is not None and k > self.latent_dim:
            raise ValueError(f"activation.k={k} exceeds latent_dim={self.latent_dim}")
        return self


class GridSection(BaseModel):
    latent_dims: List[int] = Field(default_factory=lambda: list(DEFAULT_LATENT_DIMS), min_length=1)
    k_values: List[int] = Field(default_factory=lambda: list(DEFAULT_K_VALUES), min_length=1)
    parallel_workers: int = Field(default=1, gt=0)

    @model_validator(mode="after")
    def _positive(self):
        if any(v <= 0 for v in self.latent_dims + self.k_values):
            raise ValueError("latent_dims and k_values must be positive")
        return self


class SteerSection(BaseModel):
    attribute: Optional[str] = Field(default=None, description="Defaults to the first attribute")
    a_phi: float = Field(default=1.0, gt=0.0)
    negative_class: Optional[str] = Field(default=None, description="Defaults to 'non_<attribute>'")


class SplitSection(BaseModel):
    attribute: Optional[str] = Field(default=None, description="Defaults to the first attribute")
    k: Optional[int] = Field(default=None, gt=0, description="Grid k to track; all k values when unset")
    track: Literal["test", "train", "all"] = "test"


class RunConfig(BaseModel):
    output_dir: Optional[str] = None
    seed: int = Field(default=42, ge=0, lt=2**64)
    verbose: bool = False
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    attributes: List[str] = Field(default_factory=list)
    paths: PathsSection = Field(default_factory=PathsSection)
    synth: Optional[SynthSpec] = None
    sae: SaeSection = Field(default_factory=SaeSection)
    grid: GridSection = Field(default_factory=GridSection)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    steer: SteerSection = Field(default_factory=SteerSection)
    split: SplitSection = Field(default_factory=SplitSection)

    @model_validator(mode="after")
    def _consistent(self):
        if not self.attributes and self.synth is not None:
            self.attributes = [a.name for a in self.synth.attributes]
        if len(set(self.attributes)) != len(self.attributes):
            raise ValueError("attributes must be unique")
        for section, name in (("steer", self.steer.attribute), ("split", self.split.attribute)):
            if name is not None and name not in self.attributes:
                raise ValueError(f"{section}.attribute '{name}' is not one of {self.attributes}")
        if self.paths.corpus is not None and not Path(self.paths.corpus).exists():
            raise ValueError(f"paths.corpus does not exist: {self.paths.corpus}")
        for attr, path in self.paths.labels.items():
            if not Path(path).exists():
                raise ValueError(f"paths.labels.{attr} does not exist: {path}")
        return self

    def resolve_output(self, cli_out: Optional[str] = None) -> Path:
        """--out, then output_dir, then $LATENT_LENS_OUT, then ./runs"""
        return Path(cli_out or self.output_dir or os.getenv(OUTPUT_ENV) or DEFAULT_OUTPUT_ROOT)

    def sae_config(self, input_dim: int) -> SaeConfig:
        return SaeConfig(input_dim=input_dim, seed=self.seed, **self.sae.model_dump())

    def grid_spec(self, input_dim: int, out_dir: Path) -> GridSpec:
        return GridSpec(
            latent_dims=self.grid.latent_dims,
            k_values=self.grid.k_values,
            base=self.sae_config(input_dim),
            output_dir=str(out_dir),
            parallel_workers=self.grid.parallel_workers,
        )

    def steer_attribute(self) -> str:
        return self.steer.attribute or self._first_attribute("steer")

    def split_attribute(self) -> str:
        return self.split.attribute or self._first_attribute("split")

    def _first_attribute(self, section: str) -> str:
        if not self.attributes:
            raise ConfigError(f"No attribute configured for '{section}'; set 'attributes' or '{section}.attribute'")
        return self.attributes[0]


def describe_validation_error(error: pydantic.ValidationError) -> str:
    """``loc: msg`` for every failing field, joined on '; '"""
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{loc}: {item['msg']}")
    return "; ".join(parts)


def parse_model(model_cls, data: dict, source: str):
    try:
        return model_cls(**data)
    except pydantic.ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__}: {describe_validation_error(e)}", path=source) from e


def read_config_file(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}", path=str(path))
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config is not valid JSON: {e}", path=str(path)) from e
    if not isinstance(data, dict):
        raise ConfigError("Config must be a JSON object", path=str(path))
    return data


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read ``path`` (or start from defaults) and apply flag overrides; flags win"""
    data = read_config_file(path) if path is not None else {}
    data = apply_overrides(data, overrides or {})
    config = parse_model(RunConfig, data, str(path) if path is not None else "<defaults>")
    logger.debug("Loaded run config from %s attributes=%s seed=%d", path, config.attributes, config.seed)
    return config


def apply_overrides(data: dict, overrides: dict) -> dict:
    data = json.loads(json.dumps(data))
    if overrides.get("seed") is not None:
        data["seed"] = overrides["seed"]
        if isinstance(data.get("synth"), dict):
            data["synth"]["seed"] = overrides["seed"]
    if overrides.get("workers") is not None:
        data.setdefault("grid", {})["parallel_workers"] = overrides["workers"]
    if overrides.get("verbose"):
        data["verbose"] = True
    return data
