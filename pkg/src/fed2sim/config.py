"""Experiment config schema, validated before any compute runs."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

REPORTS = ("metrics", "feature_encoding", "conflicts", "tv_profile", "heatmap", "cost_sweep")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticData(_Strict):
    kind: Literal["synthetic"] = "synthetic"
    classes: int = Field(10, ge=2)
    train_per_class: int = Field(100, ge=1)
    test_per_class: int = Field(50, ge=1)
    shape: list[int] = Field(default_factory=lambda: [1, 8, 8])
    separation: float = Field(1.0, ge=0)
    noise: float = Field(1.0, ge=0)
    jitter: int = Field(1, ge=0)

    @model_validator(mode="after")
    def _shape(self):
        if len(self.shape) not in (1, 3) or min(self.shape) < 1:
            raise ValueError("shape must be [features] or [channels, height, width] with positive sizes")
        return self


class IdxData(_Strict):
    kind: Literal["idx"]
    classes: int = Field(10, ge=2)
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    limit_per_class: int | None = Field(None, ge=1)


class NxCPartition(_Strict):
    kind: Literal["nxc"] = "nxc"
    classes_per_client: int = Field(5, ge=1)


class DirichletPartition(_Strict):
    kind: Literal["dirichlet"]
    alpha: float = Field(gt=0)


class LayerConfig(_Strict):
    kind: Literal["conv", "dense", "pool", "flatten"]
    out: int = 0
    kernel: int = 3
    activation: Literal["relu"] | None = "relu"
    norm: Literal["gn", "bn"] | None = None
    size: int = 2


class ModelConfig(_Strict):
    preset: Literal["vgg_like"] | None = "vgg_like"
    widths: list[int] = Field(default_factory=lambda: [16, 20])
    fc: int = Field(40, ge=1)
    norm: Literal["gn", "bn"] | None = "gn"
    layers: list[LayerConfig] | None = None    # explicit stack; overrides the preset
    shared_depth: int | None = Field(None, ge=0)  # D_share; None keeps every layer shared
    groups: int = Field(10, ge=1)
    norm_groups: int = Field(4, ge=1)
    split_transition: bool = False


class FederationBlock(_Strict):
    clients: int = Field(10, ge=1)
    rounds: int = Field(30, ge=1)
    local_epochs: int = Field(1, ge=1)
    lr: float = Field(0.05, ge=0)
    batch_size: int = Field(32, ge=1)
    aggregation: Literal["fedavg", "fed2"] = "fed2"
    analysis_every: int = Field(1, ge=1)
    probe_batches: int = Field(4, ge=1)
    probe_batch_size: int = Field(32, ge=1)
    signed: bool = True


class CostBlock(_Strict):
    """Cost-model inputs. ``L``, ``k`` and ``f`` default to the model's conv layers."""

    L: int | None = Field(None, ge=1)
    D: int | None = Field(None, ge=0)
    B_w: float = Field(64, gt=0)
    k: list[float] | None = None
    f: list[float] | None = None
    P: float = Field(1, ge=0)
    F_r: float = Field(1.0, gt=0, le=1)
    R: float = Field(1, ge=1)
    N: int | None = Field(None, ge=1)
    corrected: bool = False
    sweep: dict[str, list[float]] = Field(default_factory=dict)


class OutputsBlock(_Strict):
    dir: str = "fed2sim-out"
    reports: list[Literal[REPORTS]] = Field(default_factory=lambda: list(REPORTS))


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2 ** 64)
    dataset: Annotated[Union[SyntheticData, IdxData], Field(discriminator="kind")] = Field(
        default_factory=SyntheticData)
    partition: Annotated[Union[NxCPartition, DirichletPartition], Field(discriminator="kind")] = Field(
        default_factory=NxCPartition)
    model: ModelConfig = Field(default_factory=ModelConfig)
    federation: FederationBlock = Field(default_factory=FederationBlock)
    cost: CostBlock | None = None
    outputs: OutputsBlock = Field(default_factory=OutputsBlock)

    @model_validator(mode="before")
    @classmethod
    def _default_kinds(cls, data):
        # blocks may omit "kind"; the discriminated unions still need it to pick a schema
        if isinstance(data, dict):
            data = dict(data)
            for key, kind in (("dataset", "synthetic"), ("partition", "nxc")):
                if isinstance(data.get(key), dict) and "kind" not in data[key]:
                    data[key] = {"kind": kind, **data[key]}
        return data

    @model_validator(mode="after")
    def _consistent(self):
        C = self.dataset.classes
        if isinstance(self.partition, NxCPartition) and self.partition.classes_per_client > C:
            raise ValueError(f"partition.classes_per_client={self.partition.classes_per_client} "
                             f"exceeds dataset.classes={C}")
        if self.model.shared_depth is not None and self.model.groups > C:
            raise ValueError(f"model.groups={self.model.groups} exceeds dataset.classes={C}")
        if self.model.layers is None and self.model.preset is None:
            raise ValueError("model needs either a preset or an explicit layers list")
        return self


class ConfigError(ValueError):
    """Invalid config; ``str()`` lists one ``field.path: message`` line per problem."""


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "\n".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format(err)) from None


def load_config(path) -> ExperimentConfig:
    """Read a JSON config, or the resolved config inside a run manifest."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err.msg} at line {err.lineno})") from None
    if isinstance(data, dict) and data.get("format", "").startswith("fed2sim-manifest"):
        data = data["config"]
    elif isinstance(data, dict) and isinstance(data.get("dataset"), dict) and data["dataset"].get("kind") == "idx":
        # relative IDX paths are taken relative to the config file
        ds = dict(data["dataset"])
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if k in ds and not Path(ds[k]).is_absolute():
                ds[k] = str((path.parent / ds[k]).resolve())
        data = {**data, "dataset": ds}
    return parse_config(data)
