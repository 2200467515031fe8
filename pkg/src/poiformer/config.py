"""Validated run configuration; unknown keys are rejected."""

from __future__ import annotations

import json
import os
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

METHODS = ("crop", "mask", "reorder")
ABLATIONS = ("full", "no_contrastive", "encoder_only")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True, populate_by_name=True)


class AugmentationConfig(_Strict):
    apply_prob: float = Field(0.7, ge=0.0, le=1.0)
    crop_keep_ratio: float = Field(0.7, gt=0.0, le=1.0)
    mask_ratio: float = Field(0.3, gt=0.0, le=1.0)
    reorder_ratio: float = Field(0.3, gt=0.0, le=1.0)
    enabled_methods: list[Literal["crop", "mask", "reorder"]] = Field(default_factory=lambda: list(METHODS))

    @field_validator("enabled_methods")
    @classmethod
    def _dedupe(cls, v):
        return list(dict.fromkeys(v))


class TrainConfig(_Strict):
    """Defaults are the full-scale hyperparameters; :meth:`desk` gives the small preset."""

    d: int = Field(256, gt=0)
    d_c: int = Field(50, gt=0)
    heads: int = Field(8, gt=0)
    encoder_layers: int = Field(3, ge=1)
    query_layers: int = Field(3, ge=1)
    decoder_layers: int = Field(3, ge=1)
    ffn_mult: int = Field(4, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    max_len: int = Field(100, ge=4)
    align_positions_to_end: bool = True

    lr: float = Field(1e-3, ge=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    decoupled_wd: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)
    grad_clip: Optional[float] = Field(None, gt=0.0)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(16, ge=1)
    lam: float = Field(1.0, ge=0.0, alias="lambda")
    num_negatives: int = Field(100, ge=0)
    negative_sampling: Literal["uniform", "popularity"] = "uniform"
    seed: int = 0
    ablation: Literal["full", "no_contrastive", "encoder_only"] = "full"

    tau_init: float = Field(1.0, gt=0.0)
    learnable_tau: bool = True
    tau_min: float = Field(0.05, gt=0.0)
    tau_max: float = Field(5.0, gt=0.0)

    attention_scaling: bool = True
    share_with_history_encoder: bool = False
    eq5_literal_values: bool = False
    freeze_categories: bool = False
    pretrained_categories: Optional[str] = None
    dtype: Literal["float64", "float32"] = "float64"

    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)

    eval_every: int = Field(1, ge=1)
    eval_batch_size: int = Field(256, ge=1)
    train_eval_every: int = Field(0, ge=0)
    stop_at_train_recall1: Optional[float] = Field(None, gt=0.0, le=1.0)
    record_wall_time: bool = True

    @model_validator(mode="before")
    @classmethod
    def _ablation_lambda(cls, data):
        # the ablations without a contrastive term carry lambda = 0 explicitly
        if isinstance(data, dict) and data.get("ablation") in ("no_contrastive", "encoder_only"):
            data = {k: v for k, v in data.items() if k not in ("lam", "lambda")}
            data["lambda"] = 0.0
        return data

    @model_validator(mode="after")
    def _check(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.tau_min > self.tau_max:
            raise ValueError("tau_min must not exceed tau_max")
        if self.ablation == "full" and self.lam > 0 and not self.augmentation.enabled_methods:
            raise ValueError("contrastive loss needs at least one augmentation method")
        return self

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.ablation in ("no_contrastive", "encoder_only") else self.lam

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        base = dict(d=32, heads=2, encoder_layers=2, query_layers=2, decoder_layers=2, d_c=16)
        base.update(overrides)
        return cls(**base)

    def echo(self) -> dict:
        return json.loads(self.model_dump_json(by_alias=True))


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Read a JSON config, apply overrides, then the POI_SEED environment variable."""
    data: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    if os.environ.get("POI_SEED"):
        data["seed"] = int(os.environ["POI_SEED"])
    return TrainConfig.model_validate(data)


def config_schema() -> dict:
    return TrainConfig.model_json_schema(by_alias=True)
