"""Run configuration: every threshold of the pipeline in one JSON-serializable tree."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .detectors import AugmentationSpec, DetLossWeights, TrainConfig
from .discovery import FusionConfig, PromotionConfig, SaliencyConfig
from .flow import FlowCheckConfig
from .tracking import TrackConfig, VerifyConfig

FLOW_SOURCES = ("gt", "estimated")


@dataclass(frozen=True)
class EgomotionConfig:
    iters: int = 256
    inlier_eps: float = 0.05
    cycle_threshold: float = 0.25


@dataclass(frozen=True)
class RoundConfig:
    """Settings of one EM round; round 1 always uses the hand-crafted E step."""
    index: int
    mode: str
    train: TrainConfig
    fusion: FusionConfig
    seed: int

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("rounds count from 1")
        if self.index == 1 and self.mode != "handcrafted":
            raise ValueError("round 1 must use the hand-crafted E step")
        if self.mode not in ("handcrafted", "ensemble"):
            raise ValueError(f"unknown E-step mode {self.mode!r}")


@dataclass(frozen=True)
class PipelineConfig:
    rounds: int = 3
    seed: int = 0
    flow_source: str = "gt"
    flow_noise: float = 0.0  # px std added to ground-truth flow
    flow_check: FlowCheckConfig = field(default_factory=FlowCheckConfig)
    egomotion: EgomotionConfig = field(default_factory=EgomotionConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    promotion: PromotionConfig = field(default_factory=PromotionConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iters=800, lr=1e-3))
    warm_iters: int = 400  # M-step iterations once models are warm-started
    loss_weights: DetLossWeights = field(default_factory=DetLossWeights)
    det_threshold: float = 0.3
    label_dedup_iou: float = 0.3
    track: TrackConfig = field(default_factory=TrackConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    build_library: bool = True
    evaluate_tracking: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("need at least one round")
        if self.flow_source not in FLOW_SOURCES:
            raise ValueError(f"flow_source must be one of {FLOW_SOURCES}")

    def round_config(self, k: int) -> RoundConfig:
        iters = self.train.iters if k == 1 else self.warm_iters
        train = dataclasses.replace(self.train, iters=iters, seed=self.seed * 1000 + k)
        return RoundConfig(k, "handcrafted" if k == 1 else "ensemble", train, self.fusion, self.seed * 1000 + k)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d):
    """Instantiate a (nested) frozen dataclass from a dict, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ValueError(f"expected an object for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for name, value in d.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kw[name] = _build(tp, value)
        elif typing.get_origin(tp) is tuple and isinstance(value, list):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    return cls(**kw)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.from_dict(json.loads(Path(path).read_text()))


__all__ = ["AugmentationSpec", "EgomotionConfig", "PipelineConfig", "RoundConfig", "load_config"]
