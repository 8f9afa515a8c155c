"""Declarative experiment configuration.

One YAML file drives every subcommand; flags only pick the subcommand,
config path, and output locations. Key names mirror the config
dataclasses exactly, and unknown keys are rejected with their full path
so typos (``shift_rage``) cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .compositor import SynthesisConfig
from .datasets import DetectConfig
from .errors import ConfigError
from .optical_flow import FlowSolverParams
from .scene_model import RescaleParams
from .segmentation import ModelConfig, TrainConfig


@dataclass(frozen=True)
class PathsConfig:
    scenes_dir: str = "scenes"
    objects_dir: str = "objects"
    out_dir: str = "out"


@dataclass(frozen=True)
class FlowConfig:
    params: FlowSolverParams = field(default_factory=FlowSolverParams)
    plugin: str | None = None
    magnitude_threshold: float = 2.0


@dataclass(frozen=True)
class AblationConfig:
    variants: dict = field(default_factory=dict)       # name -> manifest path
    eval_manifests: dict = field(default_factory=dict)  # band -> manifest path
    seeds: tuple[int, ...] = (0,)
    use_flow: bool = False


@dataclass(frozen=True)
class RootConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    raw: dict = field(default_factory=dict, compare=False)


def _require_mapping(obj, path: str) -> dict:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(obj).__name__}")
    return obj


def _check_keys(section: dict, known: set[str], path: str):
    unknown = [k for k in section if k not in known]
    if unknown:
        raise ConfigError(
            f"{path}.{unknown[0]}: unknown key (known keys: {sorted(known)})")


def _section(data: dict, name: str) -> dict:
    return _require_mapping(data.get(name), name)


def _build(cls, section: dict, path: str, **overrides):
    try:
        return cls(**{**section, **overrides})
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(data: dict) -> RootConfig:
    data = _require_mapping(data, "<root>")
    _check_keys(data, {"paths", "synthesis", "flow", "model", "train",
                       "detect", "ablation"}, "<root>")

    paths_raw = _section(data, "paths")
    _check_keys(paths_raw, {"scenes_dir", "objects_dir", "out_dir"}, "paths")
    paths = _build(PathsConfig, paths_raw, "paths")

    synth_raw = dict(_section(data, "synthesis"))
    _check_keys(synth_raw, {"counts", "rescale", "shift_range",
                            "global_seed", "placement_region"}, "synthesis")
    if "counts" in synth_raw:
        counts = _require_mapping(synth_raw["counts"], "synthesis.counts")
        _check_keys(counts, {"person", "animal", "texture"}, "synthesis.counts")
        synth_raw["counts"] = {"person": 0, "animal": 0, "texture": 0, **counts}
    if "rescale" in synth_raw:
        rescale = _require_mapping(synth_raw["rescale"], "synthesis.rescale")
        _check_keys(rescale, {"alpha", "beta"}, "synthesis.rescale")
        synth_raw["rescale"] = _build(RescaleParams, rescale, "synthesis.rescale")
    if "shift_range" in synth_raw:
        rng = synth_raw["shift_range"]
        if not (isinstance(rng, (list, tuple)) and len(rng) == 2):
            raise ConfigError("synthesis.shift_range: expected [lo, hi]")
        synth_raw["shift_range"] = (int(rng[0]), int(rng[1]))
    synthesis = _build(SynthesisConfig, synth_raw, "synthesis")

    flow_raw = dict(_section(data, "flow"))
    _check_keys(flow_raw, {"smoothness_weight", "iterations", "pyramid_levels",
                           "plugin", "magnitude_threshold"}, "flow")
    plugin = flow_raw.pop("plugin", None)
    threshold = flow_raw.pop("magnitude_threshold", 2.0)
    flow = FlowConfig(params=_build(FlowSolverParams, flow_raw, "flow"),
                      plugin=plugin, magnitude_threshold=float(threshold))

    model_raw = _section(data, "model")
    _check_keys(model_raw, {"in_channels", "base_width", "depth"}, "model")
    model = _build(ModelConfig, model_raw, "model")

    train_raw = _section(data, "train")
    _check_keys(train_raw, {"batch_size", "epochs", "lr", "weight_decay",
                            "seed", "val_fraction"}, "train")
    train = _build(TrainConfig, train_raw, "train")

    detect_raw = dict(_section(data, "detect"))
    _check_keys(detect_raw, {"backend", "min_confidence", "chroma_key",
                             "chroma_tolerance", "plugin", "timeout"}, "detect")
    if "chroma_key" in detect_raw:
        key = detect_raw["chroma_key"]
        if not (isinstance(key, (list, tuple)) and len(key) == 3):
            raise ConfigError("detect.chroma_key: expected [r, g, b]")
        detect_raw["chroma_key"] = tuple(int(v) for v in key)
    detect = _build(DetectConfig, detect_raw, "detect")

    abl_raw = dict(_section(data, "ablation"))
    _check_keys(abl_raw, {"variants", "eval_manifests", "seeds", "use_flow"},
                "ablation")
    if "seeds" in abl_raw:
        abl_raw["seeds"] = tuple(int(s) for s in abl_raw["seeds"])
    ablation = _build(AblationConfig, abl_raw, "ablation")

    return RootConfig(paths=paths, synthesis=synthesis, flow=flow, model=model,
                      train=train, detect=detect, ablation=ablation, raw=data)


def load_config(path: str | Path) -> RootConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with path.open("r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(data or {})
