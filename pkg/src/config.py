"""Central configuration: one dataclass tree holding every hyperparameter of both stages.

A run is described by a YAML file overlaid on `default_config(stage, scale)`.
Unknown keys and wrongly typed values are rejected with a dotted field path
(ConfigError). Runtime-only settings (where runs live, CPU threads) come from
the environment / a .env file and never enter the config hash.
"""
from __future__ import annotations
import copy
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from .guardrails import ConfigError

load_dotenv()

STAGES = ("manipulation", "synthesis")
SCALES = ("full", "toy")
START_RESOLUTIONS = (4, 8, 16, 32)
RULE_SHAPES = ("bar", "cap", "studs", "fringe")
CONDITIONINGS = ("modconv", "adain")
SYNTHESIS_VARIANTS = ("spade", "matrix", "full")
EVAL_MODES = ("latent", "reference")
CONFIG_VERSION = 1


@dataclass
class RuntimeSettings:
    runs_dir: str = field(default_factory=lambda: os.getenv("RUNS_DIR", "runs"))
    num_threads: int = field(default_factory=lambda: int(os.getenv("TORCH_NUM_THREADS", "0")))


SETTINGS = RuntimeSettings()


@dataclass
class RuleConfig:
    name: str = "eyeglasses"
    region: int = 3
    shape: str = "bar"
    presence: float = 0.5


@dataclass
class ToyDataConfig:
    resolution: int = 32
    num_classes: int = 4
    rules: List[RuleConfig] = field(default_factory=lambda: [RuleConfig()])
    min_pixels: int = 4
    n_train: int = 512
    n_test: int = 64
    with_images: bool = False
    seed: int = 0


@dataclass
class DatasetConfig:
    kind: str = "toy"  # toy | directory
    path: Optional[str] = None
    # domain name -> attribute column; "!Col" negates (e.g. hair: "!Bald")
    attribute_columns: Dict[str, str] = field(default_factory=dict)
    test_fraction: float = 0.1
    flip: bool = False
    toy: ToyDataConfig = field(default_factory=ToyDataConfig)


def _full_synth_channels() -> Dict[int, int]:
    return {4: 512, 8: 512, 16: 512, 32: 512, 64: 256, 128: 256, 256: 128}


@dataclass
class ModelConfig:
    img_size: int = 256
    num_classes: int = 19
    domain_names: List[str] = field(default_factory=lambda: ["identity", "eyeglasses", "hat", "hair", "bangs", "earrings"])
    style_widths: List[int] = field(default_factory=lambda: [64, 16, 16, 16, 16, 16])
    weighted_styles: bool = True
    latent_dim: int = 16
    channel_divisor: int = 1
    g_base_channels: int = 32
    d_base_channels: int = 64
    max_channels: int = 512
    mapping_hidden: int = 512
    manipulation_conditioning: str = "modconv"  # modconv | adain
    # synthesis stage
    synthesis_variant: str = "full"  # spade | matrix | full
    mask_only_layers: int = 3  # trailing SAC* layers, RGB head included
    region_style_dim: int = 64
    start_res: int = 8
    synth_channels: Dict[int, int] = field(default_factory=_full_synth_channels)
    encoder_base_channels: int = 32
    encoder_downsamples: int = 2
    mapping_layers: int = 8
    mapping_lr_mul: float = 0.01
    mbstd_group: int = 4

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    def effective_style_widths(self) -> List[int]:
        if self.weighted_styles:
            return list(self.style_widths)
        return [self.style_widths[0]] * len(self.style_widths)

    def scaled(self, channels: int) -> int:
        return max(1, channels // self.channel_divisor)


@dataclass
class LossConfig:
    lambda_rec: float = 1.0
    lambda_sty: float = 1.0
    lambda_sd: float = 20.0
    sd_anneal_steps: int = 200000  # 0 keeps lambda_sd constant
    lambda_feat: float = 10.0
    r1_gamma: float = 1.0
    r1_every: int = 1
    active_domains: str = "all"  # all | changed
    detach_cycle_style: bool = True


@dataclass
class OptimConfig:
    lr: float = 1e-4
    betas: List[float] = field(default_factory=lambda: [0.0, 0.99])
    steps: int = 200000
    batch_size: int = 6
    grad_accumulation: int = 1
    checkpoint_every: int = 1000
    log_every: int = 1


@dataclass
class EvaluationConfig:
    num_samples: int = 10  # K transformations per input
    fid_samples: int = 500  # cap on generated samples entering FID
    batch_size: int = 16
    seed: int = 0
    embedding: str = "random_projection"
    distance: str = "pixel_l1"
    attributes: str = "toy_oracle"
    pose: str = "toy_geometry"
    modes: List[str] = field(default_factory=lambda: list(EVAL_MODES))


@dataclass
class Config:
    stage: str = "manipulation"
    scale: str = "full"
    version: int = CONFIG_VERSION
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)


def default_config(stage: str = "manipulation", scale: str = "full") -> Config:
    if stage not in STAGES:
        raise ConfigError("stage", f"expected one of {STAGES}, got {stage!r}")
    if scale not in SCALES:
        raise ConfigError("scale", f"expected one of {SCALES}, got {scale!r}")
    cfg = Config(stage=stage, scale=scale, dataset=DatasetConfig(kind="directory"))
    cfg.evaluation.fid_samples = 10000
    if stage == "synthesis":
        cfg.optim = OptimConfig(lr=2e-3, steps=300000, batch_size=4)
        cfg.loss.r1_gamma = 10.0
        cfg.loss.r1_every = 16
    if scale == "toy":
        cfg.model = ModelConfig(img_size=32, num_classes=4, domain_names=["eyeglasses"], style_widths=[16],
                                channel_divisor=8, encoder_downsamples=1)
        cfg.dataset = DatasetConfig(kind="toy", toy=ToyDataConfig(with_images=stage == "synthesis"))
        cfg.loss.sd_anneal_steps = 2000
        cfg.optim.checkpoint_every = 100
        cfg.evaluation.fid_samples = 500
        if stage == "manipulation":
            cfg.optim.steps = 2000
        else:
            cfg.optim.steps = 1000
            cfg.loss.r1_gamma = 1.0
    return cfg


def _from_value(hint, value, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected a mapping")
        return _from_dict(hint, value, f"{path}.")
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _from_value(inner, value, path)
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return [_from_value(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected a mapping")
        return {_from_value(args[0], k, f"{path}.{k}"): _from_value(args[1], v, f"{path}.{k}")
                for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected bool, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, str) and value.lstrip("-").isdigit():
            return int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected int, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected string, got {value!r}")
        return value
    return value


def _from_dict(cls, data: Dict[str, Any], path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}{key}", "unknown key")
    kwargs = {k: _from_value(hints[k], v, f"{path}{k}") for k, v in data.items()}
    return cls(**kwargs)


def _deep_merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "synth_channels":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(data: Dict[str, Any]) -> Config:
    """Overlay `data` on the defaults for its stage/scale, then type-check and validate."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    stage = data.get("stage", "manipulation")
    scale = data.get("scale", "full")
    base = dataclasses.asdict(default_config(stage, scale))
    cfg = _from_dict(Config, _deep_merge(base, data))
    validate(cfg)
    return cfg


def load_config(path: str | Path) -> Config:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError("<file>", f"invalid YAML: {e}") from e
    return config_from_dict(raw)


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False), encoding="utf-8")


def config_hash(cfg: Config) -> str:
    canonical = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _require(ok: bool, path: str, message: str) -> None:
    if not ok:
        raise ConfigError(path, message)


def validate(cfg: Config) -> Config:
    m, d, lo, op = cfg.model, cfg.dataset, cfg.loss, cfg.optim
    _require(cfg.stage in STAGES, "stage", f"expected one of {STAGES}")
    _require(cfg.scale in SCALES, "scale", f"expected one of {SCALES}")
    _require(cfg.version == CONFIG_VERSION, "version", f"unsupported version {cfg.version}")
    size = m.img_size
    _require(size >= 16 and size & (size - 1) == 0, "model.img_size", "must be a power of two >= 16")
    _require(m.num_classes >= 2, "model.num_classes", "need at least two classes")
    _require(m.num_domains >= 1, "model.domain_names", "need at least one domain")
    _require(len(m.style_widths) == m.num_domains, "model.style_widths", "one width per domain")
    _require(all(w >= 1 for w in m.style_widths), "model.style_widths", "widths must be positive")
    _require(m.start_res in START_RESOLUTIONS and m.start_res <= size, "model.start_res",
             f"expected one of {START_RESOLUTIONS} not above img_size")
    _require(all(r in m.synth_channels for r in _pow2_range(m.start_res, size)), "model.synth_channels",
             "missing a channel count for a generator resolution")
    _require(0 <= m.encoder_downsamples and size >> m.encoder_downsamples >= 4, "model.encoder_downsamples",
             "encoder trunk must stay at 4x4 or above")
    _require(m.channel_divisor >= 1, "model.channel_divisor", "must be >= 1")
    _require(m.mapping_layers >= 1, "model.mapping_layers", "must be >= 1")
    _require(m.mbstd_group >= 0, "model.mbstd_group", "must be >= 0")
    _require(m.manipulation_conditioning in CONDITIONINGS, "model.manipulation_conditioning",
             f"expected one of {CONDITIONINGS}")
    _require(m.synthesis_variant in SYNTHESIS_VARIANTS, "model.synthesis_variant",
             f"expected one of {SYNTHESIS_VARIANTS}")
    _require(m.mask_only_layers >= 1, "model.mask_only_layers", "the RGB head is always mask-only")
    for name in ("lambda_rec", "lambda_sty", "lambda_sd", "lambda_feat", "r1_gamma"):
        _require(getattr(lo, name) >= 0, f"loss.{name}", "must be non-negative")
    _require(lo.r1_every >= 1, "loss.r1_every", "must be >= 1")
    _require(lo.sd_anneal_steps >= 0, "loss.sd_anneal_steps", "must be >= 0")
    _require(lo.active_domains in ("all", "changed"), "loss.active_domains", "expected 'all' or 'changed'")
    _require(op.lr > 0, "optim.lr", "must be positive")
    _require(len(op.betas) == 2 and all(0 <= b < 1 for b in op.betas), "optim.betas", "two values in [0, 1)")
    _require(op.batch_size >= 2, "optim.batch_size", "label shuffling needs at least 2")
    _require(op.grad_accumulation >= 1, "optim.grad_accumulation", "must be >= 1")
    _require(op.steps >= 0 and op.checkpoint_every >= 1 and op.log_every >= 1, "optim", "bad step counters")
    ev = cfg.evaluation
    _require(ev.num_samples >= 2, "evaluation.num_samples", "diversity needs at least 2 samples per input")
    _require(ev.fid_samples >= 2 and ev.batch_size >= 1, "evaluation", "bad sample counts")
    _require(len(ev.modes) >= 1 and set(ev.modes) <= set(EVAL_MODES), "evaluation.modes",
             f"a non-empty subset of {EVAL_MODES}")
    _require(d.kind in ("toy", "directory"), "dataset.kind", "expected 'toy' or 'directory'")
    _require(0 < d.test_fraction < 1, "dataset.test_fraction", "must be in (0, 1)")
    if d.kind == "directory":
        _require(bool(d.path), "dataset.path", "required for directory datasets")
        _require(set(d.attribute_columns) == set(m.domain_names), "dataset.attribute_columns",
                 "must map every domain name")
    else:
        t = d.toy
        _require(t.resolution == size, "dataset.toy.resolution", "must equal model.img_size")
        _require(t.num_classes == m.num_classes, "dataset.toy.num_classes", "must equal model.num_classes")
        _require(len(t.rules) == m.num_domains, "dataset.toy.rules", "one rule per domain")
        for i, rule in enumerate(t.rules):
            _require(3 <= rule.region < t.num_classes, f"dataset.toy.rules[{i}].region",
                     "regions 0-2 are background/skin/hair")
            _require(rule.shape in RULE_SHAPES, f"dataset.toy.rules[{i}].shape", f"expected one of {RULE_SHAPES}")
            _require(0 <= rule.presence <= 1, f"dataset.toy.rules[{i}].presence", "must be in [0, 1]")
        _require(len({r.region for r in t.rules}) == len(t.rules), "dataset.toy.rules", "regions must be distinct")
        _require(t.n_train >= op.batch_size and t.n_test >= 1, "dataset.toy", "too few samples")
        if cfg.stage == "synthesis":
            _require(t.with_images, "dataset.toy.with_images", "synthesis needs RGB images")
    return cfg


def _pow2_range(lo: int, hi: int) -> List[int]:
    out, r = [], lo
    while r <= hi:
        out.append(r)
        r *= 2
    return out


def config_schema(cls=Config, prefix: str = "") -> Dict[str, Dict[str, Any]]:
    """Flattened published schema: dotted field path -> {type, default}."""
    schema: Dict[str, Dict[str, Any]] = {}
    hints = typing.get_type_hints(cls)
    defaults = cls()
    for f in dataclasses.fields(cls):
        hint = hints[f.name]
        path = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(hint):
            schema.update(config_schema(hint, path + "."))
        else:
            schema[path] = {"type": getattr(hint, "__name__", str(hint)), "default": getattr(defaults, f.name)}
    return schema
