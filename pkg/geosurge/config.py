# File: geosurge/config.py
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from .errors import ConfigError

PAPER_TAU_MIN = 50
PAPER_SCHEDULE = (25000, 10000, 5000, 2000, 1000, 750, 500)
PAPER_THRESHOLDS_KM = (1.0, 25.0, 200.0, 750.0, 2500.0)

THREADS_ENV = "GEOSURGE_THREADS"


def _strict_from_dict(cls, data: Dict[str, Any], where: str):
    """Build dataclass ``cls`` from ``data``, rejecting keys it does not declare."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        dotted = ", ".join(f"{where}.{k}" if where else k for k in unknown)
        raise ConfigError(f"Unknown configuration key(s): {dotted}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


@dataclass
class HierarchyConfig:
    """
    Partition hierarchy settings.

    Attributes:
        tau_min: Minimum samples per kept cell, shared by every level.
        tau_max_schedule: Maximum samples per cell, coarsest level first, strictly decreasing.
        levels: Optional subset of schedule indices to keep (hierarchy-depth ablation).
    """
    tau_min: int = PAPER_TAU_MIN
    tau_max_schedule: List[int] = field(default_factory=lambda: list(PAPER_SCHEDULE))
    levels: Optional[List[int]] = None

    def __post_init__(self):
        self.tau_max_schedule = [int(t) for t in self.tau_max_schedule]
        if self.tau_min < 1:
            raise ConfigError("hierarchy.tau_min must be >= 1")
        if not self.tau_max_schedule:
            raise ConfigError("hierarchy.tau_max_schedule must not be empty")
        if self.levels is not None:
            self.levels = [int(i) for i in self.levels]
            if not self.levels or any(not 0 <= i < len(self.tau_max_schedule) for i in self.levels):
                raise ConfigError("hierarchy.levels must index into tau_max_schedule")


@dataclass
class FusionConfig:
    """
    Semantic fusion network dimensions.

    ``blocks = 0`` disables fusion: the visual feature is projected from the RGB CLS token alone.
    ``attn_dim`` defaults to ``kv_dim``.
    """
    kv_dim: int = 1024
    token_dim: int = 128
    latent_dim: int = 64
    heads: int = 8
    attn_dim: Optional[int] = None
    mlp_hidden: int = 1024
    blocks: int = 3
    embed_dim: int = 768
    num_classes: int = 150
    patch_size: int = 14
    seg_height: int = 336
    seg_width: int = 336
    activation: str = "gelu"
    rgb_encoder: bool = False

    def __post_init__(self):
        if self.attn_dim is None:
            self.attn_dim = self.kv_dim
        if not 0 <= self.blocks <= 4:
            raise ConfigError("fusion.blocks must be in 0..4")
        if self.attn_dim % self.heads != 0:
            raise ConfigError(f"fusion.attn_dim {self.attn_dim} not divisible by heads {self.heads}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"Unknown activation: {self.activation}")
        if self.seg_height % self.patch_size or self.seg_width % self.patch_size:
            raise ConfigError("fusion.seg_height/seg_width must be divisible by patch_size")
        if not 1 <= self.num_classes <= 255:
            raise ConfigError("fusion.num_classes must be in 1..255")
        for name in ("kv_dim", "token_dim", "latent_dim", "heads", "mlp_hidden", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"fusion.{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.attn_dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.seg_height // self.patch_size) * (self.seg_width // self.patch_size)

    @classmethod
    def desk(cls) -> FusionConfig:
        """Small configuration used for laptop-scale runs on synthetic data."""
        return cls(kv_dim=64, token_dim=32, latent_dim=16, heads=4, mlp_hidden=64,
                   blocks=1, num_classes=16, seg_height=56, seg_width=56)

    @classmethod
    def paper(cls) -> FusionConfig:
        """Full-size dimensions: 1024-d CLIP tokens, 150 ADE20K classes on 336x336 maps, three blocks."""
        return cls(kv_dim=1024, token_dim=128, latent_dim=64, heads=8, mlp_hidden=1024,
                   blocks=3, embed_dim=768, num_classes=150, patch_size=14, seg_height=336, seg_width=336)

    @classmethod
    def preset(cls, name: str) -> FusionConfig:
        presets = {"desk": cls.desk, "paper": cls.paper}
        if name not in presets:
            raise ConfigError(f"Unknown fusion preset: {name}")
        return presets[name]()


@dataclass
class TrainConfig:
    """
    Attributes:
        batch_size: In-batch contrastive size B (paper 1024 effective; desk default 64).
        accumulate: Micro-batches per optimizer step (effective batch = batch_size * accumulate).
        lr_gamma: Step decay factor applied once per epoch.
        patience: Epochs without validation improvement before stopping.
        precision: "float32" for training, "float64" for gradient checks.
        objective: "contrastive" (geographic embeddings) or "classification".
    """
    batch_size: int = 64
    accumulate: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_gamma: float = 0.5
    patience: int = 4
    seed: int = 0
    epochs_max: int = 20
    precision: str = "float32"
    mask_same_cell_negatives: bool = False
    val_fraction: float = 0.01
    objective: str = "contrastive"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.accumulate < 1:
            raise ConfigError("train.accumulate must be >= 1")
        if not self.lr > 0:
            raise ConfigError("train.lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"Unknown precision: {self.precision}")
        if self.objective not in ("contrastive", "classification"):
            raise ConfigError(f"Unknown objective: {self.objective}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("train.val_fraction must be in (0, 1)")


@dataclass
class SyntheticConfig:
    """
    Desk-scale generator settings.

    ``noise_sigma`` is the feature noise; ``spread_km`` the geodesic scatter of
    samples around their cluster center.
    """
    n_clusters: int = 50
    samples_per_cluster: int = 200
    noise_sigma: float = 0.1
    spread_km: float = 50.0
    rgb_tokens: int = 16
    kv_dim: int = 64
    seg_height: int = 56
    seg_width: int = 56
    patch_size: int = 14
    num_classes: int = 16
    seg_flip: float = 0.1
    signature_scale: float = 0.5
    splits: Dict[str, float] = field(default_factory=lambda: {"train": 0.9, "test": 0.1})
    seed: int = 7

    def __post_init__(self):
        if self.n_clusters < 1 or self.samples_per_cluster < 1 or self.rgb_tokens < 1:
            raise ConfigError("synthetic counts must be positive")
        if self.noise_sigma < 0 or self.spread_km < 0:
            raise ConfigError("synthetic.noise_sigma and spread_km must be >= 0")
        if not 1 <= self.num_classes <= 150:
            raise ConfigError("synthetic.num_classes must be in 1..150")
        if self.seg_height % self.patch_size or self.seg_width % self.patch_size:
            raise ConfigError("synthetic segmentation size must be divisible by patch_size")
        if not 0.0 <= self.seg_flip <= 1.0:
            raise ConfigError("synthetic.seg_flip must be in [0, 1]")
        if abs(sum(self.splits.values()) - 1.0) > 1e-9:
            raise ConfigError("synthetic.splits fractions must sum to 1")


@dataclass
class InferenceConfig:
    """``mode`` is "softmax" (per-level probabilities) or "raw_product" (rescaled cosines)."""
    mode: str = "softmax"
    top_k: int = 5
    split: str = "test"

    def __post_init__(self):
        if self.mode not in ("softmax", "raw_product"):
            raise ConfigError(f"Unknown inference mode: {self.mode}")
        if self.top_k < 1:
            raise ConfigError("inference.top_k must be >= 1")


@dataclass
class EvalConfig:
    thresholds_km: List[float] = field(default_factory=lambda: list(PAPER_THRESHOLDS_KM))

    def __post_init__(self):
        self.thresholds_km = [float(t) for t in self.thresholds_km]
        if not self.thresholds_km:
            raise ConfigError("eval.thresholds_km must not be empty")
        if any(b <= a for a, b in zip(self.thresholds_km, self.thresholds_km[1:])):
            raise ConfigError("eval.thresholds_km must be strictly increasing")


_SECTIONS = {
    "hierarchy": HierarchyConfig,
    "fusion": FusionConfig,
    "train": TrainConfig,
    "synthetic": SyntheticConfig,
    "inference": InferenceConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    """The single configuration document consumed by every cli subcommand."""
    seed: int = 0
    threads: Optional[int] = None
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("configuration document must be a JSON object")
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"Unknown configuration key(s): {', '.join(unknown)}")
        kwargs: Dict[str, Any] = {}
        for key in ("seed", "threads"):
            if key in data:
                kwargs[key] = data[key]
        for name, section_cls in _SECTIONS.items():
            if name in data:
                kwargs[name] = _strict_from_dict(section_cls, data[name], name)
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, json_str: str) -> RunConfig:
        try:
            data = json.loads(json_str)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Configuration is not valid JSON: {e}") from e
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: Optional[str]) -> RunConfig:
        if path is None:
            return cls()
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_json(f.read())
        except OSError as e:
            raise ConfigError(f"Cannot read configuration {path}: {e}") from e

    def with_overrides(self, overrides: Dict[str, Any]) -> RunConfig:
        """
        Return a copy with dotted-key overrides applied, e.g. {"train.lr": 1e-3}.
        ``None`` values are skipped so unset cli flags keep the file's value.
        """
        data = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                if key not in node or not isinstance(node[key], dict):
                    raise ConfigError(f"Unknown configuration key: {dotted}")
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"Unknown configuration key: {dotted}")
            node[leaf] = value
        return RunConfig.from_dict(data)

    def resolve_threads(self, flag: Optional[int] = None) -> int:
        """--threads flag, then config, then $GEOSURGE_THREADS, then 1."""
        for value in (flag, self.threads, os.environ.get(THREADS_ENV)):
            if value is None or value == "":
                continue
            try:
                n = int(value)
            except ValueError as e:
                raise ConfigError(f"Invalid thread count {value!r}") from e
            if n < 1:
                raise ConfigError("thread count must be >= 1")
            return n
        return 1
