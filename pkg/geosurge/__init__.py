# File: geosurge/__init__.py
from .config import RunConfig, HierarchyConfig, FusionConfig, TrainConfig, SyntheticConfig, InferenceConfig, EvalConfig
from .errors import GeoSurgeError, ConfigError, DataError, IntegrityError
from .geodesy import GeoPoint, CellId, haversine_km, cell_id_at_level, cell_center
from .partition import Sample, Partition, PartitionHierarchy, build_partition, build_hierarchy
from .geoembed import GeoRepresentation, init_embeddings
from .fusion import FusionModuleParams, init_fusion_params, fuse
from .trainer import GeoSurgeModel, build_model, fit, total_loss
from .inference import HierPrediction, Predictor, predict, predict_multi
from .evalkit import ThresholdReport, gcd_accuracy, render_report

__all__ = [
    "RunConfig",
    "HierarchyConfig",
    "FusionConfig",
    "TrainConfig",
    "SyntheticConfig",
    "InferenceConfig",
    "EvalConfig",
    "GeoSurgeError",
    "ConfigError",
    "DataError",
    "IntegrityError",
    "GeoPoint",
    "CellId",
    "haversine_km",
    "cell_id_at_level",
    "cell_center",
    "Sample",
    "Partition",
    "PartitionHierarchy",
    "build_partition",
    "build_hierarchy",
    "GeoRepresentation",
    "init_embeddings",
    "FusionModuleParams",
    "init_fusion_params",
    "fuse",
    "GeoSurgeModel",
    "build_model",
    "fit",
    "total_loss",
    "HierPrediction",
    "Predictor",
    "predict",
    "predict_multi",
    "ThresholdReport",
    "gcd_accuracy",
    "render_report",
]
