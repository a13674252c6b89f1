"""Data-free substitute-model attack toolkit with exact query accounting."""

__version__ = "0.1.0"

from .core import (
    ClassSpace,
    ImageBatch,
    OracleMode,
    OracleOutput,
    StageTag,
    ToyDatasetSpec,
    generate_toy_dataset,
    load_image_folder,
)
from .oracle import BudgetExhausted, LocalOracle, OracleConfig, QueryLedger, RemoteOracle

__all__ = [
    "ClassSpace",
    "ImageBatch",
    "OracleMode",
    "OracleOutput",
    "StageTag",
    "ToyDatasetSpec",
    "generate_toy_dataset",
    "load_image_folder",
    "BudgetExhausted",
    "LocalOracle",
    "OracleConfig",
    "QueryLedger",
    "RemoteOracle",
    "__version__",
]
