"""Desk-scale hybrid sky-camera and satellite solar nowcasting."""
from .errors import ConfigError, DataError, DomainError, OmnicastError, TrainingFault
from .grid import Grid2D, read_fgrid, write_fgrid
from .geometry import SolarPosition, clear_sky_ghi, solar_position
from .metrics import BinnedDistribution, crps, forecast_skill, rmse
from .model import ForecastSet, ModelConfig, ParameterStore
from .estimators import (CloudIndexTransformer, CMVRegressor, HybridForecaster, SatelliteVariantTransformer,
                         SkyImageTransformer, SmartPersistenceRegressor)

__version__ = "0.1.0"

__all__ = [
    "OmnicastError", "ConfigError", "DataError", "DomainError", "TrainingFault",
    "Grid2D", "read_fgrid", "write_fgrid",
    "SolarPosition", "solar_position", "clear_sky_ghi",
    "BinnedDistribution", "crps", "forecast_skill", "rmse",
    "ForecastSet", "ModelConfig", "ParameterStore",
    "CloudIndexTransformer", "SkyImageTransformer", "SatelliteVariantTransformer",
    "SmartPersistenceRegressor", "CMVRegressor", "HybridForecaster",
]
