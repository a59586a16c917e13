"""Solar radiation and PV power forecasting toolkit."""

from .timeseries import DatasetSplit, Flag, ForecastMatrix, TimeSeries

__version__ = "0.1.0"

__all__ = ["DatasetSplit", "Flag", "ForecastMatrix", "TimeSeries", "__version__"]
