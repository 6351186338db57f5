"""Channel-aware split learning for LSTM time-series forecasting."""

__version__ = "0.1.0"
