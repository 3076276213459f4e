"""Deep metric learning for multichannel physiological time series."""

__version__ = "0.1.0"
