"""Scale-disentangled spatiotemporal forecasting for road-network series."""

__version__ = "0.1.0"
