"""Neural-network trading strategies over stocks, a bond and European options."""

__version__ = "0.1.0"
