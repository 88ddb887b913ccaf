"""Patterson-map to electron-density prediction: data generation, models, training and metrics."""

__version__ = "0.1.0"
