"""Modal-decomposition data generation and a joint MAE/ViT regressor for heart failure time."""

__version__ = "0.1.0"
