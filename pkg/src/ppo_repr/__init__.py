"""PPO-Clip with feature-space regularization and representation diagnostics."""

__version__ = "0.1.0"
