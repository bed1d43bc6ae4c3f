"""Training dynamics of low-rank adapters on synthetic fine-tuning problems."""

__version__ = "0.1.0"
