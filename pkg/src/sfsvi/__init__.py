"""Sequential function-space variational inference for continual learning."""

__version__ = "0.1.0"
