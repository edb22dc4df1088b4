"""Pattern-clustered knowledge distillation for memory access prediction models."""

__version__ = "0.1.0"
