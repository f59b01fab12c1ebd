"""Desk-scale knowledge distillation for tiny decoder-only transformers."""

__version__ = "0.1.0"
