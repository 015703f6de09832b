"""Routed low-rank adapters with exact gradients, plus the surrounding lab:
mask-to-prompt geometry, routing diagnostics, and a synthetic multi-task
training harness, exposed through a small HTTP service and CLI."""

__version__ = "0.1.0"
