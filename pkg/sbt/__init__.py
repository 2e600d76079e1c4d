"""Sparse binary transformers for multivariate time series."""
from importlib import import_module
from typing import Any

__all__ = [
    "errors",
    "numerics",
    "biprop",
    "attention",
    "model",
    "synthetic",
    "pipeline",
    "threshold",
    "costmodel",
    "artifact",
]


def __getattr__(name: str) -> Any:
    if name in __all__:
        module = import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__} has no attribute {name}")
