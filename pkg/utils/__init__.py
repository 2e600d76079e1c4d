"""Environment, preset and model-factory helpers for the CLI."""
