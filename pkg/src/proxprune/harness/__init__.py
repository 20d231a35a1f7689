"""Experiment driver: config, datasets, checkpoints, metrics and the CLI."""
