"""Experiment orchestration: config, training loop, checkpoints, comparison, CLI."""
