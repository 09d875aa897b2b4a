"""Experiment orchestration: configs, datasets, runs, reports and the CLI."""
