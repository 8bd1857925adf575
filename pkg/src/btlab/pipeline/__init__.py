"""Experiment orchestration: data generation, fine-tuning, metrics, reports, CLI."""
