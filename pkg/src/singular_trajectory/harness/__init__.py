"""Benchmark protocols, metrics, baselines, reporting and CLI."""
