"""Executable surface: synthetic tasks, training, checks, benchmarks, export."""
