"""Artifact plumbing: datasets, config, checkpoints, serving, reports."""
