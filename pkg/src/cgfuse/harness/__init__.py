"""Corpora, experiment orchestration and the command line."""
