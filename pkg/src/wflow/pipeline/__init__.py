"""Experiment configuration, logging and execution for wflow runs."""
