"""Utility modules for wflow."""
