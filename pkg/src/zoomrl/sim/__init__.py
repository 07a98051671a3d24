"""Synthetic needle-search environment, toy policy and training driver."""
