"""Entropic martingale optimal transport solver suite."""
