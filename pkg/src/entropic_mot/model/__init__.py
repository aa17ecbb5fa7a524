"""Marginals, costs, dual variables and instance documents."""
