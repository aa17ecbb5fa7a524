"""Convex-order repair and penalization asymptotics."""
