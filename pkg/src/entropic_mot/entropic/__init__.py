"""Entropic objective, stabilized kernel arithmetic and block updates."""
