"""Martingale Sinkhorn, implied truncated Newton, semi-dual descent and the staged driver."""
