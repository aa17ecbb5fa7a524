"""Concave envelopes of sampled functions and duality-gap dominators."""
