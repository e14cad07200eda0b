"""Consistency-regularized randomized smoothing at desk scale."""
