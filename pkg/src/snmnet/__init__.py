"""Spherical-normalisation + Mahalanobis open-set recognition."""
