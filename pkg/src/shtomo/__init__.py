"""Shack-Hartmann coherence tomography."""
