"""Stabilized data-driven surrogates of chaotic dynamical systems."""
