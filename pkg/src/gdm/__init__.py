"""Gumbel dynamical models."""
