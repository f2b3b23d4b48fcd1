"""Bounded solutions of nonlinear neutral difference equations."""
