"""Hierarchical relation network physics: simulation, learned dynamics and evaluation."""
