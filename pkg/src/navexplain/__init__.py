"""Semantic-frame robot navigation with a DQN agent, an attention branch
distilled from it, and tools for scoring the resulting visual explanations."""

__version__ = "0.1.0"
