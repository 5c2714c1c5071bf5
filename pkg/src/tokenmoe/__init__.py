"""SoftMoE, expert-choice and token-choice value networks at desk scale."""

__version__ = "0.1.0"
