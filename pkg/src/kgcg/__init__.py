"""Knowledge-graph-augmented generative commonsense reasoning at desk scale."""

__version__ = "0.1.0"
