"""Energy-aware boosted CNN ensembles with a Q-learning runtime scheduler."""

__version__ = "0.1.0"
