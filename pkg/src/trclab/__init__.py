"""Post-hoc correction of frozen tabular deep-learning representations."""

__version__ = "0.1.0"
