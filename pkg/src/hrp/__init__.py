"""Hand-affordance pretraining for robot visual representations, at desk scale."""

__version__ = "0.1.0"
