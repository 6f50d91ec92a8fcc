"""Desk-scale backdoor-poisoning lab: attacks, robustness scoring, clean training."""

__version__ = "0.1.0"
