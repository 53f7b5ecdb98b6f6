"""EEG-steered target speaker extraction with brainprint modulation."""

__version__ = "0.1.0"
