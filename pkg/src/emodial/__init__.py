"""Emotion classification of the last turn of three-turn dialogues."""

__version__ = "0.1.0"
