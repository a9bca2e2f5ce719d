"""Keyword-spotting experimentation toolkit: streaming SVDF models trained on
mixtures of synthetic and real speech."""

__version__ = "0.1.0"
