"""Keystroke-dynamics biometrics with a recurrent embedding network."""

__version__ = "0.1.0"
