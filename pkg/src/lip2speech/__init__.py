"""Multi-task lip-to-speech synthesis."""
__version__ = "0.1.0"
