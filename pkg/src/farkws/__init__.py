"""Far-field keyword spotting with domain-aware training, in numpy."""

__version__ = "0.1.0"
