"""Plan generation with a memory-augmented decoder over a discrete procedure book."""

__version__ = "0.1.0"
