"""crossfit: two-field fundus grading with cross-field transformer fusion."""

__version__ = "0.1.0"
