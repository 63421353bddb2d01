"""Teacher-student talking-face synthesis at toy scale."""

__version__ = "0.1.0"
