"""Head-pose-aware gaze estimation toolkit."""

__version__ = "0.1.0"
