"""Image-conditioned motion prediction with energy scoring and learned refinement."""

__version__ = "0.1.0"
