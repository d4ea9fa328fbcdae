"""Image complexity assessment by aligning images with complexity prompts and scene descriptions."""

__version__ = "0.1.0"
