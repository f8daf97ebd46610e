"""Few-shot dexterous grasp synthesis on language-aligned distilled feature clouds."""

__version__ = "0.1.0"
