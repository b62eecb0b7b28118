"""Caption-augmented fine-tuning pipeline and evaluation toolkit for scientific visual QA."""

__version__ = "0.1.0"
