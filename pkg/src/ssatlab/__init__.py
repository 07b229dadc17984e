"""Single-step adversarial training lab with abnormal-adversarial-example regularization."""

__version__ = "0.1.0"
