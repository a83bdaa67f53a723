"""Non-uniform adversarial speaker disentanglement for raw-audio condition detection."""

__version__ = "0.1.0"
