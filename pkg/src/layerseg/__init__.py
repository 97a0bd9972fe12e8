"""Learning instance appearances and soft masks by compositing independent layers."""

__version__ = "0.1.0"
