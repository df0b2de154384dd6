"""Rule-grounded, stateful generation of synthetic credit-card transaction streams."""

__version__ = "0.1.0"
