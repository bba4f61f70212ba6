"""Frozen-backbone transfer-learning benchmark for DermaMNIST and DermaMNIST-C."""

__version__ = "0.1.0"
