"""Federated learning simulator: FedAvg vs. feature-aligned group-structured averaging."""

__version__ = "0.1.0"
