"""Momentum contrastive clustering, centralized (MCC) and federated (FedMCC)."""

__version__ = "0.1.0"
