"""FedPerm: private federated learning via intra-model shuffling and cPIR aggregation."""

__version__ = "0.1.0"
