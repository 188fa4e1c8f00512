"""Federated intrusion detection on synthetic system-call traces.

Subpackages: traces (corpus generation and I/O), features (TF-IDF windowed
preprocessing), nn (from-scratch GRU classifier), fed (FedAvg engine and
centralized baseline), metrics, transport (wire format and channels), and
cli (experiment driver).
"""

__version__ = "0.1.0"
