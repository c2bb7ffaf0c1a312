"""Low-rate hardware-counter website fingerprinting: collection, feature
ranking, classifiers, evaluation sweeps and trace exfiltration."""

__version__ = "0.1.0"
