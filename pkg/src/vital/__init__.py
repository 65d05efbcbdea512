"""RSSI fingerprint localisation with a vision transformer and device-robust augmentation."""

__version__ = "0.1.0"
