"""VQ autoencoder and classifier for compressing WiFi CSI amplitude frames."""

__version__ = "0.1.0"
