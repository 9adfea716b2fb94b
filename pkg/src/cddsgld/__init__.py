"""Channel-driven decentralized Langevin sampling over noisy D2D links, with a quantized DSGD baseline."""

__version__ = "0.1.0"
