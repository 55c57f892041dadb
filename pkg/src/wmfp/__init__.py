"""Weight-modulation fingerprinting of generative decoders."""
__version__ = "0.1.0"
