"""QFT Engine - fully quantized training of MLPs with integer model states."""
__version__ = "1.0.0"
