"""Multi-level adaptive contrastive training against knowledge regurgitation."""

__version__ = "0.1.0"
