"""Joint view-synthesis and contrastive training for unsupervised
re-identification on a synthetic articulated-figure world."""

__version__ = "0.1.0"
