"""Low-rank Student-t process mixtures for gridded spatiotemporal extremes."""

__version__ = "0.1.0"
