"""Two-stage cross-market recommendation ranking: hybrid recall, stacked GBDT, ensemble."""

__version__ = "0.1.0"
