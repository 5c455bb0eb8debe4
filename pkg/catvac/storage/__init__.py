"""On-disk formats and data sources."""
