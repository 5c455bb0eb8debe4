"""Domain logic: features, sampling, networks, losses, training, clustering and metrics."""
